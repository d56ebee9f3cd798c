"""Aggregate NMSE/PSNR/SSIM tables over reconstruction/reference pairs."""

from __future__ import annotations

from typing import IO, Sequence

import numpy as np

from kdeq.grid import MetricsTriple, metrics

__all__ = ["eval_report", "format_report", "summarize"]

COLUMNS = ("item", "nmse", "psnr", "ssim")


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation.

    A column of identical values (including the +inf PSNR sentinel) has
    spread 0; any other column containing a non-finite value gets
    ``nan`` spread.
    """
    a = np.asarray(values, dtype=np.float64)
    if np.all(a == a[0]):
        return float(a[0]), 0.0
    if not np.all(np.isfinite(a)):
        return float(np.mean(a)), float("nan")
    return float(np.mean(a)), float(np.std(a))


def _fmt(v) -> str:
    return v if isinstance(v, str) else f"{v:.10g}"


def format_report(items: Sequence[MetricsTriple], sep: str = "\t") -> str:
    rows = [sep.join(COLUMNS)]
    for i, m in enumerate(items):
        rows.append(sep.join(_fmt(v) for v in (str(i), m.nmse, m.psnr, m.ssim)))
    stats = [summarize([getattr(m, k) for m in items]) for k in COLUMNS[1:]]
    rows.append(sep.join(_fmt(v) for v in ["mean"] + [s[0] for s in stats]))
    rows.append(sep.join(_fmt(v) for v in ["std"] + [s[1] for s in stats]))
    return "\n".join(rows) + "\n"


def eval_report(pairs: Sequence[tuple], out: IO[str] | None = None, sep: str = "\t"):
    """Metrics for every ``(ref, rec)`` pair of real images plus mean and
    population-std rows.

    Returns ``(per_item, text)``; ``text`` is also written to ``out`` when
    given.
    """
    if len(pairs) == 0:
        raise ValueError("eval_report needs at least one (ref, rec) pair")
    items = [metrics(ref, rec) for ref, rec in pairs]
    text = format_report(items, sep)
    if out is not None:
        out.write(text)
    return items, text
