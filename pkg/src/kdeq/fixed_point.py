"""Data-consistency projection, the projected-gradient map and fixed-point
solvers (plain iteration and type-II Anderson acceleration)."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "SamplingMask",
    "FixedPointConfig",
    "FixedPointReport",
    "project_dc",
    "pgd_map",
    "zero_filled",
    "solve_fixed_point",
    "check_step_budget",
]


@dataclass(frozen=True)
class SamplingMask:
    """Boolean sampling pattern over ``(N1, N2)``, broadcast over coils.

    ``acs`` is the half-open rectangle ``(r0, r1, c0, c1)`` of the fully
    sampled calibration block, or ``None``. ``role`` tags the set the mask
    stands for (``"omega"``, ``"lambda"`` or ``"gamma"``).
    """

    keep: np.ndarray
    acs: tuple | None = None
    accel: float = 1.0
    role: str = "omega"

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        if keep.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {keep.shape}")
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)
        if self.acs is not None:
            r0, r1, c0, c1 = (int(v) for v in self.acs)
            if not (0 <= r0 < r1 <= keep.shape[0] and 0 <= c0 < c1 <= keep.shape[1]):
                raise ValueError(f"ACS rectangle {self.acs} outside mask {keep.shape}")
            if not keep[r0:r1, c0:c1].all():
                raise ValueError("ACS region is not contained in the sampled set")
            object.__setattr__(self, "acs", (r0, r1, c0, c1))
        if self.role != "gamma" and not keep.any():
            raise ValueError("sampling mask is empty")

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape

    @property
    def omega(self) -> np.ndarray:
        """Flat (row-major) indices of the sampled locations."""
        return np.flatnonzero(self.keep)

    @property
    def count(self) -> int:
        return int(self.keep.sum())

    def acs_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        if self.acs is not None:
            r0, r1, c0, c1 = self.acs
            m[r0:r1, c0:c1] = True
        return m

    def full(self) -> bool:
        return bool(self.keep.all())


@dataclass(frozen=True)
class FixedPointConfig:
    tol: float = 1e-6
    max_iters: int = 500
    solver: str = "plain"
    anderson_memory: int = 5
    anderson_damping: float = 1.0
    anderson_reg: float = 1e-8

    def __post_init__(self):
        if self.solver not in ("plain", "anderson"):
            raise ValueError(f"solver must be 'plain' or 'anderson', got {self.solver!r}")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol must be positive and max_iters >= 1")
        if self.anderson_memory < 1 or not 0 < self.anderson_damping <= 1:
            raise ValueError("anderson_memory >= 1 and damping in (0, 1] required")


@dataclass(frozen=True)
class FixedPointReport:
    """Outcome of a fixed-point solve.

    ``residuals[k]`` is ``||F(x_k) - x_k|| / ||x_k||`` (or over the supplied
    scale) for every evaluated iterate; ``steps[k]`` the unnormalized
    ``||F(x_k) - x_k||``. ``contraction_est`` is the largest ratio
    ``steps[k+1] / steps[k]`` seen, which bounds the local Lipschitz
    constant from below for plain iteration.
    """

    solution: np.ndarray
    residuals: np.ndarray
    steps: np.ndarray
    iters: int
    converged: bool
    contraction_est: float
    fallbacks: int = 0

    @property
    def final_residual(self) -> float:
        return float(self.residuals[-1]) if self.residuals.size else float("nan")


def project_dc(r: np.ndarray, mask: SamplingMask, y: np.ndarray) -> np.ndarray:
    """Replace entries on the sampled set with the measurements: ``(I - M) r + y``."""
    r = np.asarray(r)
    y = np.asarray(y)
    if r.shape != y.shape or r.shape[:2] != mask.shape:
        raise ValueError(f"dimension mismatch: r {r.shape}, y {y.shape}, mask {mask.shape}")
    return np.where(mask.keep[:, :, None], y, r)


def zero_filled(y: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Measurements on the sampled set, zeros elsewhere (the solver start)."""
    y = np.asarray(y, dtype=np.complex128)
    return np.where(mask.keep[:, :, None], y, 0.0 + 0.0j)


def pgd_map(x: np.ndarray, residual_op: Callable[[np.ndarray], np.ndarray],
            mask: SamplingMask, y: np.ndarray) -> np.ndarray:
    """One projected-gradient step ``P(G(x))``."""
    return project_dc(residual_op(x), mask, y)


def check_step_budget(eta: float, epsilon: float) -> bool:
    """True when the step size satisfies ``eta < 1 / (1 - epsilon)``."""
    return 0.0 <= eta < 1.0 / (1.0 - epsilon)


def _rdot(a, b):
    return float(np.real(np.vdot(a, b)))


def solve_fixed_point(x0: np.ndarray, fmap: Callable[[np.ndarray], np.ndarray],
                      cfg: FixedPointConfig, scale: float | None = None) -> FixedPointReport:
    """Iterate ``x <- fmap(x)`` from ``x0`` until the relative residual falls
    below ``cfg.tol``.

    The returned solution is the last iterate whose residual was evaluated,
    so re-evaluating ``fmap`` at it reproduces the final residual. Anderson
    mixing uses real least-squares weights, which keeps it valid for maps
    that are only real-linear (e.g. with componentwise activations).
    """
    x = np.array(x0, dtype=np.complex128)
    residuals: list[float] = []
    steps: list[float] = []
    converged = False
    fallbacks = 0
    anderson = cfg.solver == "anderson"
    dx_hist: deque = deque(maxlen=cfg.anderson_memory)
    dg_hist: deque = deque(maxlen=cfg.anderson_memory)
    x_prev = g_prev = None
    beta = cfg.anderson_damping

    for k in range(cfg.max_iters):
        g = fmap(x)
        f = g - x
        step = float(np.linalg.norm(f))
        denom = scale if scale is not None else float(np.linalg.norm(x))
        if denom == 0.0:
            denom = float(np.linalg.norm(g)) or 1.0
        res = step / denom
        residuals.append(res)
        steps.append(step)
        if not np.isfinite(res):
            log.warning("fixed point: non-finite residual at iteration %d", k)
            break
        if res <= cfg.tol:
            converged = True
            break
        if k == cfg.max_iters - 1:
            break
        if not anderson:
            x = g
            continue

        if x_prev is not None:
            dx_hist.append(x - x_prev)
            dg_hist.append(g - g_prev)
        x_prev, g_prev = x, g
        if not dx_hist:
            x = x + beta * f
            continue
        df = [dg - dx for dg, dx in zip(dg_hist, dx_hist)]
        m = len(df)
        a = np.empty((m, m))
        b = np.empty(m)
        for i in range(m):
            b[i] = _rdot(df[i], f)
            for j in range(i, m):
                a[i, j] = a[j, i] = _rdot(df[i], df[j])
        a[np.diag_indices(m)] += cfg.anderson_reg * max(np.trace(a) / m, 1e-300)
        try:
            gamma = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            gamma = None
        if gamma is None or not np.all(np.isfinite(gamma)):
            log.debug("anderson: least-squares breakdown at iteration %d, plain step", k)
            fallbacks += 1
            dx_hist.clear()
            dg_hist.clear()
            x = g
            continue
        x_mix = x.copy()
        g_mix = g.copy()
        for gi, dxi, dgi in zip(gamma, dx_hist, dg_hist):
            x_mix -= gi * dxi
            g_mix -= gi * dgi
        x = g_mix if beta == 1.0 else (1.0 - beta) * x_mix + beta * g_mix

    st = np.asarray(steps)
    ratios = st[1:] / np.where(st[:-1] > 0, st[:-1], np.inf)
    contraction = float(ratios.max()) if ratios.size else 0.0
    return FixedPointReport(
        solution=x,
        residuals=np.asarray(residuals),
        steps=st,
        iters=len(residuals),
        converged=converged,
        contraction_est=contraction,
        fallbacks=fallbacks,
    )
