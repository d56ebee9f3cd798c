"""Synthetic ground truth with known structured low rank, Cartesian sampling
masks, noise, and rank/annihilation oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kdeq.fixed_point import SamplingMask
from kdeq.grid import as_grid
from kdeq.hankel import FilterBank, _check_window, hankel_lift, null_space_filters

__all__ = [
    "HarmonicSpec",
    "MaskSpec",
    "MASK_KINDS",
    "gen_harmonics",
    "gen_mask",
    "hankel_rank",
    "add_noise",
    "oracle_filters",
    "random_modes",
    "missing_entry_nmse",
]

MASK_KINDS = ("1d-random", "1d-regular", "2d-random", "2d-regular")


@dataclass(frozen=True)
class HarmonicSpec:
    """Sum of integer grid harmonics per coil.

    ``modes`` are integer frequency pairs ``(k1, k2)`` (a bare int means
    ``(k, 0)``); ``amplitudes`` is ``(len(modes), Nc)`` complex or ``None``
    for seeded complex Gaussian amplitudes.
    """

    dims: tuple
    modes: tuple
    amplitudes: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(v) for v in self.dims)
        if len(dims) == 2:
            dims = (dims[0], 1, dims[1])
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be (N1, N2, Nc) with positive entries, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        modes = tuple((int(m), 0) if np.isscalar(m) else (int(m[0]), int(m[1])) for m in self.modes)
        n1, n2, _ = dims
        wrapped = [(k1 % n1, k2 % n2) for k1, k2 in modes]
        if len(set(wrapped)) != len(wrapped):
            raise ValueError(f"duplicate modes (modulo the grid size): {modes}")
        object.__setattr__(self, "modes", modes)


def gen_harmonics(spec: HarmonicSpec) -> np.ndarray:
    """``x[n, c] = sum_j a[j, c] exp(2 pi i <k_j, n / N>)``."""
    n1, n2, nc = spec.dims
    if spec.amplitudes is None:
        rng = np.random.default_rng(spec.seed)
        shape = (len(spec.modes), nc)
        amps = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    else:
        amps = np.asarray(spec.amplitudes, dtype=np.complex128).reshape(len(spec.modes), nc)
    g1, g2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    x = np.zeros((n1, n2, nc), dtype=np.complex128)
    for (k1, k2), a in zip(spec.modes, amps):
        x += np.exp(2j * np.pi * (k1 * g1 / n1 + k2 * g2 / n2))[:, :, None] * a
    return x


def random_modes(r: int, dims, rng: np.random.Generator) -> tuple:
    """``r`` distinct integer modes on the grid (1-D grids keep ``k2 = 0``)."""
    n1, n2 = dims[:2]
    flat = rng.choice(n1 * n2, size=r, replace=False)
    return tuple((int(i // n2), int(i % n2)) for i in flat)


@dataclass(frozen=True)
class MaskSpec:
    """Cartesian sampling pattern.

    ``acs`` is the number of center lines (1-D kinds) or the side(s) of
    the center block (2-D kinds). ``density`` > 0 weights random draws by
    ``(1 - dist / max_dist) ** density`` toward the center; 0 is uniform.
    """

    kind: str
    accel: float
    acs: int | tuple = 0
    seed: int = 0
    density: float = 0.0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if self.accel < 1.0:
            raise ValueError(f"acceleration must be >= 1, got {self.accel}")
        if self.density < 0:
            raise ValueError("density exponent must be non-negative")


def _center_block(n, a):
    start = n // 2 - a // 2
    return start, start + a


def _spread(items, k):
    """``k`` evenly spaced picks from an ordered list."""
    if k <= 0:
        return []
    if k >= len(items):
        return list(items)
    pos = np.floor(np.arange(k) * (len(items) / k)).astype(int)
    return [items[i] for i in pos]


def _pick(candidates, lattice, budget, random, rng, weights):
    """Choose ``budget`` items among ``candidates``."""
    if random:
        p = None
        if weights is not None:
            p = weights / weights.sum()
        idx = rng.choice(len(candidates), size=budget, replace=False, p=p)
        return [candidates[i] for i in np.sort(idx)]
    # regular: the stride lattice, thinned or topped up evenly to the budget
    on = [c for c in candidates if c in lattice]
    if len(on) >= budget:
        return _spread(on, budget)
    off = [c for c in candidates if c not in lattice]
    return on + _spread(off, budget - len(on))


def gen_mask(spec: MaskSpec, dims) -> SamplingMask:
    """Sampling mask with a centered, fully kept ACS region.

    1-D kinds keep whole rows (``round(N1 / R)`` of them), 2-D kinds keep
    points (``round(N1 * N2 / R)``). The budget left after the ACS is drawn
    uniformly (random kinds) or from a stride-``R`` lattice anchored on the
    center (regular kinds; thinned or topped up evenly when the ACS breaks
    the exact count).
    """
    n1, n2 = int(dims[0]), int(dims[1])
    rng = np.random.default_rng(spec.seed)
    keep = np.zeros((n1, n2), dtype=bool)
    random = spec.kind.endswith("random")
    if spec.kind.startswith("1d"):
        a = int(spec.acs) if np.isscalar(spec.acs) else int(spec.acs[0])
        if a > n1:
            raise ValueError(f"ACS of {a} lines does not fit {n1} rows")
        total = int(round(n1 / spec.accel))
        r0, r1 = _center_block(n1, a)
        if a > total:
            raise ValueError(
                f"ACS of {a} lines exceeds the sampling budget of {total} lines at R={spec.accel}")
        cand = [i for i in range(n1) if not r0 <= i < r1]
        stride = max(1, int(round(spec.accel)))
        lattice = {i for i in cand if (i - n1 // 2) % stride == 0}
        w = None
        if spec.density > 0:
            dist = np.abs(np.asarray(cand) - n1 // 2)
            w = (1.0 - dist / (dist.max() + 1.0)) ** spec.density
        rows = _pick(cand, lattice, total - a, random, rng, w)
        keep[rows, :] = True
        acs = (r0, r1, 0, n2) if a > 0 else None
        keep[r0:r1, :] = True
    else:
        a1, a2 = (int(spec.acs), int(spec.acs)) if np.isscalar(spec.acs) else map(int, spec.acs)
        if a1 > n1 or a2 > n2:
            raise ValueError(f"ACS block {(a1, a2)} does not fit grid {(n1, n2)}")
        total = int(round(n1 * n2 / spec.accel))
        r0, r1 = _center_block(n1, a1)
        c0, c1 = _center_block(n2, a2)
        if a1 * a2 > total:
            raise ValueError(
                f"ACS block of {a1 * a2} points exceeds the sampling budget of {total} at R={spec.accel}")
        inside = np.zeros((n1, n2), dtype=bool)
        inside[r0:r1, c0:c1] = True
        cand = [(i, j) for i in range(n1) for j in range(n2) if not inside[i, j]]
        s = max(1, int(round(spec.accel)))
        s1 = max(d for d in range(1, int(np.sqrt(s)) + 1) if s % d == 0)
        s2 = s // s1
        lattice = {(i, j) for (i, j) in cand
                   if (i - n1 // 2) % s1 == 0 and (j - n2 // 2) % s2 == 0}
        w = None
        if spec.density > 0:
            c = np.asarray(cand, dtype=float)
            dist = np.hypot(c[:, 0] - n1 // 2, c[:, 1] - n2 // 2)
            w = (1.0 - dist / (dist.max() + 1.0)) ** spec.density
        pts = _pick(cand, lattice, total - a1 * a2, random, rng, w)
        if pts:
            idx = np.asarray(pts)
            keep[idx[:, 0], idx[:, 1]] = True
        keep[r0:r1, c0:c1] = True
        acs = (r0, r1, c0, c1) if a1 * a2 > 0 else None
    return SamplingMask(keep, acs=acs, accel=float(spec.accel))


def hankel_rank(x: np.ndarray, d, tol: float = 1e-10) -> int:
    """Numerical rank of the wrap-around lift: singular values above
    ``tol * sigma_max``."""
    sv = np.linalg.svd(hankel_lift(x, d), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def add_noise(x: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    """Add circularly symmetric complex Gaussian noise with ``E|n|^2 = sigma^2``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = as_grid(x)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return x + (sigma / np.sqrt(2.0)) * n


def oracle_filters(modes, dims, d, n_coils: int | None = None) -> FilterBank:
    """Every filter annihilating all signals built from ``modes``, whatever
    their per-coil amplitudes.

    A harmonic ``k`` on coil ``c`` is annihilated iff
    ``sum_j exp(2 pi i <k, j / N>) sbar_c[j] = 0``; stacking that row for
    each (mode, coil) pair and taking the null space gives
    ``Nc * (d1 * d2 - r)`` filters.
    """
    n1, n2 = int(dims[0]), int(dims[1])
    nc = int(dims[2]) if n_coils is None else int(n_coils)
    d1, d2 = _check_window((n1, n2), d)
    rows = []
    for k in modes:
        k1, k2 = (int(k), 0) if np.isscalar(k) else (int(k[0]), int(k[1]))
        basis = np.exp(2j * np.pi * (k1 * np.arange(n1)[:, None] / n1
                                     + k2 * np.arange(n2)[None, :] / n2))
        for c in range(nc):
            x = np.zeros((n1, n2, nc), dtype=np.complex128)
            x[:, :, c] = basis
            rows.append(hankel_lift(x, (d1, d2))[0])
    lifted = np.asarray(rows)
    n_null = d1 * d2 * nc - np.linalg.matrix_rank(lifted)
    if n_null < 1:
        raise ValueError(f"window {(d1, d2)} is too small to annihilate {len(modes)} modes")
    bank, _ = null_space_filters(lifted, (d1, d2), nc, n_null)
    return bank


def missing_entry_nmse(rec: np.ndarray, ref: np.ndarray, mask: SamplingMask) -> float:
    """``||(rec - ref) off Omega||^2 / ||ref off Omega||^2``."""
    off = ~mask.keep[:, :, None]
    den = float(np.sum(np.abs(ref * off) ** 2))
    if den == 0.0:
        raise ValueError("reference has no energy on the unsampled set")
    return float(np.sum(np.abs((rec - ref) * off) ** 2)) / den
