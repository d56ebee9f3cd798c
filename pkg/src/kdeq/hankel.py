"""Wrap-around Hankel lifting and the null-space filter-bank operator.

A filter bank holds ``r`` kernels ``s_k`` of shape ``(d1, d2, Nc)`` in
natural order. The operator ``Conv`` applies the time-reversed kernels
``sbar_k[j] = s_k[d - 1 - j]`` so that, row for row,

    Conv(x)[:, :, k].ravel() == hankel_lift(x, d) @ sbar_k

with rows of the lifted matrix indexed by the window origin ``(n1, n2)``.
Everything is circular, which makes the identity exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft

from kdeq.grid import as_grid

log = logging.getLogger(__name__)

__all__ = [
    "FilterBank",
    "SpecNormConfig",
    "CalibrationResult",
    "PowerIterationError",
    "hankel_lift",
    "hankel_lift_adjoint",
    "filter_spectrum",
    "apply_filterbank",
    "calibrate_filters",
    "null_space_filters",
    "composite_lambda_max",
    "power_iteration",
    "spectral_normalize",
]


class PowerIterationError(RuntimeError):
    """Power iteration failed to settle within its iteration cap."""


@dataclass(frozen=True)
class FilterBank:
    """``r`` complex kernels stored as an array of shape ``(r, d1, d2, Nc)``."""

    filters: np.ndarray

    def __post_init__(self):
        f = np.array(self.filters, dtype=np.complex128, order="C")
        if f.ndim == 3:  # 1-D kernels (r, d, Nc)
            f = f[:, :, None, :]
        if f.ndim != 4 or min(f.shape) < 1:
            raise ValueError(f"filters must have shape (r, d1, d2, Nc), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("filter bank contains NaN or Inf")
        f.setflags(write=False)
        object.__setattr__(self, "filters", f)

    @property
    def r(self) -> int:
        return self.filters.shape[0]

    @property
    def window(self) -> tuple[int, int]:
        return self.filters.shape[1], self.filters.shape[2]

    @property
    def n_coils(self) -> int:
        return self.filters.shape[3]

    @property
    def null_dim_ok(self) -> bool:
        """False when ``r`` reaches the column count of the lifted matrix,
        i.e. the bank cannot be a proper null-space basis."""
        d1, d2 = self.window
        return self.r < d1 * d2 * self.n_coils

    def columns(self) -> np.ndarray:
        """Time-reversed kernels as the ``(d1*d2*Nc, r)`` matrix acting on the
        lifted Hankel matrix (coil blocks stacked along the column axis)."""
        sbar = self.filters[:, ::-1, ::-1, :]
        return np.ascontiguousarray(sbar.transpose(0, 3, 1, 2).reshape(self.r, -1).T)

    @classmethod
    def from_columns(cls, cols: np.ndarray, window, n_coils: int) -> "FilterBank":
        d1, d2 = window
        cols = np.asarray(cols)
        r = cols.shape[1]
        sbar = cols.T.reshape(r, n_coils, d1, d2).transpose(0, 2, 3, 1)
        return cls(sbar[:, ::-1, ::-1, :])

    def scaled(self, factor: float) -> "FilterBank":
        return FilterBank(self.filters * factor)


@dataclass(frozen=True)
class SpecNormConfig:
    """Margin and power-iteration settings for spectral normalization.

    ``method="fourier"`` evaluates the largest eigenvalue exactly from the
    per-frequency blocks of the circular operator; ``"power"`` runs power
    iteration on the composite operator.
    """

    epsilon: float = 0.1
    power_iters: int = 100
    tol: float = 1e-6
    method: str = "fourier"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.method not in ("fourier", "power"):
            raise ValueError(f"unknown method {self.method!r}")


def _check_window(shape, d):
    d1, d2 = (d, 1) if np.isscalar(d) else tuple(int(v) for v in d)
    n1, n2 = shape[:2]
    if not (1 <= d1 <= n1 and 1 <= d2 <= n2):
        raise ValueError(f"window {(d1, d2)} does not fit grid {(n1, n2)}")
    return d1, d2


def _lift_index(n1, n2, d1, d2, wrap=True):
    if wrap:
        o1, o2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    else:
        o1, o2 = np.meshgrid(np.arange(n1 - d1 + 1), np.arange(n2 - d2 + 1), indexing="ij")
    j1, j2 = np.meshgrid(np.arange(d1), np.arange(d2), indexing="ij")
    i1 = o1.reshape(-1, 1) + j1.reshape(1, -1)
    i2 = o2.reshape(-1, 1) + j2.reshape(1, -1)
    if wrap:
        i1 %= n1
        i2 %= n2
    return i1, i2


def hankel_lift(x: np.ndarray, d, wrap: bool = True) -> np.ndarray:
    """Lift a grid to its (wrap-around) multi-coil Hankel matrix.

    Row ``n1 * N2 + n2`` holds the window starting at ``(n1, n2)``; column
    ``c * d1 * d2 + j1 * d2 + j2`` holds coil ``c`` at window offset
    ``(j1, j2)``. With ``wrap=False`` only windows that fit inside the grid
    are kept (used for calibration on an ACS block).
    """
    x = as_grid(x)
    n1, n2, nc = x.shape
    d1, d2 = _check_window(x.shape, d)
    i1, i2 = _lift_index(n1, n2, d1, d2, wrap)
    blocks = x[i1, i2, :]  # (rows, d1*d2, Nc)
    return np.ascontiguousarray(blocks.transpose(0, 2, 1).reshape(blocks.shape[0], -1))


def hankel_lift_adjoint(m: np.ndarray, shape, d) -> np.ndarray:
    """Adjoint of :func:`hankel_lift` (wrap-around): scatter-add back to a grid."""
    n1, n2, nc = shape
    d1, d2 = _check_window(shape, d)
    m = np.asarray(m, dtype=np.complex128)
    if m.shape != (n1 * n2, d1 * d2 * nc):
        raise ValueError(f"matrix shape {m.shape} does not match grid {shape} and window {(d1, d2)}")
    i1, i2 = _lift_index(n1, n2, d1, d2)
    blocks = m.reshape(n1 * n2, nc, d1 * d2).transpose(0, 2, 1)
    out = np.zeros((n1, n2, nc), dtype=np.complex128)
    for c in range(nc):
        np.add.at(out[:, :, c], (i1, i2), blocks[:, :, c])
    return out


def filter_spectrum(s: FilterBank, shape) -> np.ndarray:
    """Per-frequency transfer matrices of ``Conv`` on an ``(N1, N2)`` grid.

    Returns ``W`` with shape ``(N1, N2, r, Nc)`` such that
    ``fft2(Conv(x))[..., k] = sum_c W[..., k, c] * fft2(x)[..., c]``.
    """
    n1, n2 = shape[:2]
    d1, d2 = _check_window((n1, n2), s.window)
    vpad = np.zeros((n1, n2, s.r, s.n_coils), dtype=np.complex128)
    vpad[:d1, :d2] = s.filters[:, ::-1, ::-1, :].transpose(1, 2, 0, 3)
    # sum_j v[j] exp(+2 pi i j f / N)
    return np.conj(np.fft.fft2(np.conj(vpad), axes=(0, 1)))


def _fft2_inplace(a):
    return sp_fft.fft2(a, axes=(0, 1), overwrite_x=True)


def _ifft2_inplace(a):
    return sp_fft.ifft2(a, axes=(0, 1), overwrite_x=True)


def apply_filterbank(x: np.ndarray, s: FilterBank, mode: str = "forward",
                     spectrum: np.ndarray | None = None) -> np.ndarray:
    """Apply ``Conv`` (``mode="forward"``, grid -> r channels) or its exact
    adjoint (``mode="adjoint"``, r channels -> grid).

    ``spectrum`` may carry a cached :func:`filter_spectrum` for the grid size.
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 3:
        raise ValueError(f"expected a 3-D grid, got shape {x.shape}")
    w = filter_spectrum(s, x.shape) if spectrum is None else spectrum
    if mode == "forward":
        if x.shape[2] != s.n_coils:
            raise ValueError(f"grid has {x.shape[2]} coils, filter bank expects {s.n_coils}")
        xf = _fft2_inplace(x.copy())
        out = np.einsum("abrc,abc->abr", w, xf)
        del xf
        return _ifft2_inplace(out)
    if mode == "adjoint":
        if x.shape[2] != s.r:
            raise ValueError(f"input has {x.shape[2]} channels, filter bank has r={s.r}")
        uf = _fft2_inplace(x.copy())
        np.conjugate(uf, out=uf)
        # conj(W^T conj(U)) == W^H U without materializing conj(W)
        out = np.einsum("abrc,abr->abc", w, uf)
        del uf
        np.conjugate(out, out=out)
        return _ifft2_inplace(out)
    raise ValueError(f"mode must be 'forward' or 'adjoint', got {mode!r}")


@dataclass(frozen=True)
class CalibrationResult:
    """Filters from ACS calibration plus diagnostics.

    ``filter_residuals[k]`` is ``||H_acs sbar_k|| / ||acs||_F``;
    ``flagged`` lists filters whose residual exceeds the flag tolerance.
    ``suggested_r`` counts singular values below ``gap_tol * sigma_max``.
    """

    bank: FilterBank
    singular_values: np.ndarray
    filter_residuals: np.ndarray
    residual: float
    flagged: tuple = field(default_factory=tuple)
    suggested_r: int = 0


def null_space_filters(lifted: np.ndarray, window, n_coils: int, r: int):
    """Right singular vectors of ``lifted`` for the ``r`` smallest singular
    values, returned as a FilterBank plus the full singular spectrum."""
    ncols = lifted.shape[1]
    if r < 1 or r >= ncols:
        raise ValueError(f"r must satisfy 1 <= r < {ncols} (columns of the lifted matrix), got {r}")
    _, sv, vh = np.linalg.svd(lifted, full_matrices=True)
    if sv.size < ncols:
        sv = np.concatenate([sv, np.zeros(ncols - sv.size)])
    cols = np.conj(vh[-r:][::-1]).T  # smallest singular value first
    return FilterBank.from_columns(cols, window, n_coils), sv


def calibrate_filters(acs: np.ndarray, d, r: int, flag_tol: float = 1e-6,
                      gap_tol: float = 1e-8) -> CalibrationResult:
    """Estimate ``r`` annihilating filters from a fully sampled ACS block.

    Only windows lying inside the block are lifted: an ACS block is not
    periodic, so wrap-around windows would corrupt the null space.
    """
    acs = as_grid(acs)
    n1, n2, nc = acs.shape
    d1, d2 = (d, 1) if np.isscalar(d) else tuple(int(v) for v in d)
    if d1 > n1 or d2 > n2:
        raise ValueError(f"ACS too small: block {(n1, n2)} cannot hold window {(d1, d2)}")
    lifted = hankel_lift(acs, (d1, d2), wrap=False)
    ncols = d1 * d2 * nc
    if lifted.shape[0] < ncols:
        raise ValueError(
            f"ACS too small: {lifted.shape[0]} windows for {ncols} unknowns per filter")
    bank, sv = null_space_filters(lifted, (d1, d2), nc, r)
    norm = float(np.linalg.norm(acs))
    scale = norm if norm > 0 else 1.0
    per = np.linalg.norm(lifted @ bank.columns(), axis=0) / scale
    flagged = tuple(int(k) for k in np.flatnonzero(per > flag_tol))
    if flagged:
        log.warning("calibration: filters %s have residual above %.1e", flagged, flag_tol)
    smax = sv[0] if sv[0] > 0 else 1.0
    return CalibrationResult(
        bank=bank,
        singular_values=sv,
        filter_residuals=per,
        residual=float(np.sqrt(np.sum(per**2))),
        flagged=flagged,
        suggested_r=int(np.sum(sv <= gap_tol * smax)),
    )


def composite_lambda_max(s: FilterBank, shape) -> float:
    """Exact largest eigenvalue of ``Conv^H Conv`` on an ``(N1, N2)`` grid.

    The circular operator is block diagonal in frequency, one ``Nc x Nc``
    Gram block per frequency.
    """
    w = filter_spectrum(s, shape)
    gram = np.einsum("abrc,abre->abce", np.conj(w), w)
    return float(np.max(np.linalg.eigvalsh(gram)[..., -1]))


def power_iteration(op, shape, iters: int = 100, tol: float = 1e-6, seed: int = 0):
    """Largest eigenvalue of a self-adjoint PSD operator on complex grids.

    Returns ``(estimate, converged, n_iter)``. The start vector is a
    seeded complex Gaussian grid.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for k in range(1, iters + 1):
        w = op(v)
        new = float(np.real(np.vdot(v, w)))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True, k
        v = w / nw
        if abs(new - lam) <= tol * abs(new):
            return new, True, k
        lam = new
    return lam, False, iters


def spectral_normalize(s: FilterBank, cfg: SpecNormConfig, shape) -> FilterBank:
    """Rescale ``s`` so that ``lambda_max(Conv^H Conv) <= 1 - epsilon`` on an
    ``(N1, N2)`` reference grid; banks already within budget are returned
    unchanged."""
    n1, n2 = shape[:2]
    if cfg.method == "fourier":
        lam = composite_lambda_max(s, (n1, n2))
    else:
        spec = filter_spectrum(s, (n1, n2))
        op = lambda v: apply_filterbank(apply_filterbank(v, s, "forward", spec), s, "adjoint", spec)
        lam, ok, _ = power_iteration(op, (n1, n2, s.n_coils), cfg.power_iters, cfg.tol, cfg.seed)
        if not ok:
            raise PowerIterationError(
                f"power iteration did not settle within {cfg.power_iters} iterations")
    budget = 1.0 - cfg.epsilon
    if lam <= budget:
        return s
    return s.scaled(np.sqrt(budget / lam))
