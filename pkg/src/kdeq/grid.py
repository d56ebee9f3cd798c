"""Multi-coil k-space/image grids, centered unitary FFTs, coil combination
and image quality metrics.

Grids are plain ``numpy`` arrays of shape ``(N1, N2, Nc)`` and dtype
``complex128``. C order makes the storage row-major with the coil index
fastest, which is also the on-disk payload order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "GridError",
    "MetricsTriple",
    "PSNR_PERFECT",
    "as_grid",
    "fft_centered",
    "ifft_centered",
    "coil_combine_rss",
    "metrics",
    "ssim",
]

#: Sentinel PSNR for a reconstruction identical to its reference.
PSNR_PERFECT = float("inf")


class GridError(ValueError):
    """Raised for malformed grids (wrong rank, empty dims, non-finite data)."""


def as_grid(x, copy: bool = False) -> np.ndarray:
    """Validate ``x`` and return it as a C-contiguous complex128 grid.

    2-D input is promoted to a single-coil grid.
    """
    a = np.array(x, dtype=np.complex128, order="C") if copy else np.ascontiguousarray(x, dtype=np.complex128)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise GridError(f"grid must have 3 dims (N1, N2, Nc), got shape {a.shape}")
    if min(a.shape) < 1:
        raise GridError(f"grid dims must be positive, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GridError("grid contains NaN or Inf")
    return a


def fft_centered(x: np.ndarray, direction: str = "forward") -> np.ndarray:
    """Orthonormal 2-D DFT per coil with the DC sample at the grid center.

    ``direction="forward"`` maps image to k-space, ``"inverse"`` maps back.
    Center convention follows ``numpy.fft.fftshift`` (index ``N // 2``).
    """
    x = as_grid(x)
    axes = (0, 1)
    if direction == "forward":
        out = np.fft.fft2(np.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho")
    elif direction == "inverse":
        out = np.fft.ifft2(np.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho")
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return np.fft.fftshift(out, axes=axes)


def ifft_centered(x: np.ndarray) -> np.ndarray:
    return fft_centered(x, "inverse")


def coil_combine_rss(img: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares over the coil axis; returns a real ``(N1, N2)`` grid."""
    img = as_grid(img)
    return np.sqrt(np.sum(img.real**2 + img.imag**2, axis=2))


@dataclass(frozen=True)
class MetricsTriple:
    nmse: float
    psnr: float
    ssim: float


def _check_pair(ref, rec):
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError(f"dimension mismatch: ref {ref.shape} vs rec {rec.shape}")
    if ref.ndim != 2:
        raise ValueError(f"metrics expect real 2-D grids, got ndim={ref.ndim}")
    return ref, rec


def ssim(ref: np.ndarray, rec: np.ndarray, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window.

    The dynamic range is ``max(ref)``. Local statistics use population
    (biased) moments. When both axes are at least 11 samples the mean is
    taken over the interior that the full window covers, otherwise over
    every pixel.
    """
    ref, rec = _check_pair(ref, rec)
    data_range = float(ref.max())
    if data_range <= 0:
        data_range = float(np.abs(ref).max()) or 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    # truncate=3.5 with sigma=1.5 gives a radius-5 (11-tap) kernel
    filt = lambda a: gaussian_filter(a, sigma=sigma, truncate=3.5, mode="reflect")
    mu_x = filt(ref)
    mu_y = filt(rec)
    sxx = filt(ref * ref) - mu_x * mu_x
    syy = filt(rec * rec) - mu_y * mu_y
    sxy = filt(ref * rec) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    smap = num / den
    pad = 5
    if min(ref.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def metrics(ref: np.ndarray, rec: np.ndarray) -> MetricsTriple:
    """NMSE, PSNR (dB, peak = ``max(ref)``) and SSIM of ``rec`` against ``ref``.

    A perfect reconstruction reports ``PSNR_PERFECT`` (+inf).
    """
    ref, rec = _check_pair(ref, rec)
    ref_energy = float(np.sum(ref**2))
    if ref_energy == 0.0:
        raise ValueError("reference grid has zero norm")
    err = rec - ref
    sq = float(np.sum(err**2))
    nmse = sq / ref_energy
    mse = sq / ref.size
    peak = float(ref.max())
    if mse == 0.0:
        psnr = PSNR_PERFECT
    else:
        psnr = 10.0 * np.log10(peak**2 / mse)
    return MetricsTriple(nmse=nmse, psnr=float(psnr), ssim=ssim(ref, rec))
