"""Circular ("same", wrap-around) multi-channel 2-D convolution layers with
hand-written backward passes.

Activations are channels-last real arrays ``(N1, N2, C)``. A layer holds a
weight of shape ``(k1, k2, Cin, Cout)`` with its center tap at offset 0 and
an optional bias ``(Cout,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvLayer",
    "im2col",
    "col2im",
    "conv_forward",
    "conv_backward",
    "conv_transpose",
    "conv_spectral_norm",
]


@dataclass(frozen=True)
class ConvLayer:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 4:
            raise ValueError(f"weight must be (k1, k2, Cin, Cout), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("conv weight contains NaN or Inf")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64)
            if b.shape != (w.shape[3],):
                raise ValueError(f"bias shape {b.shape} does not match Cout={w.shape[3]}")
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[0], self.weight.shape[1]

    @property
    def c_in(self) -> int:
        return self.weight.shape[2]

    @property
    def c_out(self) -> int:
        return self.weight.shape[3]

    @property
    def size(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)


def _offsets(k):
    return [j - k // 2 for j in range(k)]


def im2col(h: np.ndarray, kernel) -> np.ndarray:
    """Circular patches: ``cols[n1, n2, j1, j2, c] = h[n1 + o1, n2 + o2, c]``
    with ``o = j - k // 2`` taken modulo the grid size."""
    k1, k2 = kernel
    n1, n2, c = h.shape
    cols = np.empty((n1, n2, k1, k2, c), dtype=h.dtype)
    for j1, o1 in enumerate(_offsets(k1)):
        for j2, o2 in enumerate(_offsets(k2)):
            cols[:, :, j1, j2, :] = np.roll(h, shift=(-o1, -o2), axis=(0, 1))
    return cols


def col2im(cols: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`im2col` (scatter-add with wrap-around)."""
    n1, n2, k1, k2, c = cols.shape
    out = np.zeros((n1, n2, c), dtype=cols.dtype)
    for j1, o1 in enumerate(_offsets(k1)):
        for j2, o2 in enumerate(_offsets(k2)):
            out += np.roll(cols[:, :, j1, j2, :], shift=(o1, o2), axis=(0, 1))
    return out


def conv_forward(h: np.ndarray, layer: ConvLayer, scale: float = 1.0) -> np.ndarray:
    """``scale * conv(h, W) + b``."""
    n1, n2, _ = h.shape
    cols = im2col(h, layer.kernel).reshape(n1 * n2, -1)
    out = cols @ layer.weight.reshape(-1, layer.c_out)
    if scale != 1.0:
        out *= scale
    if layer.bias is not None:
        out += layer.bias
    return out.reshape(n1, n2, layer.c_out)


def conv_backward(h: np.ndarray, dout: np.ndarray, layer: ConvLayer, need_input: bool = True):
    """Gradients of ``<dout, conv(h, W) + b>``.

    Returns ``(dh, dW, db)``; ``dh`` is ``None`` when ``need_input`` is false
    and ``db`` is ``None`` for bias-free layers.
    """
    n1, n2, _ = h.shape
    d2 = dout.reshape(n1 * n2, layer.c_out)
    cols = im2col(h, layer.kernel).reshape(n1 * n2, -1)
    dw = (cols.T @ d2).reshape(layer.weight.shape)
    db = d2.sum(axis=0) if layer.bias is not None else None
    dh = conv_transpose(dout, layer) if need_input else None
    return dh, dw, db


def conv_transpose(dout: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Input gradient only: the adjoint of the (bias-free) convolution."""
    n1, n2, _ = dout.shape
    k1, k2 = layer.kernel
    dcols = dout.reshape(n1 * n2, layer.c_out) @ layer.weight.reshape(-1, layer.c_out).T
    return col2im(dcols.reshape(n1, n2, k1, k2, layer.c_in))


def conv_spectral_norm(layer: ConvLayer, shape) -> float:
    """Exact operator 2-norm of the circular convolution on an ``(N1, N2)`` grid
    (the bias does not affect the Lipschitz constant).

    Circular convolution is block diagonal in frequency; the norm is the
    largest singular value over the ``Cout x Cin`` blocks.
    """
    n1, n2 = shape[:2]
    k1, k2 = layer.kernel
    emb = np.zeros((n1, n2, layer.c_in, layer.c_out))
    for j1, o1 in enumerate(_offsets(k1)):
        for j2, o2 in enumerate(_offsets(k2)):
            emb[(-o1) % n1, (-o2) % n2] += layer.weight[j1, j2]
    blocks = np.fft.fft2(emb, axes=(0, 1))
    return float(np.max(np.linalg.svd(blocks, compute_uv=False)))
