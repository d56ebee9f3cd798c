"""Residual maps ``G`` for the three network variants and their exact
vector-Jacobian products.

``sspgd``
    ``G(x) = x - eta * Conv^H act(Conv(x))`` with the null-space filter
    bank; ``act`` is ReLU applied separately to real and imaginary parts,
    or the identity for the plain SLR gradient step.
``ksspgd``
    ``G(x) = x - eta * N_K(x)`` with ``N_K(x) = x - T_K(x)`` and ``T_K`` a
    five-layer circular CNN on the ``2 * Nc`` real channels.
``hsspgd``
    ``G(x) = x - eta1 * N_K(x) - eta2 * N_I(x)``, where ``N_I`` runs a second
    CNN in the image domain between an inverse and a forward FFT.

The identity skip inside ``N_K``/``N_I`` is what makes a per-layer
Lipschitz budget ``prod(l_i) <= 1 - eps`` sufficient: ``Lip(G) <= |1 - eta|
+ eta * (1 - eps)`` (``eta = eta1 + eta2`` for the hybrid).

Parameter gradients are flat real vectors laid out like
:meth:`NetworkParams.vector`; complex filter coefficients contribute their
real parts first, then their imaginary parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from kdeq.conv import ConvLayer, conv_backward, conv_forward, conv_spectral_norm, conv_transpose
from kdeq.grid import fft_centered
from kdeq.hankel import (
    FilterBank,
    SpecNormConfig,
    apply_filterbank,
    filter_spectrum,
    spectral_normalize,
)

__all__ = [
    "VARIANTS",
    "NetworkParams",
    "Cotangent",
    "init_sspgd",
    "init_cnn",
    "init_generalized",
    "residual",
    "residual_sspgd",
    "residual_generalized",
    "residual_vjp",
    "input_vjp",
    "activation_pattern",
    "lipschitz_normalize",
    "lipschitz_bound",
]

VARIANTS = ("sspgd", "ksspgd", "hsspgd")


@dataclass(frozen=True)
class NetworkParams:
    """Variant-tagged parameters.

    ``eta`` is the step of ``sspgd``/``ksspgd``; ``eta1``/``eta2`` weight the
    k-space and image-domain branches of ``hsspgd``. Steps are fixed
    hyperparameters and are not part of :meth:`vector`.
    """

    variant: str
    bank: FilterBank | None = None
    k_layers: tuple = ()
    i_layers: tuple = ()
    eta: float = 1.0
    eta1: float = 0.5
    eta2: float = 0.5
    activation: str = "relu"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.variant == "sspgd" and self.bank is None:
            raise ValueError("sspgd needs a filter bank")
        if self.variant in ("ksspgd", "hsspgd") and not self.k_layers:
            raise ValueError(f"{self.variant} needs k-space conv layers")
        if self.variant == "hsspgd" and not self.i_layers:
            raise ValueError("hsspgd needs image-domain conv layers")
        object.__setattr__(self, "k_layers", tuple(self.k_layers))
        object.__setattr__(self, "i_layers", tuple(self.i_layers))

    # -- flat parameter vector ------------------------------------------------
    def _layers(self):
        if self.variant == "ksspgd":
            return self.k_layers
        if self.variant == "hsspgd":
            return self.k_layers + self.i_layers
        return ()

    @property
    def size(self) -> int:
        if self.variant == "sspgd":
            return 2 * self.bank.filters.size
        return sum(layer.size for layer in self._layers())

    def vector(self) -> np.ndarray:
        if self.variant == "sspgd":
            f = self.bank.filters
            return np.concatenate([f.real.ravel(), f.imag.ravel()])
        parts = []
        for layer in self._layers():
            parts.append(layer.weight.ravel())
            if layer.bias is not None:
                parts.append(layer.bias.ravel())
        return np.concatenate(parts)

    def with_vector(self, v: np.ndarray) -> "NetworkParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {v.shape}, expected ({self.size},)")
        if self.variant == "sspgd":
            f = self.bank.filters
            n = f.size
            bank = FilterBank((v[:n] + 1j * v[n:]).reshape(f.shape))
            return replace(self, bank=bank, _cache={})
        new, pos = [], 0
        for layer in self._layers():
            w = v[pos:pos + layer.weight.size].reshape(layer.weight.shape)
            pos += layer.weight.size
            b = None
            if layer.bias is not None:
                b = v[pos:pos + layer.bias.size]
                pos += layer.bias.size
            new.append(ConvLayer(w, b))
        nk = len(self.k_layers)
        return replace(self, k_layers=tuple(new[:nk]), i_layers=tuple(new[nk:]), _cache={})

    def spectrum(self, shape) -> np.ndarray:
        key = ("spectrum", tuple(shape[:2]))
        if key not in self._cache:
            self._cache[key] = filter_spectrum(self.bank, shape)
        return self._cache[key]


@dataclass(frozen=True)
class Cotangent:
    wrt_input: np.ndarray
    wrt_params: np.ndarray


# -- initialisation -------------------------------------------------------------

def init_sspgd(bank_or_shape, n_coils: int | None = None, r: int | None = None,
               seed: int = 0, eta: float = 1.0, activation: str = "relu") -> NetworkParams:
    """SSPGD parameters from a given FilterBank or from a seeded complex
    Gaussian bank of ``r`` kernels with window ``bank_or_shape``."""
    if isinstance(bank_or_shape, FilterBank):
        bank = bank_or_shape
    else:
        d1, d2 = bank_or_shape
        rng = np.random.default_rng(seed)
        shape = (r, d1, d2, n_coils)
        scale = 1.0 / np.sqrt(2 * d1 * d2 * n_coils)
        bank = FilterBank(scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)))
    return NetworkParams("sspgd", bank=bank, eta=eta, activation=activation)


def init_cnn(n_coils: int, hidden: int = 64, depth: int = 5, kernel: int = 3,
             rng: np.random.Generator | None = None) -> tuple:
    """Five-layer (by default) CNN on ``2 * n_coils`` real channels; ReLU
    between layers, biases on hidden layers only, He-normal weights."""
    rng = np.random.default_rng() if rng is None else rng
    chans = [2 * n_coils] + [hidden] * (depth - 1) + [2 * n_coils]
    layers = []
    for i in range(depth):
        cin, cout = chans[i], chans[i + 1]
        std = np.sqrt(2.0 / (kernel * kernel * cin))
        w = std * rng.standard_normal((kernel, kernel, cin, cout))
        b = np.zeros(cout) if i < depth - 1 else None
        layers.append(ConvLayer(w, b))
    return tuple(layers)


def init_generalized(variant: str, n_coils: int, hidden: int = 64, depth: int = 5,
                     seed: int = 0, eta: float = 1.0, eta1: float = 0.5,
                     eta2: float = 0.5) -> NetworkParams:
    rng = np.random.default_rng(seed)
    k_layers = init_cnn(n_coils, hidden, depth, rng=rng)
    i_layers = init_cnn(n_coils, hidden, depth, rng=rng) if variant == "hsspgd" else ()
    return NetworkParams(variant, k_layers=k_layers, i_layers=i_layers,
                         eta=eta, eta1=eta1, eta2=eta2)


# -- real/complex views ---------------------------------------------------------

def _to_real(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x.real, x.imag], axis=2)


def _to_complex(h: np.ndarray) -> np.ndarray:
    nc = h.shape[2] // 2
    return h[:, :, :nc] + 1j * h[:, :, nc:]


def _relu_c(z):
    return np.maximum(z.real, 0.0) + 1j * np.maximum(z.imag, 0.0)


# -- CNN forward/backward ---------------------------------------------------------

def _cnn_forward(h, layers, keep=True):
    acts = [h]
    for i, layer in enumerate(layers):
        h = conv_forward(h, layer)
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        if keep:
            acts.append(h)
    return h, acts


def _cnn_backward(acts, layers, seed, need_params=True):
    """Backward pass; ``acts[i]`` is the input of layer ``i`` (post-ReLU)."""
    grads = [None] * len(layers)
    g = seed
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1:
            g = np.where(acts[i + 1] > 0, g, 0.0)
        dh, dw, db = conv_backward(acts[i], g, layers[i], need_input=True)
        if need_params:
            grads[i] = (dw, db)
        g = dh
    return g, grads


def _flatten_layer_grads(grads):
    parts = []
    for dw, db in grads:
        parts.append(dw.ravel())
        if db is not None:
            parts.append(db.ravel())
    return parts


def _cnn_pattern(h, layers):
    _, acts = _cnn_forward(h, layers)
    return np.concatenate([(a > 0).ravel() for a in acts[1:-1]])


# -- residual maps --------------------------------------------------------------

def residual_sspgd(x: np.ndarray, p: NetworkParams) -> np.ndarray:
    """``x - eta * Conv^H act(Conv x)``."""
    if p.variant != "sspgd":
        raise ValueError(f"residual_sspgd called with variant {p.variant!r}")
    if x.shape[2] != p.bank.n_coils:
        raise ValueError(f"grid has {x.shape[2]} coils, filter bank expects {p.bank.n_coils}")
    if p.eta == 0.0:
        return np.array(x, dtype=np.complex128)
    w = p.spectrum(x.shape)
    z = apply_filterbank(x, p.bank, "forward", w)
    if p.activation == "relu":
        z = _relu_c(z)
    return x - p.eta * apply_filterbank(z, p.bank, "adjoint", w)


def _image_branch(x, layers):
    u = _to_real(fft_centered(x, "inverse"))
    out, _ = _cnn_forward(u, layers, keep=False)
    return fft_centered(_to_complex(out), "forward")


def residual_generalized(x: np.ndarray, p: NetworkParams) -> np.ndarray:
    """``x - eta N_K(x)`` (ksspgd) or ``x - eta1 N_K(x) - eta2 N_I(x)`` (hsspgd).

    ``N = I - T`` with ``T`` the Lipschitz-normalized CNN, so ksspgd is
    ``(1 - eta) x + eta T_K(x)`` and stays a contraction for ``0 < eta <= 1``.
    """
    if p.variant == "ksspgd":
        tk, _ = _cnn_forward(_to_real(x), p.k_layers, keep=False)
        return (1.0 - p.eta) * x + p.eta * _to_complex(tk)
    if p.variant == "hsspgd":
        out = (1.0 - p.eta1 - p.eta2) * x
        if p.eta1 != 0.0:
            tk, _ = _cnn_forward(_to_real(x), p.k_layers, keep=False)
            out = out + p.eta1 * _to_complex(tk)
        if p.eta2 != 0.0:
            out = out + p.eta2 * _image_branch(x, p.i_layers)
        return out
    raise ValueError(f"residual_generalized called with variant {p.variant!r}")


def residual(x: np.ndarray, p: NetworkParams) -> np.ndarray:
    if p.variant == "sspgd":
        return residual_sspgd(x, p)
    return residual_generalized(x, p)


def activation_pattern(x: np.ndarray, p: NetworkParams) -> np.ndarray:
    """Boolean on/off state of every ReLU evaluated at ``x`` (empty for the
    linear SSPGD)."""
    if p.variant == "sspgd":
        if p.activation != "relu":
            return np.zeros(0, dtype=bool)
        z = apply_filterbank(x, p.bank, "forward", p.spectrum(x.shape))
        return np.concatenate([(z.real > 0).ravel(), (z.imag > 0).ravel()])
    parts = []
    if p.variant == "ksspgd" or p.eta1 != 0.0:
        parts.append(_cnn_pattern(_to_real(x), p.k_layers))
    if p.variant == "hsspgd" and p.eta2 != 0.0:
        parts.append(_cnn_pattern(_to_real(fft_centered(x, "inverse")), p.i_layers))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


# -- vector-Jacobian products ---------------------------------------------------

def _hankel_corr(a, b, window):
    """``out[k, j1, j2, c] = sum_n a_k[n] conj(b_c[n + j])`` for the window lags."""
    n1, n2, r = a.shape
    nc = b.shape[2]
    d1, d2 = window
    am = a.reshape(n1 * n2, r).T
    out = np.empty((r, d1, d2, nc), dtype=np.complex128)
    for j1 in range(d1):
        for j2 in range(d2):
            bs = np.roll(b, shift=(-j1, -j2), axis=(0, 1)).reshape(n1 * n2, nc)
            out[:, j1, j2, :] = am @ bs.conj()
    return out


def _zero_off(z, pattern):
    """In-place ReLU mask of an owned complex array."""
    re_on, im_on = pattern
    np.multiply(z.real, re_on, out=z.real)
    np.multiply(z.imag, im_on, out=z.imag)
    return z


def input_vjp(x: np.ndarray, p: NetworkParams):
    """Return ``u -> J_G(x)^T u`` with the activation pattern frozen at ``x``.

    Equivalent to ``residual_vjp(x, p, u, want_params=False).wrt_input`` but
    linearizes once, which is what repeated adjoint iterations need.
    """
    if p.variant == "sspgd":
        w = p.spectrum(x.shape)
        pattern = None
        if p.activation == "relu":
            z = apply_filterbank(x, p.bank, "forward", w)
            pattern = (z.real > 0, z.imag > 0)
            del z

        def apply(u):
            q = apply_filterbank(u, p.bank, "forward", w)
            if pattern is not None:
                _zero_off(q, pattern)
            out = apply_filterbank(q, p.bank, "adjoint", w)
            del q
            out *= -p.eta
            out += u
            return out
        return apply

    def masks(h, layers):
        _, acts = _cnn_forward(h, layers)
        return [a > 0 for a in acts[1:-1]]

    def back(ms, layers, g):
        for i in range(len(layers) - 1, -1, -1):
            if i < len(layers) - 1:
                g = np.where(ms[i], g, 0.0)
            g = conv_transpose(g, layers[i])
        return g

    km = masks(_to_real(x), p.k_layers)
    if p.variant == "ksspgd":
        def apply(u):
            return (1.0 - p.eta) * u + _to_complex(back(km, p.k_layers, p.eta * _to_real(u)))
        return apply
    im = masks(_to_real(fft_centered(x, "inverse")), p.i_layers)

    def apply(u):
        out = (1.0 - p.eta1 - p.eta2) * u
        out += _to_complex(back(km, p.k_layers, p.eta1 * _to_real(u)))
        ui = _to_real(fft_centered(u, "inverse"))
        out += fft_centered(_to_complex(back(im, p.i_layers, p.eta2 * ui)), "forward")
        return out
    return apply


def _vjp_sspgd(x, p, seed, want_params, want_input=True):
    bank = p.bank
    w = p.spectrum(x.shape)
    u = apply_filterbank(x, bank, "forward", w)
    q = apply_filterbank(seed, bank, "forward", w)
    if p.activation == "relu":
        pattern = (u.real > 0, u.imag > 0)
        _zero_off(u, pattern)
        _zero_off(q, pattern)
        del pattern
    dx = None
    if want_input:
        dx = apply_filterbank(q, bank, "adjoint", w)
        dx *= -p.eta
        dx += seed
    if not want_params:
        return Cotangent(dx, np.zeros(0))
    # gradient w.r.t. the time-reversed taps, then flip back to natural order
    gv = _hankel_corr(u, seed, bank.window)
    gv += _hankel_corr(q, x, bank.window)
    gv *= -p.eta
    gs = gv[:, ::-1, ::-1, :]
    return Cotangent(dx, np.concatenate([gs.real.ravel(), gs.imag.ravel()]))


def _vjp_cnn(h, layers, seed_r, want_params):
    _, acts = _cnn_forward(h, layers)
    dh, grads = _cnn_backward(acts, layers, seed_r, need_params=want_params)
    return dh, (_flatten_layer_grads(grads) if want_params else [])


def residual_vjp(x: np.ndarray, p: NetworkParams, seed: np.ndarray,
                 want_params: bool = True, want_input: bool = True) -> Cotangent:
    """Reverse-mode VJP of ``G`` at ``x``: ``J_G(x)^T seed`` and
    ``(dG/dp)^T seed``. ReLU uses the subgradient 0 at 0.

    ``want_input=False`` skips the input cotangent for the filter-bank
    variant (``wrt_input`` is then ``None``); the CNN variants always
    produce it since backpropagation passes through it anyway.
    """
    seed = np.asarray(seed, dtype=np.complex128)
    if seed.shape != x.shape:
        raise ValueError(f"seed shape {seed.shape} does not match input {x.shape}")
    if not want_params:
        return Cotangent(input_vjp(x, p)(seed), np.zeros(0))
    if p.variant == "sspgd":
        return _vjp_sspgd(x, p, seed, want_params, want_input)
    if p.variant == "ksspgd":
        dh, parts = _vjp_cnn(_to_real(x), p.k_layers, p.eta * _to_real(seed), want_params)
        dx = (1.0 - p.eta) * seed + _to_complex(dh)
        gp = np.concatenate(parts) if want_params else np.zeros(0)
        return Cotangent(dx, gp)
    # hsspgd
    dx = (1.0 - p.eta1 - p.eta2) * seed
    dh, kparts = _vjp_cnn(_to_real(x), p.k_layers, p.eta1 * _to_real(seed), want_params)
    dx = dx + _to_complex(dh)
    u = _to_real(fft_centered(x, "inverse"))
    seed_img = _to_real(fft_centered(seed, "inverse"))
    dh, iparts = _vjp_cnn(u, p.i_layers, p.eta2 * seed_img, want_params)
    dx = dx + fft_centered(_to_complex(dh), "forward")
    gp = np.concatenate(kparts + iparts) if want_params else np.zeros(0)
    return Cotangent(dx, gp)


# -- Lipschitz control ----------------------------------------------------------

def lipschitz_normalize(p: NetworkParams, cfg: SpecNormConfig, shape,
                        budgets=None) -> NetworkParams:
    """Enforce the Lipschitz budget on an ``(N1, N2)`` reference grid.

    SSPGD delegates to :func:`spectral_normalize`. For the CNN variants each
    layer ``i`` of every stack is scaled so its spectral norm is at most
    ``l_i`` with ``prod(l_i) = 1 - eps`` (equal split by default); layers
    already within budget are left alone. Biases are untouched since they
    do not change the Lipschitz constant.
    """
    if p.variant == "sspgd":
        bank = spectral_normalize(p.bank, cfg, shape)
        return p if bank is p.bank else replace(p, bank=bank, _cache={})

    def fix(layers):
        n = len(layers)
        ell = budgets if budgets is not None else [(1.0 - cfg.epsilon) ** (1.0 / n)] * n
        out = []
        for layer, li in zip(layers, ell):
            sn = conv_spectral_norm(layer, shape)
            if sn > li:
                layer = ConvLayer(layer.weight * (li / sn), layer.bias)
            out.append(layer)
        return tuple(out)

    return replace(p, k_layers=fix(p.k_layers),
                   i_layers=fix(p.i_layers) if p.i_layers else (), _cache={})


def lipschitz_bound(p: NetworkParams, shape) -> float:
    """Upper bound on ``Lip(G)`` from the current spectral norms."""
    if p.variant == "sspgd":
        from kdeq.hankel import composite_lambda_max
        lam = composite_lambda_max(p.bank, shape)
        # I - eta * B with 0 <= B <= lam (B self-adjoint, PSD)
        return max(1.0, abs(1.0 - p.eta * lam))
    tk = float(np.prod([conv_spectral_norm(layer, shape) for layer in p.k_layers]))
    if p.variant == "ksspgd":
        return abs(1.0 - p.eta) + p.eta * tk
    ti = float(np.prod([conv_spectral_norm(layer, shape) for layer in p.i_layers]))
    return abs(1.0 - p.eta1 - p.eta2) + p.eta1 * tk + p.eta2 * ti
