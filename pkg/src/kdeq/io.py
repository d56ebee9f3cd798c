"""Versioned little-endian binary formats.

==========  =====================================================================
``CKS1``    grid: ``u16`` version, ``u32 x 3`` dims ``(N1, N2, Nc)``, ``u8``
            dtype (0 = f32, 1 = f64), then interleaved ``(re, im)`` pairs in
            row-major, coil-fastest order
``MSK1``    mask: version, ``u32 x 2`` dims, ``u8`` role (0 omega, 1 lambda,
            2 gamma), ``u8`` has-ACS, ``u32 x 4`` ACS ``(r0, r1, c0, c1)``,
            ``f64`` acceleration, then the keep bits packed row-major (MSB
            first)
``FLT1``    filter bank: version, ``u32 x 4`` ``(r, d1, d2, Nc)``, ``u8`` dtype,
            then the complex payload of the ``(r, d1, d2, Nc)`` array
``PRM1``    network parameters: version, ``u8`` variant, ``u8`` activation,
            ``f64 x 3`` ``(eta, eta1, eta2)``; then either an embedded filter
            block (``u32 x 4`` shape + f64 complex payload) or ``u32 x 2``
            layer counts followed by, per layer, ``u32 x 4`` weight shape,
            ``u8`` has-bias and f64 payloads
==========  =====================================================================

Headers are validated before any payload is read and decoding never reads
past the declared lengths.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from kdeq.conv import ConvLayer
from kdeq.fixed_point import SamplingMask
from kdeq.hankel import FilterBank
from kdeq.networks import VARIANTS, NetworkParams

__all__ = [
    "VERSION",
    "FormatError",
    "BadMagicError",
    "VersionError",
    "TruncatedError",
    "DimsOverflowError",
    "encode_grid",
    "decode_grid",
    "encode_mask",
    "decode_mask",
    "encode_filters",
    "decode_filters",
    "encode_params",
    "decode_params",
    "save",
    "load",
]

VERSION = 1
MAX_PAYLOAD = 1 << 40

_ROLES = ("omega", "lambda", "gamma")
_ACTIVATIONS = ("relu", "identity")


class FormatError(ValueError):
    """Malformed or unsupported file."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimsOverflowError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if n > len(self.buf) - self.pos:
            raise TruncatedError(
                f"truncated {what}: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after payload")


def _header(r: _Reader, magic: bytes):
    got = bytes(r.take(4, "magic"))
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionError(f"unsupported version {version} (this reader handles {VERSION})")


def _payload_size(dims, item: int) -> int:
    n = item
    for d in dims:
        n *= int(d)
        if n > MAX_PAYLOAD:
            raise DimsOverflowError(f"declared dims {tuple(dims)} exceed the payload limit")
    return n


def _complex_bytes(a: np.ndarray, dtype_code: int) -> bytes:
    real = "<f4" if dtype_code == 0 else "<f8"
    inter = np.empty(a.shape + (2,), dtype=real)
    inter[..., 0] = a.real
    inter[..., 1] = a.imag
    return inter.tobytes(order="C")


def _complex_read(r: _Reader, shape, dtype_code: int, what: str) -> np.ndarray:
    if dtype_code not in (0, 1):
        raise FormatError(f"unknown dtype code {dtype_code}")
    item = 4 if dtype_code == 0 else 8
    nbytes = _payload_size(tuple(shape) + (2,), item)
    raw = np.frombuffer(r.take(nbytes, what), dtype="<f4" if dtype_code == 0 else "<f8")
    pairs = raw.astype(np.float64).reshape(tuple(shape) + (2,))
    return pairs[..., 0] + 1j * pairs[..., 1]


# -- grids ----------------------------------------------------------------------

def encode_grid(x: np.ndarray, dtype: str = "f64") -> bytes:
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 3:
        raise ValueError(f"grid must be 3-D, got shape {x.shape}")
    code = {"f32": 0, "f64": 1}[dtype]
    return b"CKS1" + struct.pack("<H3IB", VERSION, *x.shape, code) + _complex_bytes(x, code)


def _read_grid(r: _Reader) -> np.ndarray:
    _header(r, b"CKS1")
    n1, n2, nc, code = r.unpack("<3IB", "grid header")
    if min(n1, n2, nc) < 1:
        raise FormatError(f"grid dims must be positive, got {(n1, n2, nc)}")
    return _complex_read(r, (n1, n2, nc), code, "grid payload")


def decode_grid(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    x = _read_grid(r)
    r.finish()
    return x


# -- masks ----------------------------------------------------------------------

def encode_mask(m: SamplingMask) -> bytes:
    n1, n2 = m.shape
    has = m.acs is not None
    acs = m.acs if has else (0, 0, 0, 0)
    head = struct.pack("<H2IBB4Id", VERSION, n1, n2, _ROLES.index(m.role), int(has), *acs, m.accel)
    return b"MSK1" + head + np.packbits(m.keep.ravel()).tobytes()


def decode_mask(buf: bytes) -> SamplingMask:
    r = _Reader(buf)
    _header(r, b"MSK1")
    n1, n2, role, has, r0, r1, c0, c1, accel = r.unpack("<2IBB4Id", "mask header")
    if min(n1, n2) < 1:
        raise FormatError(f"mask dims must be positive, got {(n1, n2)}")
    if role >= len(_ROLES):
        raise FormatError(f"unknown mask role code {role}")
    nbits = _payload_size((n1, n2), 1)
    packed = np.frombuffer(r.take((nbits + 7) // 8, "mask payload"), dtype=np.uint8)
    r.finish()
    keep = np.unpackbits(packed, count=nbits).astype(bool).reshape(n1, n2)
    try:
        return SamplingMask(keep, acs=(r0, r1, c0, c1) if has else None, accel=accel,
                            role=_ROLES[role])
    except ValueError as exc:
        raise FormatError(f"invalid mask contents: {exc}") from exc


# -- filter banks -----------------------------------------------------------------

def _bank_bytes(bank: FilterBank) -> bytes:
    return struct.pack("<4I", *bank.filters.shape) + _complex_bytes(bank.filters, 1)


def encode_filters(bank: FilterBank, dtype: str = "f64") -> bytes:
    code = {"f32": 0, "f64": 1}[dtype]
    head = struct.pack("<H4IB", VERSION, *bank.filters.shape, code)
    return b"FLT1" + head + _complex_bytes(bank.filters, code)


def decode_filters(buf: bytes) -> FilterBank:
    r = _Reader(buf)
    _header(r, b"FLT1")
    shape = r.unpack("<4I", "filter header")
    (code,) = r.unpack("<B", "filter header")
    if min(shape) < 1:
        raise FormatError(f"filter dims must be positive, got {shape}")
    f = _complex_read(r, shape, code, "filter payload")
    r.finish()
    return FilterBank(f)


# -- network parameters -------------------------------------------------------------

def encode_params(p: NetworkParams) -> bytes:
    out = [b"PRM1", struct.pack("<HBB3d", VERSION, VARIANTS.index(p.variant),
                                _ACTIVATIONS.index(p.activation), p.eta, p.eta1, p.eta2)]
    if p.variant == "sspgd":
        out.append(_bank_bytes(p.bank))
    else:
        out.append(struct.pack("<2I", len(p.k_layers), len(p.i_layers)))
        for layer in p.k_layers + p.i_layers:
            out.append(struct.pack("<4IB", *layer.weight.shape, int(layer.bias is not None)))
            out.append(layer.weight.astype("<f8").tobytes(order="C"))
            if layer.bias is not None:
                out.append(layer.bias.astype("<f8").tobytes())
    return b"".join(out)


def _read_real(r: _Reader, shape, what):
    n = _payload_size(shape, 8)
    return np.frombuffer(r.take(n, what), dtype="<f8").astype(np.float64).reshape(shape)


def decode_params(buf: bytes) -> NetworkParams:
    r = _Reader(buf)
    _header(r, b"PRM1")
    variant, act, eta, eta1, eta2 = r.unpack("<BB3d", "params header")
    if variant >= len(VARIANTS) or act >= len(_ACTIVATIONS):
        raise FormatError(f"unknown variant/activation codes {(variant, act)}")
    kw = dict(variant=VARIANTS[variant], activation=_ACTIVATIONS[act], eta=eta, eta1=eta1, eta2=eta2)
    if kw["variant"] == "sspgd":
        shape = r.unpack("<4I", "filter block header")
        if min(shape) < 1:
            raise FormatError(f"filter dims must be positive, got {shape}")
        kw["bank"] = FilterBank(_complex_read(r, shape, 1, "filter block"))
    else:
        nk, ni = r.unpack("<2I", "layer counts")
        layers = []
        for i in range(nk + ni):
            *shape, has_bias = r.unpack("<4IB", f"layer {i} header")
            if min(shape) < 1:
                raise FormatError(f"layer {i} dims must be positive, got {tuple(shape)}")
            w = _read_real(r, tuple(shape), f"layer {i} weights")
            b = _read_real(r, (shape[3],), f"layer {i} bias") if has_bias else None
            layers.append(ConvLayer(w, b))
        kw["k_layers"] = tuple(layers[:nk])
        kw["i_layers"] = tuple(layers[nk:])
    r.finish()
    return NetworkParams(**kw)


# -- files ----------------------------------------------------------------------

_DECODERS = {b"CKS1": decode_grid, b"MSK1": decode_mask, b"FLT1": decode_filters,
             b"PRM1": decode_params}


def save(obj, path, dtype: str = "f64") -> None:
    """Write a grid, mask, filter bank or parameter set, picking the format
    from the object type."""
    if isinstance(obj, SamplingMask):
        data = encode_mask(obj)
    elif isinstance(obj, FilterBank):
        data = encode_filters(obj, dtype)
    elif isinstance(obj, NetworkParams):
        data = encode_params(obj)
    else:
        data = encode_grid(obj, dtype)
    Path(path).write_bytes(data)


def load(path, expect: str | None = None):
    """Read any of the formats; ``expect`` (e.g. ``"CKS1"``) pins the kind."""
    data = Path(path).read_bytes()
    magic = data[:4]
    if expect is not None and magic != expect.encode():
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {expect!r}")
    if magic not in _DECODERS:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    return _DECODERS[magic](data)
