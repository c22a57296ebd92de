"""Symmetric per-tensor weight quantization with a learnable step size.

Training uses fake quantization: the float master weight is rounded onto the
signed ``bits``-bit integer grid and scaled back, with a clipped
straight-through estimator for the weight gradient and the learned-step-size
rule for the scale gradient. :func:`export_int` produces the integer codes
that an extracted model stores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, custom_op

MIN_BITS = 2
MAX_BITS = 16
FULL_PRECISION = 32


def qrange(bits: int) -> tuple[int, int]:
    """Signed integer range ``[-2^(b-1), 2^(b-1) - 1]``."""
    _check_bits(bits)
    half = 1 << (bits - 1)
    return -half, half - 1


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


def _check_scale(scale: float) -> None:
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError(f"quantization scale must be positive, got {scale!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_codes(w: np.ndarray, scale: float, bits: int) -> np.ndarray:
    """Integer codes ``clamp(round(w / s), qmin, qmax)`` as float64."""
    _check_scale(scale)
    qmin, qmax = qrange(bits)
    # + 0.0 turns -0.0 into 0.0 so fake-quantized and decoded weights agree bitwise
    return np.clip(round_half_away(np.asarray(w, dtype=np.float64) / scale), qmin, qmax) + 0.0


def init_scale(w: np.ndarray, bits: int) -> float:
    """Learned-step-size initialisation ``2 mean|w| / sqrt(qmax)``."""
    _, qmax = qrange(bits)
    m = float(np.mean(np.abs(w)))
    if m == 0.0:
        m = 1e-8
    return 2.0 * m / np.sqrt(qmax)


@dataclass
class QuantScale:
    tensor_name: str
    bits: int
    scale: float
    trainable: bool = True

    def __post_init__(self):
        _check_bits(self.bits)
        _check_scale(self.scale)


@dataclass
class IntTensor:
    shape: tuple[int, ...]
    codes: np.ndarray
    bits: int
    scale: float

    def __post_init__(self):
        _check_bits(self.bits)
        _check_scale(self.scale)
        self.shape = tuple(int(n) for n in self.shape)
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(self.shape)
        qmin, qmax = qrange(self.bits)
        if self.codes.size and (self.codes.min() < qmin or self.codes.max() > qmax):
            raise ValueError(f"codes outside the signed {self.bits}-bit range")

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale


def fake_quantize_array(w: np.ndarray, scale: float, bits: int) -> np.ndarray:
    return quantize_codes(w, scale, bits) * scale


def export_int(w: np.ndarray, scale: float, bits: int) -> IntTensor:
    w = np.asarray(w, dtype=np.float64)
    return IntTensor(w.shape, quantize_codes(w, scale, bits).astype(np.int64), bits, scale)


def ste_backward(upstream: np.ndarray, w: np.ndarray, scale: float, bits: int) -> tuple[np.ndarray, float]:
    """Clipped straight-through gradient for ``w`` and learned-step-size gradient for ``s``.

    Inside the representable range the weight gradient passes through and the
    per-element scale derivative is ``round(w/s) - w/s``; outside it the weight
    gradient is zero and the scale derivative is the clamp value. The scale
    gradient is damped by ``1 / sqrt(N * qmax)``.
    """
    _check_scale(scale)
    qmin, qmax = qrange(bits)
    v = np.asarray(w, dtype=np.float64) / scale
    inside = (v >= qmin) & (v <= qmax)
    dscale = np.where(inside, round_half_away(v) - v, np.where(v < qmin, qmin, qmax))
    grad_w = upstream * inside
    grad_s = float((upstream * dscale).sum()) / np.sqrt(v.size * qmax)
    return grad_w, grad_s


def fake_quantize(w: Tensor, scale: Tensor, bits: int) -> Tensor:
    """Differentiable fake quantization of ``w`` with a scalar ``scale`` tensor."""
    s = float(scale.data)
    out = fake_quantize_array(w.data, s, bits)
    wd = w.data

    def backward(g):
        gw, gs = ste_backward(g, wd, s, bits)
        return gw, np.full(scale.shape, gs)

    return custom_op(out, (w, scale), backward, f"fake_quantize[{bits}]")


# -- packed code storage ---------------------------------------------------------


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack signed codes as little-endian ``bits``-wide two's-complement fields."""
    _check_bits(bits)
    flat = np.asarray(codes, dtype=np.int64).reshape(-1)
    unsigned = (flat & ((1 << bits) - 1)).astype(np.uint64)
    bitplanes = ((unsigned[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    _check_bits(bits)
    raw = np.frombuffer(buf, dtype=np.uint8)
    bitstream = np.unpackbits(raw, bitorder="little")[: count * bits].reshape(count, bits)
    unsigned = bitstream.astype(np.int64) @ (1 << np.arange(bits, dtype=np.int64))
    sign = 1 << (bits - 1)
    return np.where(unsigned >= sign, unsigned - (1 << bits), unsigned)
