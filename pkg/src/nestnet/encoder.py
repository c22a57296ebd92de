"""Conformer-style encoder that can run as any nested sub-network.

A sub-network is named by :class:`SubnetSpec` (depth, FFN width, weight
bits). It uses the bottom ``depth`` layers, keeps ``width`` intermediate
units of every FFN module and fake-quantizes every encoder weight matrix to
``bits`` before use. The CTC projection and the attention decoder are
shared, full precision, and outside the compressed part.
"""

from __future__ import annotations

import enum
import re
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .quant import FULL_PRECISION, fake_quantize

NEG_INF = -1e9
LN_EPS = 1e-5
FFN_MODULES = ("ffn1", "ffn2")
ATTN_PROJ = ("q", "k", "v", "o")

_SPEC_RE = re.compile(r"^(\d+)-(\d+)-(\d+)bit$")


class SpecError(ValueError):
    """A sub-network spec that is malformed or outside the configured grid."""


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int
    d_model: int
    depth_max: int
    ffn_max: int
    heads: int
    conv_kernel: int
    vocab: int
    dec_ffn: int = 0

    def __post_init__(self):
        for field in ("d_in", "d_model", "depth_max", "ffn_max", "heads", "conv_kernel", "vocab"):
            if getattr(self, field) < 1:
                raise ValueError(f"EncoderConfig.{field} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.vocab < 3:
            raise ValueError("vocab must hold blank, at least one token and start/end")
        if self.dec_ffn == 0:
            object.__setattr__(self, "dec_ffn", 2 * self.d_model)

    @property
    def sos(self) -> int:
        """Start/end-of-sequence id used by the attention decoder (the last id)."""
        return self.vocab - 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class SubnetSpec:
    depth: int
    width: int
    bits: int

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise SpecError(f"depth and width must be >= 1 in {self}")
        if self.bits != FULL_PRECISION and not 2 <= self.bits <= 16:
            raise SpecError(f"bits must be in [2, 16] or 32 in {self}")

    def __str__(self) -> str:
        return f"{self.depth}-{self.width}-{self.bits}bit"

    @classmethod
    def parse(cls, text: str) -> "SubnetSpec":
        m = _SPEC_RE.match(text.strip())
        if not m:
            raise SpecError(f"malformed spec {text!r}; expected <depth>-<width>-<bits>bit, e.g. 8-1024-4bit")
        return cls(*(int(g) for g in m.groups()))

    @property
    def quantized(self) -> bool:
        return self.bits != FULL_PRECISION


class MaskPolicy(str, enum.Enum):
    LEADING = "leading"
    L2NORM = "l2norm"


class ParamInfo(NamedTuple):
    name: str
    shape: tuple[int, ...]
    quantizable: bool
    layer: int | None


def scale_name(tensor: str, bits: int) -> str:
    return f"scale/{tensor}@{bits}"


def _layer_tensors(prefix: str, c: EncoderConfig, ffn: int) -> list[tuple[str, tuple[int, ...], bool]]:
    d, k = c.d_model, c.conv_kernel
    out: list[tuple[str, tuple[int, ...], bool]] = []

    def ln(name):
        out.append((f"{prefix}.{name}.g", (d,), False))
        out.append((f"{prefix}.{name}.b", (d,), False))

    def ffn_module(m):
        ln(f"{m}.ln")
        out.append((f"{prefix}.{m}.w1", (ffn, d), True))
        out.append((f"{prefix}.{m}.b1", (ffn,), False))
        out.append((f"{prefix}.{m}.w2", (d, ffn), True))
        out.append((f"{prefix}.{m}.b2", (d,), False))

    ffn_module("ffn1")
    ln("mhsa.ln")
    for p in ATTN_PROJ:
        out.append((f"{prefix}.mhsa.w{p}", (d, d), True))
        out.append((f"{prefix}.mhsa.b{p}", (d,), False))
    ln("conv.ln")
    out.append((f"{prefix}.conv.pw1.w", (2 * d, d), True))
    out.append((f"{prefix}.conv.pw1.b", (2 * d,), False))
    out.append((f"{prefix}.conv.dw.w", (d, k), True))
    out.append((f"{prefix}.conv.dw.b", (d,), False))
    ln("conv.norm")
    out.append((f"{prefix}.conv.pw2.w", (d, d), True))
    out.append((f"{prefix}.conv.pw2.b", (d,), False))
    ffn_module("ffn2")
    ln("ln_final")
    return out


def _attention_tensors(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = [(f"{prefix}.ln.g", (d,)), (f"{prefix}.ln.b", (d,))]
    for p in ATTN_PROJ:
        out += [(f"{prefix}.w{p}", (d, d)), (f"{prefix}.b{p}", (d,))]
    return out


def param_inventory(config: EncoderConfig) -> list[ParamInfo]:
    """Every trainable tensor of the full model, in canonical storage order."""
    c, d, v = config, config.d_model, config.vocab
    inv = [ParamInfo("frontend.w", (d, c.d_in), False, None), ParamInfo("frontend.b", (d,), False, None)]
    for i in range(c.depth_max):
        inv += [ParamInfo(n, s, q, i) for n, s, q in _layer_tensors(f"enc.{i}", c, c.ffn_max)]
    inv += [ParamInfo("ctc.w", (v, d), False, None), ParamInfo("ctc.b", (v,), False, None)]
    inv.append(ParamInfo("dec.embed", (v, d), False, None))
    for n, s in _attention_tensors("dec.self", d) + _attention_tensors("dec.cross", d):
        inv.append(ParamInfo(n, s, False, None))
    inv += [
        ParamInfo("dec.ffn.ln.g", (d,), False, None),
        ParamInfo("dec.ffn.ln.b", (d,), False, None),
        ParamInfo("dec.ffn.w1", (c.dec_ffn, d), False, None),
        ParamInfo("dec.ffn.b1", (c.dec_ffn,), False, None),
        ParamInfo("dec.ffn.w2", (d, c.dec_ffn), False, None),
        ParamInfo("dec.ffn.b2", (d,), False, None),
        ParamInfo("dec.ln_final.g", (d,), False, None),
        ParamInfo("dec.ln_final.b", (d,), False, None),
        ParamInfo("dec.out.w", (v, d), False, None),
        ParamInfo("dec.out.b", (v,), False, None),
    ]
    return inv


def ffn_width_of(name: str) -> str | None:
    """The FFN module a tensor belongs to (e.g. ``enc.3.ffn1``) when its shape depends on width."""
    m = re.match(r"^(enc\.\d+\.ffn[12])\.(w1|b1|w2)$", name)
    return m.group(1) if m else None


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for info in param_inventory(config):
        leaf = info.name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[info.name] = np.ones(info.shape)
        elif len(info.shape) == 1:
            params[info.name] = np.zeros(info.shape)
        elif info.name == "dec.embed":
            params[info.name] = rng.standard_normal(info.shape)
        else:
            params[info.name] = rng.standard_normal(info.shape) / np.sqrt(info.shape[1])
    return params


# -- width masking ----------------------------------------------------------------


def kept_indices(w1: np.ndarray, keep: int, policy: MaskPolicy | str = MaskPolicy.LEADING) -> np.ndarray:
    """Ascending indices of the FFN units a width-``keep`` sub-network uses.

    ``w1`` is the first FFN matrix, [ffn_max, d_model]. The ``l2norm`` policy
    keeps the rows with the largest L2 norm, breaking ties toward the lower index.
    """
    n = w1.shape[0]
    if not 1 <= keep <= n:
        raise SpecError(f"keep={keep} outside [1, {n}]")
    policy = MaskPolicy(policy)
    if policy is MaskPolicy.LEADING or keep == n:
        return np.arange(keep)
    norms = np.sqrt((w1 * w1).sum(axis=1))
    order = np.argsort(-norms, kind="stable")
    return np.sort(order[:keep])


def width_mask(
    w: np.ndarray, keep: int, policy: MaskPolicy | str = MaskPolicy.LEADING, axis: int = 0, rank_by: np.ndarray | None = None
) -> np.ndarray:
    """Zero every FFN unit outside the kept set.

    ``axis=0`` masks rows (first FFN matrix), ``axis=1`` masks columns (second
    FFN matrix). The kept set comes from ``rank_by`` (the module's first
    matrix) when given, so both matrices of a module agree.
    """
    reference = rank_by if rank_by is not None else (w if axis == 0 else w.T)
    idx = kept_indices(reference, keep, policy)
    mask = np.zeros(w.shape[axis], dtype=bool)
    mask[idx] = True
    shape = [1] * w.ndim
    shape[axis] = -1
    return w * mask.reshape(shape)


# -- forward pass ------------------------------------------------------------------


@lru_cache(maxsize=64)
def _posenc(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d // 2 + d % 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)[:, : (d + 1) // 2]
    pe[:, 1::2] = np.cos(angle)[:, : d // 2]
    pe.setflags(write=False)
    return pe


def frame_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def _key_bias(valid: np.ndarray) -> np.ndarray:
    """[B, T] validity -> additive attention bias [B, 1, 1, T]."""
    return np.where(valid > 0, 0.0, NEG_INF)[:, None, None, :]


def _ln(x: Tensor, w: Mapping[str, Tensor], name: str) -> Tensor:
    return ag.layer_norm(x, w[f"{name}.g"], w[f"{name}.b"], LN_EPS)


def _attention(q_in: Tensor, kv_in: Tensor, w: Mapping[str, Tensor], p: str, heads: int, bias: np.ndarray) -> Tensor:
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    dh = d // heads

    def split(x, T):
        return x.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(ag.linear(q_in, w[f"{p}.wq"], w[f"{p}.bq"]), Tq)
    k = split(ag.linear(kv_in, w[f"{p}.wk"], w[f"{p}.bk"]), Tk)
    v = split(ag.linear(kv_in, w[f"{p}.wv"], w[f"{p}.bv"]), Tk)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)) + bias
    ctx = (ag.softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return ag.linear(ctx, w[f"{p}.wo"], w[f"{p}.bo"])


def _ffn(x: Tensor, w: Mapping[str, Tensor], p: str) -> Tensor:
    y = _ln(x, w, f"{p}.ln")
    y = ag.swish(ag.linear(y, w[f"{p}.w1"], w[f"{p}.b1"]))
    return ag.linear(y, w[f"{p}.w2"], w[f"{p}.b2"])


def _conv(x: Tensor, w: Mapping[str, Tensor], p: str, fmask: np.ndarray) -> Tensor:
    y = _ln(x, w, f"{p}.ln")
    y = ag.glu(ag.linear(y, w[f"{p}.pw1.w"], w[f"{p}.pw1.b"]))
    y = ag.depthwise_conv1d(y * fmask, w[f"{p}.dw.w"], w[f"{p}.dw.b"])
    y = ag.swish(_ln(y, w, f"{p}.norm"))
    return ag.linear(y, w[f"{p}.pw2.w"], w[f"{p}.pw2.b"])


def _check_input(x: np.ndarray, lengths, d_in: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] == 0 or x.shape[0] == 0:
        raise ValueError("encoder input must be a non-empty [batch, frames, features] block")
    if x.shape[2] != d_in:
        raise ValueError(f"expected {d_in} feature dims, got {x.shape[2]}")
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1])
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (x.shape[0],) or lengths.min() < 1 or lengths.max() > x.shape[1]:
        raise ValueError("lengths must give 1..T valid frames per utterance")
    return x, lengths


def conformer_forward(
    weights: Mapping[str, Tensor], config: EncoderConfig, depth: int, x, lengths=None
) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder from already-resolved (sliced, quantized) weights.

    Returns frame log-posteriors [B, T, vocab] and the hidden state after
    each used layer. Shared by the supernet and by extracted models so both
    execute the identical sequence of floating-point operations.
    """
    x, lengths = _check_input(x, lengths, config.d_in)
    B, T, _ = x.shape
    fm = frame_mask(lengths, T)
    fmask = fm[:, :, None]
    bias = _key_bias(fm)
    h = ag.linear(Tensor(x), weights["frontend.w"], weights["frontend.b"]) + _posenc(T, config.d_model)
    hidden = []
    for i in range(depth):
        p = f"enc.{i}"
        h = h + 0.5 * _ffn(h, weights, f"{p}.ffn1")
        h = h + _mhsa(h, weights, p, config.heads, bias)
        h = h + _conv(h, weights, f"{p}.conv", fmask)
        h = h + 0.5 * _ffn(h, weights, f"{p}.ffn2")
        h = _ln(h, weights, f"{p}.ln_final")
        hidden.append(h)
    logits = ag.linear(h, weights["ctc.w"], weights["ctc.b"])
    return ag.log_softmax(logits), hidden


def _mhsa(h: Tensor, w: Mapping[str, Tensor], p: str, heads: int, bias: np.ndarray) -> Tensor:
    y = _ln(h, w, f"{p}.mhsa.ln")
    return _attention(y, y, w, f"{p}.mhsa", heads, bias)


def resolve_weights(
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    spec: SubnetSpec,
    policy: MaskPolicy | str = MaskPolicy.LEADING,
    kept: Mapping[str, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """Weights a sub-network actually uses, built from the full master tensors.

    Quantizable tensors are fake-quantized with their per-bit-width scale
    (``scale/<name>@<bits>``) first; FFN tensors are then gathered down to the
    kept units. Zeroing a unit before quantizing would leave a code-0 entry,
    so gathering after quantization is the same sub-network with the zeros
    physically removed.
    """
    validate_spec(config, spec)
    if kept is None:
        kept = kept_index_sets(params, config, spec, policy)
    out: dict[str, Tensor] = {}
    for info in param_inventory(config):
        if info.layer is not None and info.layer >= spec.depth:
            continue
        t = params[info.name]
        if info.quantizable and spec.quantized:
            t = fake_quantize(t, params[scale_name(info.name, spec.bits)], spec.bits)
        module = ffn_width_of(info.name)
        if module is not None and spec.width < config.ffn_max:
            axis = 1 if info.name.endswith(".w2") else 0
            t = ag.take(t, kept[module], axis=axis)
        out[info.name] = t
    return out


def kept_index_sets(
    params: Mapping[str, Tensor | np.ndarray], config: EncoderConfig, spec: SubnetSpec, policy: MaskPolicy | str
) -> dict[str, np.ndarray]:
    """Kept FFN unit indices for every FFN module of the used layers."""
    out = {}
    for i in range(spec.depth):
        for m in FFN_MODULES:
            name = f"enc.{i}.{m}"
            w1 = params[f"{name}.w1"]
            w1 = w1.data if isinstance(w1, Tensor) else np.asarray(w1)
            out[name] = kept_indices(w1, spec.width, policy)
    return out


def validate_spec(config: EncoderConfig, spec: SubnetSpec) -> None:
    if spec.depth > config.depth_max or spec.width > config.ffn_max:
        raise SpecError(f"spec {spec} exceeds config depth {config.depth_max} / width {config.ffn_max}")


def encoder_forward(
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    spec: SubnetSpec,
    x,
    lengths=None,
    policy: MaskPolicy | str = MaskPolicy.LEADING,
) -> Tensor:
    """Frame log-posteriors of the nested sub-network ``spec``."""
    w = resolve_weights(params, config, spec, policy)
    return conformer_forward(w, config, spec.depth, x, lengths)[0]


def decoder_forward(
    weights: Mapping[str, Tensor],
    config: EncoderConfig,
    enc_states: Tensor,
    enc_lengths,
    prefix,
    prefix_lengths=None,
) -> Tensor:
    """Teacher-forced next-token log-probabilities [B, U, vocab].

    One decoder layer: causal self-attention over the prefix, cross-attention
    over encoder states and a feed-forward block. The encoder states here are
    the final layer's hidden output of whichever sub-network ran.
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim == 1:
        prefix = prefix[None]
    if prefix.ndim != 2 or prefix.shape[1] == 0:
        raise ValueError("decoder prefix must be non-empty and start with start-of-sequence")
    B, U = prefix.shape
    if prefix_lengths is None:
        prefix_lengths = np.full(B, U)
    d = config.d_model
    causal = np.triu(np.full((U, U), NEG_INF), k=1)[None, None]
    self_bias = causal + _key_bias(frame_mask(prefix_lengths, U))
    cross_bias = _key_bias(frame_mask(enc_lengths, enc_states.shape[1]))
    e = ag.take(weights["dec.embed"], prefix.reshape(-1), axis=0).reshape(B, U, d) + _posenc(U, d)
    y = _ln(e, weights, "dec.self.ln")
    e = e + _attention(y, y, weights, "dec.self", config.heads, self_bias)
    e = e + _attention(_ln(e, weights, "dec.cross.ln"), enc_states, weights, "dec.cross", config.heads, cross_bias)
    e = e + _ffn(e, weights, "dec.ffn")
    e = _ln(e, weights, "dec.ln_final")
    return ag.log_softmax(ag.linear(e, weights["dec.out.w"], weights["dec.out.b"]))
