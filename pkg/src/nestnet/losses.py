"""Training criteria: CTC, attention cross-entropy, their interpolation, the
stop-gradient KL regulariser and the multi-system aggregate objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, stop_gradient
from .encoder import SubnetSpec

BLANK = 0
_NEG = -np.inf


class LossError(ValueError):
    pass


# -- CTC -------------------------------------------------------------------------


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per token plus a blank between repeats."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def _extended(targets: Sequence[Sequence[int]], vocab: int):
    B = len(targets)
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    s_len = np.empty(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.size and (tgt.min() < 1 or tgt.max() >= vocab):
            raise LossError(f"utterance {b}: target token outside 1..{vocab - 1}")
        ext[b, 1 : 2 * tgt.size : 2] = tgt
        s_len[b] = 2 * tgt.size + 1
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    return ext, s_len, skip


def _ctc_forward_backward(lp: np.ndarray, lengths: np.ndarray, targets, need_grad: bool):
    B, T, V = lp.shape
    ext, s_len, skip = _extended(targets, V)
    S = ext.shape[1]
    valid_s = np.arange(S)[None, :] < s_len[:, None]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid_s[:, None, :], emit, _NEG)

    alpha = np.full((B, T, S), _NEG)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1:2] = emit[:, 0, 1:2]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a = prev.copy()
        a[:, 1:] = np.logaddexp(a[:, 1:], prev[:, :-1])
        a[:, 2:] = np.where(skip[:, 2:], np.logaddexp(a[:, 2:], prev[:, :-2]), a[:, 2:])
        alpha[:, t] = a + emit[:, t]

    rows = np.arange(B)
    last = alpha[rows, lengths - 1]
    end = last[rows, s_len - 1]
    end2 = np.where(s_len > 1, last[rows, np.maximum(s_len - 2, 0)], _NEG)
    log_p = np.logaddexp(end, end2)
    if not need_grad:
        return -log_p, None

    init = np.full((B, S), _NEG)
    init[rows, s_len - 1] = 0.0
    init[rows[s_len > 1], s_len[s_len > 1] - 2] = 0.0
    beta = np.full((B, T, S), _NEG)
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            rec = np.full((B, S), _NEG)
        else:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            rec = nxt.copy()
            rec[:, :-1] = np.logaddexp(rec[:, :-1], nxt[:, 1:])
            rec[:, :-2] = np.where(skip[:, 2:], np.logaddexp(rec[:, :-2], nxt[:, 2:]), rec[:, :-2])
        at_end = (lengths - 1 == t)[:, None]
        inside = (t < lengths - 1)[:, None]
        beta[:, t] = np.where(at_end, init, np.where(inside, rec, _NEG))

    occ = np.exp(alpha + beta - log_p[:, None, None])
    onehot = np.zeros((B, S, V))
    onehot[rows[:, None], np.arange(S)[None, :], ext] = valid_s
    return -log_p, -(occ @ onehot)


def ctc_loss(log_posteriors: Tensor, targets, lengths=None, reduction: str = "sum") -> Tensor:
    """Negative log CTC likelihood, blank = token 0.

    ``log_posteriors`` is [T, V] for one utterance or [B, T, V] for a padded
    batch with per-utterance ``lengths``. ``reduction`` is one of ``sum``,
    ``mean`` (over utterances) or ``none``.
    """
    single = log_posteriors.ndim == 2
    if single:
        log_posteriors = log_posteriors.reshape(1, *log_posteriors.shape)
        targets = [targets]
    B, T, _ = log_posteriors.shape
    if len(targets) != B:
        raise LossError(f"{len(targets)} targets for a batch of {B}")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise LossError("lengths must give 1..T frames per utterance")
    for b, tgt in enumerate(targets):
        need = ctc_min_frames(tgt)
        if need > lengths[b]:
            raise LossError(f"utterance {b}: target needs {need} frames, only {lengths[b]} available")

    lp = log_posteriors.data
    nll, grad = _ctc_forward_backward(lp, lengths, targets, log_posteriors.requires_grad)

    if reduction == "none":
        out, weight = nll, None
    elif reduction == "sum":
        out, weight = np.asarray(nll.sum()), 1.0
    elif reduction == "mean":
        out, weight = np.asarray(nll.mean()), 1.0 / B
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        if weight is None:
            return (grad * g[:, None, None],)
        return (grad * (g * weight),)

    loss = ag.custom_op(out, (log_posteriors,), backward, "ctc_loss")
    return loss.reshape(()) if single and reduction == "none" else loss


# -- attention decoder ------------------------------------------------------------


def decoder_io(targets: Sequence[Sequence[int]], sos: int):
    """Teacher-forcing prefixes ``[sos] + y`` and gold sequences ``y + [eos]`` (eos == sos)."""
    B = len(targets)
    U = max(len(t) for t in targets) + 1
    prefix = np.zeros((B, U), dtype=np.int64)
    gold = np.zeros((B, U), dtype=np.int64)
    lengths = np.empty(B, dtype=np.int64)
    for b, t in enumerate(targets):
        n = len(t)
        prefix[b, 0] = sos
        prefix[b, 1 : n + 1] = t
        gold[b, :n] = t
        gold[b, n] = sos
        lengths[b] = n + 1
    return prefix, gold, lengths


def attention_ce_loss(log_probs: Tensor, gold, lengths=None) -> Tensor:
    """Mean negative log-likelihood over all real (unpadded) positions."""
    gold = np.asarray(gold, dtype=np.int64)
    if log_probs.ndim == 2:
        log_probs = log_probs.reshape(1, *log_probs.shape)
        gold = gold[None]
    if gold.shape != log_probs.shape[:2]:
        raise LossError(f"gold shape {gold.shape} does not match decoder output {log_probs.shape[:2]}")
    B, U, V = log_probs.shape
    valid = np.ones((B, U)) if lengths is None else (np.arange(U)[None, :] < np.asarray(lengths)[:, None])
    onehot = np.zeros((B, U, V))
    onehot[np.arange(B)[:, None], np.arange(U)[None, :], gold] = valid
    return (log_probs * onehot).sum() * (-1.0 / valid.sum())


def interpolated_loss(l_att, l_ctc, lam: float) -> Tensor:
    """``(1 - lam) * l_att + lam * l_ctc``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    return (1.0 - lam) * l_att + lam * l_ctc


# -- KL regulariser -----------------------------------------------------------------


def kl_regularizer(p_max: Tensor, p_i: Tensor, lengths=None) -> Tensor:
    """Frame-averaged ``KL(SG(p_max) || p_i)`` from log-posteriors.

    ``p_max`` is cut from the graph here (if the caller has not already done
    so), so the divergence only ever pulls the smaller network toward the
    largest one.
    """
    if p_max.shape != p_i.shape:
        raise LossError(f"KL shapes differ: {p_max.shape} vs {p_i.shape}")
    teacher = p_max if p_max.op == "stop_gradient" else stop_gradient(p_max)
    probs = np.exp(teacher.data)
    if p_i.ndim == 3 and lengths is not None:
        mask = (np.arange(p_i.shape[1])[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
        weight = probs * mask[:, :, None]
        n_frames = mask.sum()
    else:
        weight = probs
        n_frames = int(np.prod(p_i.shape[:-1]))
    return ((teacher - p_i) * weight).sum() * (1.0 / n_frames)


# -- multi-system objective ---------------------------------------------------------


@dataclass
class LossWeights:
    lambda_ctc: float = 0.2
    lambda1: dict[SubnetSpec, float] = field(default_factory=dict)
    lambda2: dict[SubnetSpec, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ValueError("lambda_ctc must lie in [0, 1]")
        for table in (self.lambda1, self.lambda2):
            if any(v < 0 for v in table.values()):
                raise ValueError("loss weights must be nonnegative")

    def l1(self, spec: SubnetSpec) -> float:
        return self.lambda1.get(spec, 1.0)

    def l2(self, spec: SubnetSpec) -> float:
        return self.lambda2.get(spec, 1.0)


def default_loss_weights(
    specs: Iterable[SubnetSpec], largest: SubnetSpec, style: str = "conformer", lambda_ctc: float = 0.2
) -> LossWeights:
    """Per-subnet weights following the reported settings.

    Conformer: (0.8, 0.2) for a sub-network that is shallower than the
    largest, (1, 1) otherwise. SSL-style: (1, 0.005) for shallower, (1, 0.1)
    otherwise.
    """
    table = {"conformer": ((0.8, 0.2), (1.0, 1.0)), "ssl": ((1.0, 0.005), (1.0, 0.1))}
    if style not in table:
        raise ValueError(f"unknown style {style!r}")
    shallow, other = table[style]
    l1, l2 = {}, {}
    for s in specs:
        if s == largest:
            continue
        a, b = shallow if s.depth < largest.depth else other
        l1[s], l2[s] = a, b
    return LossWeights(lambda_ctc, l1, l2)


def allinone_loss(
    losses: Mapping[SubnetSpec, Tensor],
    largest: SubnetSpec,
    weights: LossWeights,
    kls: Mapping[SubnetSpec, Tensor] | None = None,
) -> Tensor:
    """``L_max + sum_i (l1_i * L_i [+ l2_i * KL_i])`` summed in mapping order."""
    if largest not in losses:
        raise LossError(f"loss of the largest network {largest} is missing")
    total = losses[largest]
    for spec, loss in losses.items():
        if spec == largest:
            continue
        total = total + weights.l1(spec) * loss
        if kls is not None and spec in kls:
            total = total + weights.l2(spec) * kls[spec]
    return total
