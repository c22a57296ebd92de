"""One-pass multi-system training.

Every step forwards a small set of nested sub-networks on the same batch,
sums their weighted losses (optionally with the stop-gradient KL term),
backpropagates once and applies a single AdamW update to the shared master
weights and quantization scales.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import fileformat
from .autograd import Tensor, gradients
from .data import Batch, ToyCorpus
from .encoder import EncoderConfig, SubnetSpec, conformer_forward, decoder_forward, resolve_weights
from .losses import (
    LossWeights,
    allinone_loss,
    attention_ce_loss,
    ctc_loss,
    decoder_io,
    default_loss_weights,
    interpolated_loss,
    kl_regularizer,
)
from .supernet import Grid, SupernetModel, enumerate_grid

MODES = ("individual", "all_in_one", "all_in_one_kl")
STYLES = ("conformer", "ssl")
SCALE_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 3000
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    mode: str = "all_in_one_kl"
    style: str = "conformer"
    lambda_ctc: float = 0.2
    sample_k: int = 3
    clip_norm: float = 5.0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}")
        if self.total_steps < 1 or self.batch_size < 1 or self.sample_k < 1:
            raise ValueError("total_steps, batch_size and sample_k must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at_step(step: int, total: int, peak: float, warmup_fraction: float = 0.10) -> float:
    """Linear warm-up over the first ``warmup_fraction`` of steps, then linear decay to zero."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = warmup_fraction * total
    if step < warm:
        return peak * step / warm
    return peak * (total - step) / (total - warm)


def sample_training_set(specs: Sequence[SubnetSpec], rng: np.random.Generator, k: int = 3) -> list[SubnetSpec]:
    """Largest and smallest spec plus ``k - 2`` drawn uniformly from the rest.

    ``specs`` must be ordered largest first (as :func:`enumerate_grid` returns).
    Grids of at most ``k`` specs are returned whole.
    """
    specs = list(specs)
    if len(specs) <= max(k, 2):
        return specs
    middle = specs[1:-1]
    picks = rng.choice(len(middle), size=k - 2, replace=False) if k > 2 else []
    return [specs[0], specs[-1]] + [middle[i] for i in sorted(picks)]


# -- optimizer ------------------------------------------------------------------------


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float | None = None,
             decay: Callable[[str], bool] = lambda name: True) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * self.v[name] + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            w = p.data
            if self.weight_decay and decay(name):
                w = w * (1.0 - lr * self.weight_decay)
            p.data = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / total
        for k in grads:
            grads[k] = grads[k] * f
    return total


# -- rng streams -------------------------------------------------------------------------


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    init, data, sampling = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "data": np.random.default_rng(data), "sampling": np.random.default_rng(sampling)}


# -- training ------------------------------------------------------------------------------


def spec_losses(
    model: SupernetModel,
    batch: Batch,
    specs: Sequence[SubnetSpec],
    lambda_ctc: float,
    style: str = "conformer",
    with_kl: bool = False,
) -> tuple[dict[SubnetSpec, Tensor], dict[SubnetSpec, Tensor], dict[SubnetSpec, Tensor]]:
    """Per-spec losses, KL terms against the first spec, and frame log-posteriors."""
    prefix, gold, plen = decoder_io(batch.targets, model.config.sos)
    losses, kls, posteriors = {}, {}, {}
    teacher = None
    for i, spec in enumerate(specs):
        try:
            w = resolve_weights(model.params, model.config, spec, model.policy)
            lp, hidden = conformer_forward(w, model.config, spec.depth, batch.features, batch.lengths)
            l_ctc = ctc_loss(lp, batch.targets, batch.lengths, reduction="mean")
            if style == "conformer":
                dec = decoder_forward(w, model.config, hidden[-1], batch.lengths, prefix, plen)
                losses[spec] = interpolated_loss(attention_ce_loss(dec, gold, plen), l_ctc, lambda_ctc)
            else:
                losses[spec] = l_ctc
        except OverflowError as exc:
            raise TrainingDiverged(f"non-finite loss for {spec}: {exc}") from exc
        posteriors[spec] = lp
        if i == 0:
            teacher = lp
        elif with_kl:
            kls[spec] = kl_regularizer(teacher, lp, batch.lengths)
    return losses, kls, posteriors


@dataclass
class Trainer:
    model: SupernetModel
    corpus: ToyCorpus
    config: TrainConfig
    weights: LossWeights
    optimizer: AdamW
    streams: dict[str, np.random.Generator]
    train_indices: np.ndarray
    step_count: int = 0
    cpu_seconds: float = 0.0
    wall_seconds: float = 0.0

    @classmethod
    def create(cls, encoder_config: EncoderConfig, grid: Grid, corpus: ToyCorpus, config: TrainConfig,
               policy: str = "leading", weights: LossWeights | None = None, split: str = "train") -> "Trainer":
        streams = make_streams(config.seed)
        model = SupernetModel.create(encoder_config, grid, streams["init"], policy=policy, seed=config.seed)
        model.training_meta["mode"] = config.mode
        if config.mode == "individual" and len(grid) != 1:
            raise ValueError("individual training needs a single-spec grid")
        if weights is None:
            weights = default_loss_weights(model.specs(), grid.largest, config.style, config.lambda_ctc)
        opt = AdamW(config.peak_lr, config.betas, config.eps, config.weight_decay)
        return cls(model, corpus, config, weights, opt, streams, corpus.split_indices(split))

    @property
    def specs(self) -> list[SubnetSpec]:
        return enumerate_grid(self.model.grid)

    def draw_batch(self) -> Batch:
        idx = self.streams["data"].choice(len(self.train_indices), size=min(self.config.batch_size, len(self.train_indices)), replace=False)
        return self.corpus.batch(self.train_indices[idx])

    def step(self) -> dict:
        """One update; returns the metrics record for it."""
        t_wall, t_cpu = time.perf_counter(), time.process_time()
        cfg = self.config
        batch = self.draw_batch()
        if cfg.mode == "individual":
            chosen = [self.specs[0]]
        else:
            chosen = sample_training_set(self.specs, self.streams["sampling"], cfg.sample_k)
        use_kl = cfg.mode == "all_in_one_kl"
        losses, kls, _ = spec_losses(self.model, batch, chosen, cfg.lambda_ctc, cfg.style, use_kl)
        for spec, loss in losses.items():
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss for {spec} at step {self.step_count + 1}")
        total = allinone_loss(losses, chosen[0], self.weights, kls if use_kl else None)
        grads = gradients(total, self.model.params)
        gnorm = clip_global_norm(grads, cfg.clip_norm)
        if not np.isfinite(gnorm):
            raise TrainingDiverged(f"non-finite gradient norm at step {self.step_count + 1} (specs {[str(s) for s in chosen]})")
        self.step_count += 1
        lr = lr_at_step(self.step_count, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction)
        params = self.model.params
        self.optimizer.step(params, grads, lr, lambda n: params[n].ndim >= 2)
        for name, p in self.model.params.items():
            if name.startswith("scale/") and p.data < SCALE_FLOOR:
                p.data = np.asarray(SCALE_FLOOR)
        self.model.training_meta["step"] = self.step_count
        self.wall_seconds += time.perf_counter() - t_wall
        self.cpu_seconds += time.process_time() - t_cpu
        return {
            "step": self.step_count,
            "lr": lr,
            "loss": {str(s): float(l.data) for s, l in losses.items()},
            "kl": {str(s): float(k.data) for s, k in kls.items()},
            "total": float(total.data),
            "grad_norm": gnorm,
            "elapsed": self.wall_seconds,
        }

    def run(self, until: int | None = None, metrics_path: str | Path | None = None,
            checkpoint_path: str | Path | None = None, log: Callable[[dict], None] | None = None) -> list[dict]:
        """Train up to step ``until`` (default: total_steps), logging one JSON line per step."""
        until = self.config.total_steps if until is None else min(until, self.config.total_steps)
        records = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            while self.step_count < until:
                rec = self.step()
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if log:
                    log(rec)
                every = self.config.checkpoint_every
                if checkpoint_path and every and self.step_count % every == 0:
                    self.save_checkpoint(checkpoint_path)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            self.save_checkpoint(checkpoint_path)
        return records

    # -- checkpoints ---------------------------------------------------------------------

    def checkpoint_container(self):
        meta = self.model.meta()
        meta.update(
            kind="checkpoint",
            train_config=self.config.to_dict(),
            optimizer={"t": self.optimizer.t},
            rng={k: g.bit_generator.state for k, g in self.streams.items()},
            step=self.step_count,
            corpus_checksum=self.corpus.checksum(),
            loss_weights={
                "lambda_ctc": self.weights.lambda_ctc,
                "lambda1": {str(k): v for k, v in self.weights.lambda1.items()},
                "lambda2": {str(k): v for k, v in self.weights.lambda2.items()},
            },
        )
        tensors = dict(self.model.tensors())
        for name in self.model.param_order():
            if name in self.optimizer.m:
                tensors[f"opt.m/{name}"] = self.optimizer.m[name]
                tensors[f"opt.v/{name}"] = self.optimizer.v[name]
        return meta, tensors

    def save_checkpoint(self, path: str | Path) -> int:
        meta, tensors = self.checkpoint_container()
        return fileformat.write(path, meta, tensors)

    @classmethod
    def from_checkpoint(cls, path: str | Path, corpus: ToyCorpus, split: str = "train") -> "Trainer":
        meta, tensors = fileformat.read(path)
        if meta.get("kind") != "checkpoint":
            raise fileformat.FormatError("not a training checkpoint")
        if meta["corpus_checksum"] != corpus.checksum():
            raise ValueError("checkpoint was trained on a different corpus")
        model = SupernetModel.from_container(meta, tensors)
        config = TrainConfig(**meta["train_config"])
        lw = meta["loss_weights"]
        weights = LossWeights(
            lw["lambda_ctc"],
            {SubnetSpec.parse(k): v for k, v in lw["lambda1"].items()},
            {SubnetSpec.parse(k): v for k, v in lw["lambda2"].items()},
        )
        opt = AdamW(config.peak_lr, config.betas, config.eps, config.weight_decay, t=meta["optimizer"]["t"])
        for name in tensors:
            if name.startswith("opt.m/"):
                key = name[len("opt.m/"):]
                opt.m[key] = tensors[name]
                opt.v[key] = tensors[f"opt.v/{key}"]
        streams = make_streams(config.seed)
        for k, state in meta["rng"].items():
            streams[k].bit_generator.state = state
        return cls(model, corpus, config, weights, opt, streams, corpus.split_indices(split), meta["step"])


def train_step(trainer: Trainer) -> dict:
    return trainer.step()


def train_run(encoder_config: EncoderConfig, grid: Grid, corpus: ToyCorpus, config: TrainConfig, policy: str = "leading",
              metrics_path=None, checkpoint_path=None) -> Trainer:
    trainer = Trainer.create(encoder_config, grid, corpus, config, policy)
    trainer.run(metrics_path=metrics_path, checkpoint_path=checkpoint_path)
    return trainer
