"""scikit-learn style wrapper around the all-in-one trainer."""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Batch, CorpusError
from .encoder import EncoderConfig, SpecError, SubnetSpec
from .evaluation import corpus_ter, decode_batches, score_hypotheses
from .supernet import ExtractedModel, Grid, enumerate_grid, extract
from .trainer import TrainConfig, Trainer


def check_sequences(X, d_in: int | None = None) -> list[np.ndarray]:
    """Validate a list of ``[T, d_in]`` feature matrices; returns float64 copies."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if not isinstance(X, (list, tuple)) and not (isinstance(X, np.ndarray) and X.ndim == 3):
        raise TypeError("X must be a list of [frames, features] arrays")
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"X[{i}] must be a nonempty 2-D array, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError(f"X[{i}] contains NaN or infinity")
        if d_in is not None and x.shape[1] != d_in:
            raise ValueError(f"X[{i}] has {x.shape[1]} features, expected {d_in}")
        d_in = x.shape[1]
        out.append(x)
    if not out:
        raise ValueError("X is empty")
    return out


def check_targets(y, n_samples: int, vocab: int | None = None) -> list[np.ndarray]:
    """Validate token sequences: ids must be >= 1 (0 is the CTC blank)."""
    if len(y) != n_samples:
        raise ValueError(f"{len(y)} targets for {n_samples} utterances")
    out = []
    for i, t in enumerate(y):
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if t.size and t.min() < 1:
            raise ValueError(f"y[{i}] contains token ids below 1")
        if vocab is not None and t.size and t.max() > vocab:
            raise ValueError(f"y[{i}] contains token ids above {vocab}")
        out.append(t)
    return out


class ArrayCorpus:
    """In-memory utterance set exposing the corpus interface the trainer uses."""

    def __init__(self, X: Sequence[np.ndarray], y: Sequence[np.ndarray] | None = None):
        self.d_in = X[0].shape[1]
        if y is None:
            y = [np.zeros(0, np.int64)] * len(X)
        self.utterances = [(np.asarray(t, dtype=np.int64), x) for x, t in zip(X, y)]
        self.splits = {"train": (0, len(X))}

    def __len__(self) -> int:
        return len(self.utterances)

    def split_indices(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise CorpusError(f"no split named {name!r}")
        return np.arange(*self.splits[name])

    def batch(self, indices) -> Batch:
        items = [self.utterances[int(i)] for i in np.atleast_1d(indices)]
        lengths = np.array([f.shape[0] for _, f in items], dtype=np.int64)
        block = np.zeros((len(items), int(lengths.max()), self.d_in))
        for b, (_, f) in enumerate(items):
            block[b, : f.shape[0]] = f
        return Batch(block, lengths, [t for t, _ in items])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t, f in self.utterances:
            h.update(np.asarray(t, "<i8").tobytes())
            h.update(np.ascontiguousarray(f, "<f8").tobytes())
        return h.hexdigest()


class NestedCTCRecognizer(BaseEstimator):
    """Trains every (depth, width, bits) sub-network of a grid in one pass.

    ``predict`` and ``score`` use the largest sub-network unless ``spec``
    names another grid member.
    """

    def __init__(self, depths=(2, 4), widths=(32, 64), precisions=(4, 8), d_model=32, heads=4, conv_kernel=5,
                 mode="all_in_one_kl", policy="leading", total_steps=3000, peak_lr=3e-3, batch_size=16,
                 weight_decay=0.01, seed=0, vocab=None):
        self.depths = depths
        self.widths = widths
        self.precisions = precisions
        self.d_model = d_model
        self.heads = heads
        self.conv_kernel = conv_kernel
        self.mode = mode
        self.policy = policy
        self.total_steps = total_steps
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed
        self.vocab = vocab

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_targets(y, len(X), self.vocab)
        vocab = self.vocab or int(max((t.max() for t in y if t.size), default=1))
        grid = Grid(tuple(self.depths), tuple(self.widths), tuple(self.precisions))
        if self.mode == "individual" and len(grid) != 1:
            raise ValueError("mode='individual' needs a single depth, width and precision")
        enc = EncoderConfig(X[0].shape[1], self.d_model, grid.depths[-1], grid.widths[-1], self.heads,
                            self.conv_kernel, vocab + 2)
        tc = TrainConfig(total_steps=self.total_steps, peak_lr=self.peak_lr, batch_size=self.batch_size,
                         weight_decay=self.weight_decay, seed=self.seed, mode=self.mode)
        trainer = Trainer.create(enc, grid, ArrayCorpus(X, y), tc, self.policy)
        self.history_ = trainer.run()
        self.model_ = trainer.model
        self.n_features_in_ = X[0].shape[1]
        self.vocab_ = vocab
        self.specs_ = enumerate_grid(grid)
        return self

    def _spec(self, spec) -> SubnetSpec:
        if spec is None:
            return self.specs_[0]
        spec = SubnetSpec.parse(spec) if isinstance(spec, str) else spec
        if spec not in self.model_.grid:
            raise SpecError(f"{spec} is not in the fitted grid")
        return spec

    def extract(self, spec=None) -> ExtractedModel:
        check_is_fitted(self, "model_")
        return extract(self.model_, self._spec(spec))

    def transform(self, X, spec=None) -> list[np.ndarray]:
        """Frame log-posteriors per utterance."""
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.n_features_in_)
        sub = self.extract(spec)
        data = ArrayCorpus(X)
        b = data.batch(np.arange(len(X)))
        lp = sub.forward(b.features, b.lengths).data
        return [lp[i, :n] for i, n in enumerate(b.lengths)]

    def predict(self, X, spec=None) -> list[list[int]]:
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.n_features_in_)
        sub = self.extract(spec)
        return decode_batches(sub.forward, ArrayCorpus(X), range(len(X)))

    def score(self, X, y, spec=None) -> float:
        """``1 - TER`` of the chosen sub-network."""
        X = check_sequences(X, getattr(self, "n_features_in_", None))
        y = check_targets(y, len(X))
        hyps = self.predict(X, spec)
        errs = score_hypotheses(hyps, [t.tolist() for t in y])
        return 1.0 - corpus_ter(errs, [len(t) for t in y])
