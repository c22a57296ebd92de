"""Synthetic speech-like corpus.

Each token id owns a fixed Gaussian feature template; an utterance renders
every token as ``frames_per_token`` copies of its template plus i.i.d.
Gaussian noise. Repeated tokens produce one long run of identical frames,
so counting run length is what separates strong and weak models.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CORPUS_MAGIC = b"TOY1"


class CorpusError(ValueError):
    pass


@dataclass
class Batch:
    features: np.ndarray  # [B, T_max, d_in], zero padded
    lengths: np.ndarray  # [B]
    targets: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class ToyCorpus:
    vocab: int
    d_in: int
    frames_per_token: int
    noise_sigma: float
    seed: int
    len_range: tuple[int, int]
    templates: np.ndarray
    utterances: list[tuple[np.ndarray, np.ndarray]]
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utterances)

    def split_indices(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise CorpusError(f"no split named {name!r}; have {sorted(self.splits)}")
        lo, hi = self.splits[name]
        return np.arange(lo, hi)

    def batch(self, indices) -> Batch:
        return batch(self, indices)

    def tobytes(self) -> bytes:
        header = {
            "vocab": self.vocab,
            "d_in": self.d_in,
            "frames_per_token": self.frames_per_token,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "len_range": list(self.len_range),
            "splits": {k: list(v) for k, v in self.splits.items()},
            "token_lengths": [int(len(t)) for t, _ in self.utterances],
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [CORPUS_MAGIC, struct.pack("<I", len(hb)), hb, self.templates.astype("<f8").tobytes()]
        for tokens, _ in self.utterances:
            parts.append(np.asarray(tokens, dtype="<i4").tobytes())
        for _, feats in self.utterances:
            parts.append(np.ascontiguousarray(feats, dtype="<f8").tobytes())
        return b"".join(parts)

    def checksum(self) -> str:
        return hashlib.sha256(self.tobytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.tobytes())

    @classmethod
    def frombytes(cls, buf: bytes) -> "ToyCorpus":
        if buf[:4] != CORPUS_MAGIC:
            raise CorpusError("not a corpus file")
        (hlen,) = struct.unpack_from("<I", buf, 4)
        header = json.loads(buf[8 : 8 + hlen])
        pos = 8 + hlen
        V, d = header["vocab"], header["d_in"]
        templates = np.frombuffer(buf, "<f8", V * d, pos).reshape(V, d).copy()
        pos += 8 * V * d
        tokens = []
        for n in header["token_lengths"]:
            tokens.append(np.frombuffer(buf, "<i4", n, pos).astype(np.int64))
            pos += 4 * n
        utts = []
        fpt = header["frames_per_token"]
        for t in tokens:
            n = len(t) * fpt * d
            utts.append((t, np.frombuffer(buf, "<f8", n, pos).reshape(-1, d).copy()))
            pos += 8 * n
        if pos != len(buf):
            raise CorpusError("corpus file has trailing or missing bytes")
        return cls(
            V, d, fpt, header["noise_sigma"], header["seed"], tuple(header["len_range"]), templates, utts,
            {k: tuple(v) for k, v in header["splits"].items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "ToyCorpus":
        return cls.frombytes(Path(path).read_bytes())


def generate_corpus(
    seed: int,
    n_utts: int,
    len_range: Sequence[int],
    vocab: int,
    d_in: int,
    frames_per_token: int,
    noise_sigma: float,
    splits: dict[str, int] | None = None,
) -> ToyCorpus:
    """Deterministically render ``n_utts`` utterances.

    Token ids run 1..vocab (0 is reserved for the CTC blank). ``splits``
    maps split names to utterance counts, assigned to consecutive index
    ranges in insertion order; by default everything is ``train``.
    """
    lo, hi = (int(v) for v in len_range)
    if not 1 <= lo <= hi:
        raise CorpusError(f"invalid len_range {list(len_range)}")
    if vocab < 2:
        raise CorpusError("vocab must be at least 2")
    if n_utts < 1 or d_in < 1 or frames_per_token < 1 or noise_sigma < 0:
        raise CorpusError("n_utts, d_in and frames_per_token must be positive and noise_sigma nonnegative")
    splits = dict(splits or {"train": n_utts})
    if sum(splits.values()) != n_utts or any(v < 0 for v in splits.values()):
        raise CorpusError("split sizes must be nonnegative and sum to n_utts")

    template_rng, token_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    templates = template_rng.standard_normal((vocab, d_in))
    utts = []
    for _ in range(n_utts):
        n = int(token_rng.integers(lo, hi + 1))
        tokens = token_rng.integers(1, vocab + 1, size=n)
        frames = np.repeat(templates[tokens - 1], frames_per_token, axis=0)
        if noise_sigma > 0:
            frames = frames + noise_sigma * noise_rng.standard_normal(frames.shape)
        utts.append((tokens.astype(np.int64), frames))
    ranges, start = {}, 0
    for name, count in splits.items():
        ranges[name] = (start, start + count)
        start += count
    return ToyCorpus(vocab, d_in, frames_per_token, float(noise_sigma), int(seed), (lo, hi), templates, utts, ranges)


def batch(corpus: ToyCorpus, indices) -> Batch:
    """Zero-padded feature block for the given utterance indices."""
    indices = [int(i) for i in np.atleast_1d(indices)]
    if not indices:
        raise CorpusError("empty batch")
    items = [corpus.utterances[i] for i in indices]
    lengths = np.array([f.shape[0] for _, f in items], dtype=np.int64)
    block = np.zeros((len(items), int(lengths.max()), corpus.d_in))
    for b, (_, f) in enumerate(items):
        block[b, : f.shape[0]] = f
    return Batch(block, lengths, [t for t, _ in items])
