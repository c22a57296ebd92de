"""Greedy CTC decoding, token error rate, the matched-pairs significance test
and report assembly."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .losses import BLANK
from .supernet import ratio_from_counts

Z_CRITICAL = 1.96  # two-sided, alpha = 0.05


class ReportError(ValueError):
    pass


# -- decoding ---------------------------------------------------------------------------


def greedy_ctc_decode(log_posteriors, length: int | None = None) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    lp = np.asarray(getattr(log_posteriors, "data", log_posteriors))
    if length is not None:
        lp = lp[:length]
    path = lp.argmax(axis=-1)
    out, prev = [], None
    for k in path.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def decode_batches(forward: Callable, corpus, indices: Sequence[int], batch_size: int = 32) -> list[list[int]]:
    """Greedy hypotheses for ``indices`` using ``forward(features, lengths) -> log-posteriors``."""
    hyps = []
    indices = list(indices)
    for start in range(0, len(indices), batch_size):
        b = corpus.batch(indices[start : start + batch_size])
        lp = forward(b.features, b.lengths)
        lp = np.asarray(getattr(lp, "data", lp))
        hyps.extend(greedy_ctc_decode(lp[i], int(n)) for i, n in enumerate(b.lengths))
    return hyps


# -- scoring ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(a: Sequence, b: Sequence) -> int:
    return token_error_rate(a, b)[0].total


def token_error_rate(hyp: Sequence, ref: Sequence) -> tuple[ErrorCounts, float]:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    The rate is ``(S + D + I) / len(ref)``; an empty reference uses a
    denominator of 1, so its rate is the number of inserted tokens.
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    # backtrace, preferring match/substitution, then deletion, then insertion
    s = de = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            de += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    counts = ErrorCounts(int(s), de, ins)
    return counts, counts.total / max(n, 1)


def corpus_ter(errors: Sequence[int], ref_lengths: Sequence[int]) -> float:
    """Pooled rate over utterances with a nonempty reference."""
    errs = sum(e for e, n in zip(errors, ref_lengths) if n > 0)
    words = sum(n for n in ref_lengths if n > 0)
    return errs / words if words else 0.0


# -- significance -------------------------------------------------------------------------


@dataclass(frozen=True)
class SignificanceResult:
    z: float
    significant: bool

    def __iter__(self):
        return iter((self.z, self.significant))


def mapsswe(errors_a: Sequence[int], errors_b: Sequence[int], critical: float = Z_CRITICAL) -> SignificanceResult:
    """Matched-pairs test on per-utterance error counts.

    Positive ``z`` means system A makes more errors than B. Zero-variance
    differences with a nonzero mean give ``z = +/-inf`` (significant); all
    zero differences give ``z = 0``.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired error vectors must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("the matched-pairs test needs at least two segments")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        z = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
    else:
        z = mean / (sd / math.sqrt(n))
    return SignificanceResult(z, bool(abs(z) > critical))


# -- runs and reports ---------------------------------------------------------------------


@dataclass
class EvalRun:
    """Scored output of one system on one split."""

    name: str
    spec: str
    mode: str
    split: str
    corpus_checksum: str
    utterances: list[int]
    errors: list[int]
    ref_lengths: list[int]
    n_quantizable: int
    n_fixed: int
    bits: int
    hypotheses: list[list[int]] = field(default_factory=list)

    @property
    def ter(self) -> float:
        return corpus_ter(self.errors, self.ref_lengths)

    @property
    def n_params(self) -> int:
        return self.n_quantizable + self.n_fixed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRun":
        return cls(**d)


def score_hypotheses(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> list[int]:
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    return [token_error_rate(h, r)[0].total for h, r in zip(hyps, refs)]


@dataclass
class ReportRow:
    name: str
    spec: str
    mode: str
    ter: float
    n_params: int
    compression_ratio: float
    vs_baseline: str = ""
    z_baseline: float | None = None
    vs_individual: str = ""
    z_individual: float | None = None


@dataclass
class EvalReport:
    split: str
    baseline: str
    corpus_checksum: str
    rows: list[ReportRow]

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v

        return {
            "split": self.split,
            "baseline": self.baseline,
            "corpus_checksum": self.corpus_checksum,
            "critical_z": Z_CRITICAL,
            "rows": [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        """Aligned plain-text table. ``*``: significantly better than the
        individually trained system of the same spec; a dagger: no significant
        difference from it."""
        header = ["System", "Architecture", "Mode", "#Param", "Ratio", "TER(%)", "vs base", "vs indiv."]
        lines = [
            [r.name, r.spec, r.mode, f"{r.n_params:,}", f"{r.compression_ratio:.2f}x", f"{100 * r.ter:.2f}",
             r.vs_baseline or "-", r.vs_individual or "-"]
            for r in self.rows
        ]
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(header)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        out = [f"split={self.split} baseline={self.baseline}", fmt(header), fmt(["-" * w for w in widths])]
        out += [fmt(l) for l in lines]
        return "\n".join(out) + "\n"


def _mark(z: float, significant: bool) -> str:
    # z > 0: the first argument (the reference system) has more errors
    if not significant:
        return "same"
    return "better" if z > 0 else "worse"


def build_report(runs: Iterable[EvalRun], baseline_name: str) -> EvalReport:
    runs = list(runs)
    if not runs:
        raise ReportError("no runs to report")
    by_name = {r.name: r for r in runs}
    if len(by_name) != len(runs):
        raise ReportError("run names must be unique")
    if baseline_name not in by_name:
        raise ReportError(f"baseline {baseline_name!r} not among runs {sorted(by_name)}")
    base = by_name[baseline_name]
    for r in runs:
        if r.corpus_checksum != base.corpus_checksum:
            raise ReportError(f"{r.name} was evaluated on a different corpus than {base.name}")
        if r.split != base.split or r.utterances != base.utterances:
            raise ReportError(f"{r.name} was evaluated on a different utterance set than {base.name}")
    if base.bits != 32:
        raise ReportError("the baseline system must be full precision")
    individual = {r.spec: r for r in runs if r.mode == "individual"}

    rows = []
    single = len(runs) == 1
    for r in runs:
        ratio = ratio_from_counts(base.n_params, r.n_quantizable, r.bits, r.n_fixed)
        row = ReportRow(r.name, r.spec, r.mode, r.ter, r.n_params, ratio)
        if not single and r.name != baseline_name:
            z, sig = mapsswe(base.errors, r.errors)
            row.vs_baseline, row.z_baseline = _mark(z, sig), z
        partner = individual.get(r.spec)
        if not single and r.mode != "individual" and partner is not None:
            z, sig = mapsswe(partner.errors, r.errors)
            row.z_individual = z
            row.vs_individual = "†" if not sig else ("*" if z > 0 else "worse")
        rows.append(row)
    rows.sort(key=lambda row: (row.compression_ratio, row.mode != "individual", row.name))
    return EvalReport(base.split, baseline_name, base.corpus_checksum, rows)
