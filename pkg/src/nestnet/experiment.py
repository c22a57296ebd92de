"""End-to-end comparison: one all-in-one supernet versus individually trained
systems of every grid spec, plus a full-precision baseline."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .config import RunConfig
from .data import ToyCorpus
from .encoder import SubnetSpec
from .evaluation import EvalReport, EvalRun, build_report, decode_batches, score_hypotheses
from .supernet import ExtractedModel, Grid, enumerate_grid, extract, extract_all
from .trainer import Trainer


def thread_count(default: int = 1) -> int:
    """Worker cap from ``NESTNET_THREADS`` (minimum 1)."""
    raw = os.environ.get("NESTNET_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"NESTNET_THREADS must be an integer, got {raw!r}") from None


def evaluate_model(model: ExtractedModel, corpus: ToyCorpus, split: str = "test", name: str | None = None,
                   mode: str | None = None, batch_size: int = 50) -> EvalRun:
    indices = corpus.split_indices(split).tolist()
    hyps = decode_batches(model.forward, corpus, indices, batch_size)
    refs = [corpus.utterances[i][0].tolist() for i in indices]
    nq, nf = model.param_count()
    return EvalRun(
        name=name or str(model.spec),
        spec=str(model.spec),
        mode=mode or model.source.get("mode") or "individual",
        split=split,
        corpus_checksum=corpus.checksum(),
        utterances=indices,
        errors=score_hypotheses(hyps, refs),
        ref_lengths=[len(r) for r in refs],
        n_quantizable=nq,
        n_fixed=nf,
        bits=model.spec.bits,
        hypotheses=hyps,
    )


def evaluate_many(items: Sequence[tuple[ExtractedModel, str, str | None]], corpus: ToyCorpus, split: str = "test",
                  threads: int | None = None) -> list[EvalRun]:
    """Evaluate ``(model, name, mode)`` triples, in parallel if allowed; results keep input order."""
    threads = thread_count() if threads is None else threads
    job = lambda item: evaluate_model(item[0], corpus, split, item[1], item[2])
    if threads <= 1 or len(items) <= 1:
        return [job(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, items))


@dataclass
class ComparisonResult:
    report: EvalReport
    runs: list[EvalRun]
    train_seconds: dict[str, float] = field(default_factory=dict)

    def ter(self, name: str) -> float:
        return next(r.ter for r in self.runs if r.name == name)

    @property
    def individual_seconds(self) -> float:
        return sum(v for k, v in self.train_seconds.items() if k.startswith("individual/"))

    @property
    def allinone_seconds(self) -> float:
        return self.train_seconds["all_in_one"]


def run_comparison(cfg: RunConfig, workdir: str | Path | None = None, mode: str = "all_in_one_kl",
                   log: Callable[[str], None] | None = None) -> ComparisonResult:
    """Train the baseline, every individual spec and one supernet; evaluate on ``test``."""
    say = log or (lambda msg: None)
    workdir = Path(workdir) if workdir else None
    if workdir:
        workdir.mkdir(parents=True, exist_ok=True)
    corpus = cfg.corpus()
    seconds: dict[str, float] = {}
    items: list[tuple[ExtractedModel, str, str]] = []

    def fit_individual(spec: SubnetSpec, label: str) -> ExtractedModel:
        tc = cfg.train_config(mode="individual")
        trainer = Trainer.create(cfg.encoder_config(spec), Grid.single(spec), corpus, tc, cfg.model["policy"])
        trainer.run()
        seconds[label] = trainer.wall_seconds
        say(f"{label}: {trainer.wall_seconds:.1f}s")
        if workdir:
            trainer.save_checkpoint(workdir / f"{label.replace('/', '_')}.ckpt")
        return extract(trainer.model, spec)

    items.append((fit_individual(cfg.baseline, "baseline"), "baseline", "individual"))
    specs = enumerate_grid(cfg.grid)
    for spec in specs:
        items.append((fit_individual(spec, f"individual/{spec}"), f"ind:{spec}", "individual"))

    trainer = Trainer.create(cfg.encoder_config(), cfg.grid, corpus, cfg.train_config(mode=mode), cfg.model["policy"])
    trainer.run()
    seconds["all_in_one"] = trainer.wall_seconds
    say(f"all_in_one: {trainer.wall_seconds:.1f}s")
    if workdir:
        trainer.save_checkpoint(workdir / "all_in_one.ckpt")
    for spec, sub in extract_all(trainer.model, specs).items():
        items.append((sub, f"aio:{spec}", mode))

    runs = evaluate_many(items, corpus, "test")
    report = build_report(runs, "baseline")
    if workdir:
        (workdir / "report.txt").write_text(report.render())
        (workdir / "report.json").write_text(report.to_json())
    return ComparisonResult(report, runs, seconds)
