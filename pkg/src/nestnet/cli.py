"""``nestnet`` command line: gen-data, train, extract, eval, report.

Results go to stdout; failures go to stderr as one JSON object. Exit codes:
0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import fileformat
from .config import ConfigError, RunConfig
from .data import CorpusError, ToyCorpus
from .encoder import SpecError, SubnetSpec
from .evaluation import EvalRun, ReportError, build_report
from .experiment import evaluate_many, thread_count
from .supernet import ExtractedModel, Grid, SupernetModel, extract
from .trainer import MODES, Trainer, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    corpus = cfg.corpus()
    corpus.save(args.out)
    _emit({
        "path": str(args.out),
        "n_utts": len(corpus),
        "d_in": corpus.d_in,
        "vocab": corpus.vocab,
        "splits": {k: v[1] - v[0] for k, v in corpus.splits.items()},
        "checksum": corpus.checksum(),
    })
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    corpus = ToyCorpus.load(args.corpus)
    out = Path(args.out)
    if args.resume and out.exists():
        trainer = Trainer.from_checkpoint(out, corpus)
    else:
        mode = args.mode or cfg.train.get("mode", "all_in_one_kl")
        if mode == "individual":
            spec = SubnetSpec.parse(args.spec) if args.spec else cfg.baseline
            enc, grid = cfg.encoder_config(spec), Grid.single(spec)
        else:
            if args.spec:
                raise UsageError("--spec only applies to --mode individual")
            enc, grid = cfg.encoder_config(), cfg.grid
        trainer = Trainer.create(enc, grid, corpus, cfg.train_config(mode=mode), cfg.model["policy"])
        if args.metrics:
            Path(args.metrics).write_text("")
    log = None
    if args.verbose:
        log = lambda r: print(json.dumps({"step": r["step"], "total": r["total"]}), file=sys.stderr)
    trainer.run(until=args.until, metrics_path=args.metrics, checkpoint_path=out, log=log)
    _emit({
        "checkpoint": str(out),
        "mode": trainer.config.mode,
        "step": trainer.step_count,
        "specs": [str(s) for s in trainer.specs],
        "train_seconds": round(trainer.wall_seconds, 3),
    })
    return EXIT_OK


def _load_supernet(path) -> SupernetModel:
    return SupernetModel.from_container(*fileformat.read(path))


def cmd_extract(args) -> int:
    model = _load_supernet(args.checkpoint)
    source_bytes = Path(args.checkpoint).stat().st_size
    stored = len(fileformat.dumps(model.meta(), model.tensors()))
    if args.all:
        specs = model.specs()
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [(s, out_dir / f"{s}.aio") for s in specs]
    else:
        if not args.spec:
            raise UsageError("give --spec or --all")
        targets = [(SubnetSpec.parse(args.spec), Path(args.out))]
    written = []
    for spec, path in targets:
        n = extract(model, spec).save(path)
        written.append({"spec": str(spec), "path": str(path), "bytes": n})
    _emit({"source": str(args.checkpoint), "source_bytes": source_bytes, "supernet_bytes": stored, "models": written})
    return EXIT_OK


def _as_extracted(path) -> ExtractedModel:
    meta, tensors = fileformat.read(path)
    if meta.get("kind") == "extracted":
        return ExtractedModel.from_container(meta, tensors)
    model = SupernetModel.from_container(meta, tensors)
    if len(model.grid) != 1:
        raise UsageError(f"{path} holds {len(model.grid)} sub-networks; run extract first")
    sub = extract(model, model.specs()[0])
    if meta.get("kind") == "checkpoint":
        sub.source["mode"] = meta["train_config"]["mode"]
    return sub


def _write_report(runs: list[EvalRun], baseline: str, out_dir: Path | None, fmt: str) -> None:
    report = build_report(runs, baseline)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(report.render())
        (out_dir / "report.json").write_text(report.to_json())
    sys.stdout.write(report.render() if fmt == "text" else report.to_json())


def cmd_eval(args) -> int:
    corpus = ToyCorpus.load(args.corpus)
    names = args.names.split(",") if args.names else [Path(p).stem for p in args.models]
    if len(names) != len(args.models):
        raise UsageError("--names must list one name per model file")
    items = [(_as_extracted(p), n, None) for p, n in zip(args.models, names)]
    runs = evaluate_many(items, corpus, args.split, thread_count())
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "runs.json").write_text(json.dumps([r.to_dict() for r in runs], sort_keys=True) + "\n")
    _write_report(runs, args.baseline or names[0], out_dir, args.format)
    return EXIT_OK


def cmd_report(args) -> int:
    runs = []
    for path in args.runs:
        data = json.loads(Path(path).read_text())
        runs.extend(EvalRun.from_dict(d) for d in (data if isinstance(data, list) else [data]))
    baseline = args.baseline or runs[0].name
    _write_report(runs, baseline, Path(args.out_dir) if args.out_dir else None, args.format)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestnet", description="Train, extract and score nested all-in-one speech encoders.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the synthetic corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train individually or all-in-one")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--spec", help="architecture for --mode individual, e.g. 4-64-32bit")
    t.add_argument("--metrics", help="JSONL metrics log")
    t.add_argument("--until", type=int, help="stop after this step (resume later with --resume)")
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="slice sub-networks out of a supernet")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--spec")
    e.add_argument("--all", action="store_true", help="extract every grid spec into the --out directory")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="decode and score model files")
    v.add_argument("models", nargs="+")
    v.add_argument("--corpus", required=True)
    v.add_argument("--split", default="test")
    v.add_argument("--names", help="comma-separated system names (default: file stems)")
    v.add_argument("--baseline", help="name of the full-precision reference system")
    v.add_argument("--out-dir")
    v.add_argument("--format", choices=("text", "json"), default="text")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="rebuild the report from saved runs.json files")
    r.add_argument("runs", nargs="+")
    r.add_argument("--baseline")
    r.add_argument("--out-dir")
    r.add_argument("--format", choices=("text", "json"), default="text")
    r.set_defaults(func=cmd_report)
    return p


def _fail(code: int, exc: Exception) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    field = getattr(exc, "field", None)
    if field:
        err["field"] = field
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, SpecError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (fileformat.FormatError, CorpusError, ReportError, TrainingDiverged, ValueError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
