import hashlib
import json

import pytest

from nestnet.cli import main

TINY = {
    "data": {"seed": 5, "splits": {"train": 40, "dev": 5, "test": 12}, "len_range": [2, 4], "vocab": 4,
             "d_in": 6, "frames_per_token": 3, "noise_sigma": 0.3},
    "model": {"d_model": 8, "heads": 2, "conv_kernel": 3},
    "grid": {"depths": [1, 2], "widths": [4, 8], "precisions": [4, 8]},
    "baseline": "2-8-32bit",
    "train": {"seed": 1, "total_steps": 6, "peak_lr": 0.003, "batch_size": 4},
}


def write_config(path, cfg=TINY):
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def corpus(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    code, _, _ = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "corpus.bin")
    assert code == 0
    return cfg, tmp_path / "corpus.bin"


def test_gen_data_summary(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    code, out, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "c.bin")
    assert code == 0 and err == ""
    summary = json.loads(out)
    assert summary["n_utts"] == 57 and summary["d_in"] == 6
    assert summary["splits"] == {"train": 40, "dev": 5, "test": 12}


def test_gen_data_is_reproducible(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    for name in ("a.bin", "b.bin"):
        assert run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / name)[0] == 0
    assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")


def test_missing_seed_is_config_error(tmp_path, capsys):
    bad = json.loads(json.dumps(TINY))
    del bad["data"]["seed"]
    code, out, err = run(capsys, "gen-data", "--config", write_config(tmp_path / "bad.json", bad), "--out", tmp_path / "c.bin")
    assert code == 2 and out == ""
    doc = json.loads(err)
    assert doc["exit_code"] == 2 and "seed" in doc["message"] and doc["field"] == "data.seed"


def test_unknown_key_rejected(tmp_path, capsys):
    bad = json.loads(json.dumps(TINY))
    bad["train"]["learning_rate"] = 1.0
    code, _, err = run(capsys, "gen-data", "--config", write_config(tmp_path / "bad.json", bad), "--out", tmp_path / "c.bin")
    assert code == 2 and "learning_rate" in err


def test_bad_usage_exits_2(capsys):
    assert run(capsys, "train")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_train_individual_then_eval_single_row(tmp_path, capsys, corpus):
    cfg, data = corpus
    ck = tmp_path / "base.ckpt"
    code, out, _ = run(capsys, "train", "--config", cfg, "--corpus", data, "--out", ck, "--mode", "individual")
    assert code == 0
    assert json.loads(out)["specs"] == ["2-8-32bit"]
    code, out, _ = run(capsys, "eval", ck, "--corpus", data, "--format", "json", "--out-dir", tmp_path / "rep")
    assert code == 0
    doc = json.loads(out)
    assert len(doc["rows"]) == 1 and doc["rows"][0]["vs_baseline"] == ""
    assert (tmp_path / "rep" / "report.txt").exists() and (tmp_path / "rep" / "runs.json").exists()


def test_all_in_one_extract_and_eval(tmp_path, capsys, corpus):
    cfg, data = corpus
    ck = tmp_path / "aio.ckpt"
    code, out, _ = run(capsys, "train", "--config", cfg, "--corpus", data, "--out", ck, "--metrics", tmp_path / "m.jsonl")
    assert code == 0 and len(json.loads(out)["specs"]) == 8
    code, out, _ = run(capsys, "extract", "--checkpoint", ck, "--all", "--out", tmp_path / "subs")
    assert code == 0
    info = json.loads(out)
    assert len(info["models"]) == 8
    assert all(m["bytes"] < info["supernet_bytes"] for m in info["models"])
    single = tmp_path / "one.aio"
    assert run(capsys, "extract", "--checkpoint", ck, "--spec", "1-4-4bit", "--out", single)[0] == 0
    assert single.read_bytes() == (tmp_path / "subs" / "1-4-4bit.aio").read_bytes()

    run(capsys, "train", "--config", cfg, "--corpus", data, "--out", tmp_path / "base.ckpt", "--mode", "individual")
    models = [tmp_path / "base.ckpt"] + sorted((tmp_path / "subs").iterdir())
    code, out, _ = run(capsys, "eval", *models, "--corpus", data, "--baseline", "base", "--out-dir", tmp_path / "rep")
    assert code == 0 and "1-4-4bit" in out
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert len(report["rows"]) == 9

    code, out2, _ = run(capsys, "report", tmp_path / "rep" / "runs.json", "--baseline", "base")
    assert code == 0 and out2 == out


def test_malformed_spec_exit_2(tmp_path, capsys, corpus):
    cfg, data = corpus
    ck = tmp_path / "aio.ckpt"
    run(capsys, "train", "--config", cfg, "--corpus", data, "--out", ck, "--until", "1")
    code, _, err = run(capsys, "extract", "--checkpoint", ck, "--spec", "8-1024", "--out", tmp_path / "x")
    assert code == 2 and "<depth>-<width>-<bits>bit" in err


def test_spec_outside_grid_exit_2(tmp_path, capsys, corpus):
    cfg, data = corpus
    ck = tmp_path / "aio.ckpt"
    run(capsys, "train", "--config", cfg, "--corpus", data, "--out", ck, "--until", "1")
    assert run(capsys, "extract", "--checkpoint", ck, "--spec", "2-8-6bit", "--out", tmp_path / "x")[0] == 2


def test_mismatched_corpus_checksum_exit_3(tmp_path, capsys, corpus):
    cfg, data = corpus
    ck = tmp_path / "base.ckpt"
    run(capsys, "train", "--config", cfg, "--corpus", data, "--out", ck, "--mode", "individual")
    run(capsys, "eval", ck, "--corpus", data, "--out-dir", tmp_path / "r1")
    other_cfg = json.loads(json.dumps(TINY))
    other_cfg["data"]["seed"] = 6
    write_config(tmp_path / "other.json", other_cfg)
    run(capsys, "gen-data", "--config", tmp_path / "other.json", "--out", tmp_path / "other.bin")
    run(capsys, "eval", ck, "--corpus", tmp_path / "other.bin", "--names", "other", "--out-dir", tmp_path / "r2")
    code, out, err = run(capsys, "report", tmp_path / "r1" / "runs.json", tmp_path / "r2" / "runs.json")
    assert code == 3 and out == "" and json.loads(err)["error"] == "ReportError"


def test_corrupt_checkpoint_exit_3(tmp_path, capsys, corpus):
    cfg, data = corpus
    (tmp_path / "junk.ckpt").write_bytes(b"not a model")
    assert run(capsys, "extract", "--checkpoint", tmp_path / "junk.ckpt", "--all", "--out", tmp_path / "x")[0] == 3


def test_interrupt_and_resume_matches_uninterrupted(tmp_path, capsys, corpus):
    cfg, data = corpus
    run(capsys, "train", "--config", cfg, "--corpus", data, "--out", tmp_path / "full.ckpt", "--metrics", tmp_path / "full.jsonl")
    run(capsys, "train", "--config", cfg, "--corpus", data, "--out", tmp_path / "part.ckpt", "--metrics", tmp_path / "part.jsonl",
        "--until", "3")
    code, out, _ = run(capsys, "train", "--config", cfg, "--corpus", data, "--out", tmp_path / "part.ckpt",
                       "--metrics", tmp_path / "part.jsonl", "--resume")
    assert code == 0 and json.loads(out)["step"] == 6
    assert (tmp_path / "part.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()

    def strip(path):
        return [{k: v for k, v in json.loads(line).items() if k != "elapsed"} for line in path.read_text().splitlines()]

    assert strip(tmp_path / "part.jsonl") == strip(tmp_path / "full.jsonl")


def test_thread_count_env(monkeypatch):
    from nestnet.experiment import thread_count

    monkeypatch.setenv("NESTNET_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.delenv("NESTNET_THREADS")
    assert thread_count() == 1
