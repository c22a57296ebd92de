import json
from collections import Counter

import numpy as np
import pytest

from nestnet.autograd import Tensor, gradients
from nestnet.data import generate_corpus
from nestnet.encoder import EncoderConfig, SubnetSpec
from nestnet.losses import LossWeights, default_loss_weights
from nestnet.supernet import Grid, enumerate_grid
from nestnet.trainer import (
    AdamW,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    clip_global_norm,
    lr_at_step,
    make_streams,
    sample_training_set,
    spec_losses,
)

GRID = Grid((1, 2), (4, 8), (4, 8))


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(7, 120, (2, 4), 4, 6, 3, 0.3, {"train": 100, "dev": 20})


@pytest.fixture(scope="module")
def enc():
    return EncoderConfig(d_in=6, d_model=8, depth_max=2, ffn_max=8, heads=2, conv_kernel=3, vocab=6)


def trainer(enc, corpus, grid=GRID, **kw):
    cfg = dict(total_steps=20, peak_lr=3e-3, batch_size=4, seed=3)
    cfg.update(kw)
    weights = cfg.pop("weights", None)
    return Trainer.create(enc, grid, corpus, TrainConfig(**cfg), weights=weights)


def state_bytes(t):
    return b"".join(p.data.tobytes() for p in t.model.params.values())


# -- schedule -------------------------------------------------------------------------------------


def test_lr_examples():
    assert lr_at_step(50, 1000, 3e-5) == pytest.approx(1.5e-5, rel=1e-12)
    assert lr_at_step(100, 1000, 3e-5) == pytest.approx(3e-5, rel=1e-12)
    assert lr_at_step(1000, 1000, 3e-5) == 0.0
    assert lr_at_step(0, 1000, 3e-5) == 0.0
    assert lr_at_step(550, 1000, 3e-5) == pytest.approx(1.5e-5, rel=1e-12)


def test_lr_step_out_of_range():
    with pytest.raises(ValueError):
        lr_at_step(1001, 1000, 1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="joint")


# -- sampling ------------------------------------------------------------------------------------------


def test_sampling_frequencies_uniform_over_middle():
    specs = enumerate_grid(Grid((8, 12), (1024, 2048), (4, 8)))
    rng = np.random.default_rng(0)
    counts = Counter()
    n = 10_000
    for _ in range(n):
        chosen = sample_training_set(specs, rng)
        assert len(chosen) == 3 and chosen[0] == specs[0] and chosen[1] == specs[-1]
        counts[chosen[2]] += 1
    assert set(counts) == set(specs[1:-1])
    for spec in specs[1:-1]:
        assert abs(counts[spec] / n - 1 / 6) <= 0.02


def test_small_grids_are_returned_whole():
    two = enumerate_grid(Grid((2,), (8,), (4, 8)))
    assert sample_training_set(two, np.random.default_rng(0)) == two
    one = enumerate_grid(Grid((2,), (8,), (8,)))
    assert sample_training_set(one, np.random.default_rng(0)) == one


def test_streams_are_independent():
    a, b = make_streams(5), make_streams(5)
    a["init"].standard_normal(100)
    assert a["sampling"].integers(0, 1 << 30) == b["sampling"].integers(0, 1 << 30)


# -- optimizer ------------------------------------------------------------------------------------------


def test_adamw_single_bias_corrected_step():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = AdamW(lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    opt.step({"w": w}, {"w": np.array(0.5)})
    assert float(opt.m["w"]) == pytest.approx(0.05)
    assert float(opt.v["w"]) == pytest.approx(2.5e-4)
    # m_hat = 0.05/0.1 = 0.5, v_hat = 2.5e-4/0.001 = 0.25
    assert float(w.data) == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-12)


def test_adamw_decay_is_decoupled():
    w = Tensor(np.array(2.0), requires_grad=True)
    AdamW(lr=0.1, weight_decay=0.5).step({"w": w}, {"w": np.array(0.0)})
    assert float(w.data) == pytest.approx(2.0 * (1 - 0.05))
    w = Tensor(np.array(2.0), requires_grad=True)
    AdamW(lr=0.1, weight_decay=0.5).step({"w": w}, {"w": np.array(0.0)}, decay=lambda n: False)
    assert float(w.data) == 2.0


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


# -- steps ---------------------------------------------------------------------------------------------------


def test_largest_spec_in_every_step(enc, corpus):
    t = trainer(enc, corpus)
    for rec in t.run(until=5):
        assert str(t.specs[0]) in rec["loss"] and str(t.specs[-1]) in rec["loss"]
        assert len(rec["loss"]) == 3 and len(rec["kl"]) == 2


def test_individual_mode_is_plain_single_system(enc, corpus):
    spec = SubnetSpec(2, 8, 8)
    t = trainer(enc, corpus, Grid.single(spec), mode="individual")
    batch = corpus.batch(corpus.split_indices("train")[:4])
    expected = spec_losses(t.model, batch, [spec], 0.2)[0][spec]
    t.draw_batch = lambda: batch
    rec = t.step()
    assert rec["loss"] == {str(spec): float(expected.data)} and rec["total"] == float(expected.data)
    assert rec["kl"] == {}


def test_individual_mode_needs_single_spec(enc, corpus):
    with pytest.raises(ValueError):
        trainer(enc, corpus, mode="individual")


def test_kl_mode_with_zero_lambda2_matches_plain_mode(enc, corpus):
    specs = enumerate_grid(GRID)
    base = default_loss_weights(specs, GRID.largest)
    zero = LossWeights(base.lambda_ctc, base.lambda1, {s: 0.0 for s in specs})
    a = trainer(enc, corpus, mode="all_in_one_kl", weights=zero)
    b = trainer(enc, corpus, mode="all_in_one", weights=zero)
    ra, rb = a.run(until=6), b.run(until=6)
    assert [r["loss"] for r in ra] == [r["loss"] for r in rb]
    assert [r["total"] for r in ra] == [r["total"] for r in rb]
    assert state_bytes(a) == state_bytes(b)


def test_kl_gradient_never_reaches_teacher(enc, corpus):
    t = trainer(enc, corpus)
    batch = corpus.batch(np.arange(4))
    specs = [t.specs[0], t.specs[-1]]
    _, kls, post = spec_losses(t.model, batch, specs, 0.2, with_kl=True)
    teacher = post[specs[0]]
    kl = kls[specs[1]]

    # walk the recorded graph from the KL term
    seen, stack, cut = set(), [kl], []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "stop_gradient":
            cut.append(node.sg_source)
        stack.extend(node.parents)
    assert id(teacher) not in seen
    assert any(src is teacher for src in cut)
    np.testing.assert_array_equal(gradients(kl, {"t": teacher})["t"], np.zeros(teacher.shape))


def test_metrics_lines(tmp_path, enc, corpus):
    path = tmp_path / "m.jsonl"
    trainer(enc, corpus).run(until=3, metrics_path=path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3]
    assert {"step", "lr", "loss", "kl", "elapsed"} <= set(lines[0])


def test_same_seed_identical_checkpoints(tmp_path, enc, corpus):
    for name in ("a", "b"):
        trainer(enc, corpus, total_steps=8).run(checkpoint_path=tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_resume_equals_uninterrupted(tmp_path, enc, corpus):
    full = trainer(enc, corpus, total_steps=10)
    full.run(checkpoint_path=tmp_path / "full")
    part = trainer(enc, corpus, total_steps=10)
    part.run(until=4, checkpoint_path=tmp_path / "part")
    resumed = Trainer.from_checkpoint(tmp_path / "part", corpus)
    assert resumed.step_count == 4
    resumed.run(checkpoint_path=tmp_path / "resumed")
    assert (tmp_path / "resumed").read_bytes() == (tmp_path / "full").read_bytes()


def test_resume_rejects_other_corpus(tmp_path, enc, corpus):
    trainer(enc, corpus, total_steps=2).run(checkpoint_path=tmp_path / "c")
    other = generate_corpus(8, 120, (2, 4), 4, 6, 3, 0.3, {"train": 100, "dev": 20})
    with pytest.raises(ValueError):
        Trainer.from_checkpoint(tmp_path / "c", other)


def test_non_finite_loss_names_spec(enc, corpus, monkeypatch):
    import nestnet.trainer as tr
    from nestnet.autograd import NonFiniteError

    t = trainer(enc, corpus)
    real = tr.ctc_loss

    def failing(lp, *a, **kw):
        if failing.calls == 1:  # second sampled spec (the smallest)
            raise NonFiniteError("log of zero")
        failing.calls += 1
        return real(lp, *a, **kw)

    failing.calls = 0
    monkeypatch.setattr(tr, "ctc_loss", failing)
    with pytest.raises(TrainingDiverged, match=str(t.specs[-1])):
        t.step()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exploding_gradient_aborts(enc, corpus):
    t = trainer(enc, corpus)
    for name in ("ctc.w", "frontend.w"):
        t.model.params[name].data = t.model.params[name].data * 1e200
    with pytest.raises(TrainingDiverged, match="gradient"):
        t.step()


def test_500_step_run_reduces_largest_loss(enc, corpus):
    t = trainer(enc, corpus, total_steps=500, batch_size=8)
    records = t.run()
    largest = str(t.specs[0])
    assert records[499]["loss"][largest] < records[49]["loss"][largest]
    assert all(np.isfinite(v) for v in records[-1]["loss"].values())
