import itertools
import json
import math

import numpy as np
import pytest

from nestnet.evaluation import (
    ErrorCounts,
    EvalRun,
    ReportError,
    build_report,
    corpus_ter,
    greedy_ctc_decode,
    mapsswe,
    token_error_rate,
    edit_distance,
)

from oracles import brute_edit_distance

A, B = 1, 2


def path_posteriors(path, vocab=4):
    lp = np.full((len(path), vocab), np.log(0.1 / (vocab - 1)))
    lp[np.arange(len(path)), path] = np.log(0.9)
    return lp


# -- decoding --------------------------------------------------------------------------


def test_decode_collapses_repeats():
    assert greedy_ctc_decode(path_posteriors([A, A, 0, B])) == [A, B]


def test_decode_all_blank():
    assert greedy_ctc_decode(path_posteriors([0, 0, 0])) == []


def test_decode_blank_separates_repeats():
    assert greedy_ctc_decode(path_posteriors([A, 0, A])) == [A, A]


def test_decode_respects_length():
    assert greedy_ctc_decode(path_posteriors([A, 0, B, B]), length=2) == [A]


# -- error rate ---------------------------------------------------------------------------------


def test_ter_identical():
    assert token_error_rate([1, 2, 3], [1, 2, 3]) == (ErrorCounts(0, 0, 0), 0.0)


def test_ter_one_substitution():
    counts, rate = token_error_rate(["a", "b", "d"], ["a", "b", "c"])
    assert counts == ErrorCounts(1, 0, 0)
    assert rate == pytest.approx(1 / 3)


def test_ter_two_insertions():
    counts, rate = token_error_rate(["a", "x", "b", "y"], ["a", "b"])
    assert counts == ErrorCounts(0, 0, 2)
    assert rate == 1.0


def test_ter_deletions_and_empty_reference():
    assert token_error_rate([], [1, 2]) == (ErrorCounts(0, 2, 0), 1.0)
    assert token_error_rate([3, 3], []) == (ErrorCounts(0, 0, 2), 2.0)


def test_edit_distance_matches_brute_force_and_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.integers(1, 4, size=int(rng.integers(0, 6))).tolist()
        b = rng.integers(1, 4, size=int(rng.integers(0, 6))).tolist()
        assert edit_distance(a, b) == brute_edit_distance(a, b)
        assert edit_distance(a, b) == edit_distance(b, a)


def test_corpus_ter_skips_empty_references():
    assert corpus_ter([1, 3, 0], [4, 0, 6]) == pytest.approx(0.1)
    assert corpus_ter([2], [0]) == 0.0


# -- significance --------------------------------------------------------------------------------


def test_mapsswe_identical_errors():
    z, sig = mapsswe([1, 2, 3], [1, 2, 3])
    assert z == 0.0 and not sig


def test_mapsswe_zero_variance_nonzero_mean():
    z, sig = mapsswe([2, 2, 2, 2], [1, 1, 1, 1])
    assert z == math.inf and sig
    z, _ = mapsswe([1, 1], [2, 2])
    assert z == -math.inf


def test_mapsswe_hand_value():
    d = [1, 0] * 5
    z, sig = mapsswe(d, [0] * 10)
    assert abs(z - 3.0) < 1e-9
    assert sig
    assert np.std(d, ddof=1) == pytest.approx(0.527, abs=1e-3)


def test_mapsswe_sign_means_first_system_worse():
    z, _ = mapsswe([3, 2, 4, 3], [1, 1, 2, 0])
    assert z > 0


def test_mapsswe_flag_flips_at_critical_value():
    a, b = [1, 0, 2, 1, 0], [0, 0, 1, 1, 1]
    z, _ = mapsswe(a, b)
    assert mapsswe(a, b, critical=abs(z)).significant is False
    assert mapsswe(a, b, critical=np.nextafter(abs(z), 0)).significant is True


def test_mapsswe_errors():
    with pytest.raises(ValueError):
        mapsswe([1], [0])
    with pytest.raises(ValueError):
        mapsswe([1, 2], [0])


# -- reports -----------------------------------------------------------------------------------------


def run(name, errors, spec="2-8-32bit", mode="individual", bits=32, nq=100, nf=50, checksum="c0", utts=None):
    n = len(errors)
    return EvalRun(name, spec, mode, "test", checksum, utts or list(range(n)), list(errors), [4] * n, nq, nf, bits)


def test_single_run_report_has_no_marks():
    rep = build_report([run("base", [1, 0, 2])], "base")
    assert len(rep.rows) == 1
    row = rep.rows[0]
    assert row.vs_baseline == "" and row.vs_individual == "" and row.compression_ratio == 1.0
    assert "base" in rep.render()


def test_run_against_itself_is_not_significant():
    rep = build_report([run("base", [1, 0, 2, 1]), run("copy", [1, 0, 2, 1])], "base")
    assert {r.name: r.vs_baseline for r in rep.rows}["copy"] == "same"


def test_report_marks_and_ordering():
    base = run("base", [2] * 10 + [3] * 10)
    ind = run("ind", [1, 2] * 10, spec="1-4-8bit", bits=8, nq=40, nf=20)
    better = run("aio", [0, 1] * 10, spec="1-4-8bit", mode="all_in_one_kl", bits=8, nq=40, nf=20)
    same = run("aio2", [1, 2] * 9 + [2, 1], spec="1-4-8bit", mode="all_in_one_kl", bits=8, nq=40, nf=20)
    rep = build_report([better, base, same, ind], "base")
    rows = {r.name: r for r in rep.rows}
    assert [r.name for r in rep.rows] == ["base", "ind", "aio", "aio2"]
    assert rows["aio"].vs_baseline == "better" and rows["aio"].vs_individual == "*"
    assert rows["aio2"].vs_individual == "†"
    assert rows["ind"].vs_individual == ""
    assert rows["aio"].compression_ratio == pytest.approx(150 * 32 / (40 * 8 + 20 * 32))
    doc = json.loads(rep.to_json())
    assert doc["baseline"] == "base" and len(doc["rows"]) == 4


def test_report_infinite_z_serializes():
    rep = build_report([run("base", [2, 2, 2]), run("b", [1, 1, 1])], "base")
    rows = json.loads(rep.to_json())["rows"]
    assert {r["name"]: r["z_baseline"] for r in rows}["b"] == "inf"


def test_report_rejects_mismatched_sets():
    with pytest.raises(ReportError):
        build_report([run("base", [1, 2]), run("x", [1, 2], checksum="c1")], "base")
    with pytest.raises(ReportError):
        build_report([run("base", [1, 2]), run("x", [1, 2], utts=[0, 5])], "base")
    with pytest.raises(ReportError):
        build_report([run("base", [1, 2], bits=8)], "base")
    with pytest.raises(ReportError):
        build_report([run("base", [1, 2])], "missing")


def test_report_is_pure_function_of_runs():
    runs = [run("base", [2, 3, 1, 2]), run("a", [1, 2, 1, 1], spec="1-4-4bit", bits=4, nq=40)]
    again = [EvalRun.from_dict(json.loads(json.dumps(r.to_dict()))) for r in runs]
    assert build_report(runs, "base").to_json() == build_report(again, "base").to_json()
