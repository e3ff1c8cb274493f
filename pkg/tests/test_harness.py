import math

import numpy as np
import pytest

from sonarnet.data import LabeledImageSet
from sonarnet.harness import (SCHEMAS, ExperimentConfig, SummaryRow, TrialResult, assert_disjoint,
                              emit_csv, minmax_table, preset, render_csv, run_tasks,
                              run_train_size_sweep, run_tl_vs_train_size, run_transfer_feature_size,
                              size_sweep_configs, summarize, summarize_trials,
                              transfer_chance_control)
from sonarnet.rng import stable_mix


def _square(shared, x):
    return shared["k"] * x * x


# ---------------------------------------------------------------- summaries

def test_summarize_population_std():
    row = summarize([1.0, 2.0, 3.0], value=5)
    assert row.mean == 2.0 and math.isclose(row.std, math.sqrt(2 / 3))
    assert (row.min, row.max, row.count) == (1.0, 3.0, 3)


def test_summarize_single_and_empty():
    row = summarize([0.7])
    assert row.std == 0.0 and row.min == row.max == 0.7
    with pytest.raises(ValueError):
        summarize([])


def test_summarize_trials_excludes_failures():
    trials = [TrialResult(("a",), 1, i, 0, accuracy=a) for i, a in enumerate([0.5, 0.7])]
    trials.append(TrialResult(("a",), 1, 2, 0, failed=True))
    trials.append(TrialResult(("a",), 2, 0, 0, failed=True))
    out = summarize_trials(trials)
    assert out[(("a",), 1)].count == 2 and out[(("a",), 1)].excluded == 1
    assert math.isclose(out[(("a",), 1)].mean, 0.6)
    assert out[(("a",), 2)].count == 0 and math.isnan(out[(("a",), 2)].mean)


def test_assert_disjoint():
    a = LabeledImageSet(np.zeros((2, 2, 2)), [0, 0], ["x"], ids=[0, 1])
    b = LabeledImageSet(np.zeros((1, 2, 2)), [0], ["x"], ids=[1])
    with pytest.raises(AssertionError):
        assert_disjoint(a, b, "t")
    assert_disjoint(a, LabeledImageSet(np.zeros((1, 2, 2)), [0], ["x"], ids=[2]), "t")


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(())
    with pytest.raises(ValueError):
        ExperimentConfig((4, 4))
    with pytest.raises(ValueError):
        ExperimentConfig((1,), trials=0)


# --------------------------------------------------------------------- CSV

def test_csv_headers_match_schemas():
    row = SummaryRow(10, 0.5, 0.1, 0.4, 0.6, 3)
    text = render_csv([row], "trainsize", seed=42)
    assert text == "# seed=42\nsamplesPerClass,meanAcc,stdAcc,minAcc,maxAcc\n10,50,10,40,60\n"
    assert render_csv([row], "tlsize").splitlines()[0] == "spc,meanTestAcc,stdTestAcc"
    assert render_csv([], "objsize").splitlines()[0].startswith("pixelImageSize,")
    t = render_csv([(8, row, row)], "transfer")
    assert t.splitlines() == [",".join(SCHEMAS["transfer"]), "8,50,10,50,10"]


def test_six_significant_digits_and_nan():
    row = SummaryRow(1, 1 / 3, math.nan, 0.0, 1.0, 1)
    assert render_csv([row], "tlsize").splitlines()[1] == "1,33.3333,nan"


def test_minmax_table_layout():
    rows = {("classic", "bn"): [SummaryRow(v, 0.5, 0, 0.25, 0.75, 1) for v in (1, 10)]}
    lines, header = minmax_table(rows, (1, 10), {("classic", "bn"): "classicCNN-BN"})
    text = render_csv(lines, "minmax", header=header).splitlines()
    assert text == ["model,stat,1,10", "classicCNN-BN,min,25,25", "classicCNN-BN,max,75,75"]


def test_emit_csv_byte_identical_and_unix_newlines(tmp_path):
    row = SummaryRow(16, 0.9, 0.01, 0.88, 0.91, 3)
    a = emit_csv([row], "objsize", tmp_path / "a.csv", seed=1)
    b = emit_csv([row], "objsize", tmp_path / "b.csv", seed=1)
    assert a.read_bytes() == b.read_bytes() and b"\r" not in a.read_bytes()
    with pytest.raises(OSError, match="nope"):
        emit_csv([row], "objsize", tmp_path / "nope" / "x.csv")


# ---------------------------------------------------------------- execution

def test_run_tasks_order_and_parallel_equivalence():
    tasks = [(_square, (x,)) for x in range(7)]
    assert run_tasks(tasks, {"k": 2}, jobs=1) == [2 * x * x for x in range(7)]
    assert run_tasks(tasks, {"k": 2}, jobs=3) == run_tasks(tasks, {"k": 2}, jobs=1)


def test_presets_and_size_configs():
    assert preset("trainsize").grid == (1, 10, 50, 200)
    assert preset("objsize", paper_scale=True).grid == (16, 24, 32, 48, 64, 80, 96)
    combos = size_sweep_configs(preset("objsize", paper_scale=True))
    assert ("tiny", "adam", "bn") in combos and ("tiny", "adam", "dropout") not in combos
    assert len(combos) == 2 * 2 + 2 + 2
    with pytest.raises(ValueError):
        preset("bogus")


# ------------------------------------------------------------ tiny protocols

@pytest.fixture(scope="module")
def tiny_config():
    return ExperimentConfig((2, 4), trials=2, extractor_epochs=1, epochs=1, extractor_batch=16,
                            batch_size=16, feature_size=4, resamples=2, inits=1, base_seed=7)


@pytest.mark.parametrize("mode", ["same", "disjoint"])
def test_transfer_protocol_runs_and_is_job_invariant(tiny_set, tiny_config, mode):
    rows, trials = run_transfer_feature_size(tiny_set, tiny_config, mode, jobs=1)
    rows2, _ = run_transfer_feature_size(tiny_set, tiny_config, mode, jobs=2)
    assert render_csv(rows, "transfer") == render_csv(rows2, "transfer")
    assert [r[0] for r in rows] == [2, 4] and len(trials) == 4
    assert {t.seed for t in trials} == {stable_mix(7, j, i) for j in range(2) for i in range(2)}
    for _, cnn, svm in rows:
        assert 0 <= cnn.mean <= 1 and 0 <= svm.mean <= 1 and cnn.count == 2


def test_chance_control_records_class_counts(tiny_set, tiny_config):
    out = transfer_chance_control(tiny_set, tiny_config, trials=3)
    assert all(t.value == 2 for t in out)
    assert all(0 <= t.accuracy <= 1 for t in out)


def test_train_size_sweep_shape(tiny_set, tiny_config):
    results, trials = run_train_size_sweep(tiny_set, tiny_set, tiny_config)
    assert list(results) == [("classic", "bn")]
    rows = results[("classic", "bn")]
    assert [r.value for r in rows] == [2, 4] and all(r.count == 2 for r in rows)
    assert len(trials) == 4


def test_tl_vs_train_size_shape(tiny_set, tiny_config):
    results, trials = run_tl_vs_train_size(tiny_set, tiny_set, tiny_config, "disjoint")
    rows = results[("disjoint", "bn")]
    assert [r.value for r in rows] == [2, 4] and all(r.count == 2 for r in rows)
