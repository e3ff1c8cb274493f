"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are
repeated in the terminal summary. Criteria 4-7 train many networks and
are marked ``slow`` (about 35 minutes together on one core).
"""
import time

import numpy as np
import pytest

from svm_oracle import grid_minimize
from sonarnet import harness as H
from sonarnet.arch import build, build_classic_cnn, count_params, init_params, predict_proba
from sonarnet.cli import main
from sonarnet.data import class_split_disjoint, load_manifest, quantize, save_dataset
from sonarnet.gradcheck import run_suite
from sonarnet.modelio import from_bytes, to_bytes
from sonarnet.rng import Rng
from sonarnet.svm import primal_objective, train_binary
from sonarnet.synth import synth_sonar_generate
from sonarnet.train import TrainConfig, train

S, TRAIN_PER_CLASS, TEST_PER_CLASS = 32, 200, 36
SIZE_TRAIN_PER_CLASS, SIZE_EPOCHS, SIZE_BATCH = 35, 8, 32


@pytest.fixture(scope="session")
def desk_data():
    """11-class synthetic train/test sets at the desk working size."""
    return (synth_sonar_generate(11, TRAIN_PER_CLASS, S, Rng(101)),
            synth_sonar_generate(11, TEST_PER_CLASS, S, Rng(202)))


@pytest.fixture(scope="session")
def train_size_rows(desk_data):
    cfg = H.preset("trainsize")
    start = time.perf_counter()
    results, _ = H.run_train_size_sweep(*desk_data, cfg)
    return results[("classic", "bn")], time.perf_counter() - start, cfg


# ------------------------------------------------------------------ structure

def test_criterion_1_parameter_counts(verdict):
    start = time.perf_counter()
    classic = count_params(build_classic_cnn(96, 64, 11, "none"))[0]
    tiny = count_params(build("tiny", 96, 11))[0]
    fire = count_params(build("fire", 96, 11))[0]
    elapsed = time.perf_counter() - start
    ok = (classic == 930_411 and abs(classic - 930_000) / 930_000 < 5e-4
          and tiny == 2283 and fire == 3331
          and all(2000 <= n <= 5000 for n in (tiny, fire)) and elapsed < 1.0)
    verdict(1, ok, f"classic={classic} tiny={tiny} (reference 2579, {2579 - tiny:+d}) "
                   f"fire={fire} (reference 3643, {3643 - fire:+d}) {elapsed:.3f}s")
    assert ok


def test_criterion_2_gradient_suite(verdict):
    start = time.perf_counter()
    worst = run_suite(range(20))
    elapsed = time.perf_counter() - start
    loose = {"conv_valid", "conv_same", "maxpool", "avgpool", "batchnorm_4d", "batchnorm_2d", "dense"}
    tight = {"dense", "relu", "softmax_ce"}
    ok = all(worst[k][0] < 1e-4 for k in loose) and all(worst[k][0] < 1e-6 for k in tight)
    ok &= all(err < tol for err, tol in worst.values()) and elapsed < 120
    worst_name = max(worst, key=lambda k: worst[k][0] / worst[k][1])
    verdict(2, ok, f"{len(worst)} layers x 20 seeds; tightest margin {worst_name} "
                   f"{worst[worst_name][0]:.1e} < {worst[worst_name][1]:.0e}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_svm_oracle(verdict):
    start = time.perf_counter()
    gaps, alpha_ok = [], True
    for seed in range(25):
        r = Rng(1000 + seed)
        X = r.normal(0, 1, (6, 2))
        y = np.array([1.0, 1, 1, -1, -1, -1])[r.permutation(6)]
        C = (0.1, 1.0, 10.0)[int(r.integers(0, 3))]
        m = train_binary(X, y, C)
        best, _ = grid_minimize(X, y, C)
        gaps.append(abs(primal_objective(m.weights, m.bias, X, y, C) - best))
        alpha_ok &= bool(np.all(m.alpha >= 0) and np.all(m.alpha <= C))
    elapsed = time.perf_counter() - start
    ok = max(gaps) < 1e-3 and alpha_ok and elapsed < 60
    verdict(3, ok, f"25 instances, max |objective - oracle| = {max(gaps):.1e}, "
                   f"alpha in [0, C]: {alpha_ok}; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------- trends

@pytest.mark.slow
def test_criterion_4_chance_anchor(desk_data, verdict):
    source = desk_data[0]
    ranks = {class_split_disjoint(source, Rng(seed))[2] for seed in range(500)}
    out = H.transfer_chance_control(source, H.preset("transfer"), trials=20, permute_labels=True)
    acc = np.mean([t.accuracy for t in out])
    chance = np.mean([1 / t.value for t in out])
    ok = ranks <= {5, 6} and abs(acc - chance) <= 0.08
    verdict(4, ok, f"r values {sorted(ranks)}; untrained features + permuted labels "
                   f"{100 * acc:.1f}% vs chance {100 * chance:.1f}% over 20 trials")
    assert ok


@pytest.mark.slow
def test_criterion_5_train_size_trend(train_size_rows, verdict):
    rows, elapsed, cfg = train_size_rows
    means = [r.mean for r in rows]
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    ok = (means[-1] - means[0] >= 0.20 and len(drops) <= 1 and all(d <= 0.05 for d in drops)
          and all(r.count == cfg.resamples * cfg.inits for r in rows) and elapsed < 20 * 60)
    detail = ", ".join(f"spc {r.value}: {100 * r.mean:.1f}%" for r in rows)
    verdict(5, ok, f"{detail}; {rows[0].count} models per point; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_6_transfer_trend(desk_data, train_size_rows, verdict):
    cfg = H.preset("tlsize")
    start = time.perf_counter()
    same = H.run_tl_vs_train_size(*desk_data, cfg, "same")[0][("same", "bn")]
    disjoint = H.run_tl_vs_train_size(*desk_data, cfg, "disjoint")[0][("disjoint", "bn")]
    elapsed = time.perf_counter() - start
    scratch = train_size_rows[0][0]
    assert scratch.value == same[0].value == 1
    lift = same[0].mean - scratch.mean
    gap = float(np.mean([s.mean - d.mean for s, d in zip(same, disjoint)]))
    ok = lift >= 0.10 and 0 <= gap <= 0.15 and elapsed < 20 * 60
    verdict(6, ok, f"spc 1: transfer {100 * same[0].mean:.1f}% vs scratch {100 * scratch.mean:.1f}%; "
                   f"mean same-disjoint gap {100 * gap:.1f} points; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_7_size_robustness(verdict):
    train_set = synth_sonar_generate(11, SIZE_TRAIN_PER_CLASS, 96, Rng(101))
    test_set = synth_sonar_generate(11, TEST_PER_CLASS, 96, Rng(202))
    sizes = (16, 32, 64)
    adam_cfg = H.ExperimentConfig(sizes, trials=3, epochs=SIZE_EPOCHS, batch_size=SIZE_BATCH)
    sgd_cfg = H.ExperimentConfig(sizes, trials=3, regularizers=("bn", "dropout"), optimizers=("sgd",),
                                 epochs=SIZE_EPOCHS, batch_size=SIZE_BATCH)
    start = time.perf_counter()
    results = {}
    for cfg in (adam_cfg, sgd_cfg):
        results.update(H.run_object_size_sweep(train_set, test_set, cfg)[0])
    elapsed = time.perf_counter() - start
    adam = [r.mean for r in results[("classic", "adam", "bn")]]
    spread = max(adam) - min(adam)
    sgd_gaps = {reg: results[("classic", "sgd", reg)][-1].mean - results[("classic", "sgd", reg)][0].mean
                for reg in ("bn", "dropout")}
    ok = spread <= 0.10 and all(g >= 0.05 for g in sgd_gaps.values()) and elapsed < 25 * 60
    verdict(7, ok, f"ADAM-BN spread {100 * spread:.1f} points; SGD 64px minus 16px: "
                   + ", ".join(f"{k} {100 * v:.1f}" for k, v in sgd_gaps.items())
                   + f" points; {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- reproducibility

def test_criterion_8_determinism(tmp_path, verdict):
    root = tmp_path / "data"
    save_dataset(synth_sonar_generate(4, 8, 16, Rng(1)), root / "train")
    save_dataset(synth_sonar_generate(4, 3, 16, Rng(2)), root / "test")
    flags = {
        "transfer": ["--grid", "2,4", "--trials", "2", "--extractor-epochs", "1"],
        "objsize": ["--grid", "16", "--trials", "2", "--epochs", "1", "--regs", "bn"],
        "trainsize": ["--grid", "1,4", "--resamples", "2", "--inits", "2", "--epochs", "1"],
        "tlsize": ["--grid", "1,4", "--trials", "2", "--extractor-epochs", "1"],
    }
    identical = {}
    for exp, extra in flags.items():
        runs = []
        for tag, jobs in (("a", "1"), ("b", "1"), ("c", "4")):
            out = tmp_path / f"{exp}-{tag}"
            assert main(["exp", "--exp", exp, "--data", str(root), "--out-dir", str(out),
                         "--jobs", jobs] + extra) == 0
            runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        identical[exp] = bool(runs[0]) and runs[0] == runs[1] == runs[2]
    ok = all(identical.values())
    verdict(8, ok, "byte-identical reruns (jobs 1, 1, 4): "
                   + ", ".join(f"{k}={v}" for k, v in identical.items()))
    assert ok


def test_criterion_9_round_trips(tmp_path, verdict):
    ds = synth_sonar_generate(5, 4, 24, Rng(3))
    save_dataset(ds, tmp_path / "d")
    back = load_manifest(tmp_path / "d")
    data_ok = (np.array_equal(back.images, quantize(ds.images) / 255.0)
               and np.array_equal(back.labels, ds.labels) and back.class_names == ds.class_names)
    model_ok = True
    x = Rng(4).random((6, 24, 24))
    for arch, reg in (("classic", "bn"), ("classic", "dropout"), ("tiny", "bn"), ("fire", "bn")):
        spec = build(arch, 24, 5, reg, 8)
        model, _ = train(spec, (Rng(5).random((10, 24, 24)), np.arange(10) % 5),
                         TrainConfig("adam", 0.001, 5, 1, 0))
        clone = from_bytes(to_bytes(model))
        model_ok &= np.array_equal(predict_proba(model, x), predict_proba(clone, x))
    ok = data_ok and model_ok
    verdict(9, ok, f"dataset 8-bit exact: {data_ok}; model forward bit-exact: {model_ok}")
    assert ok
