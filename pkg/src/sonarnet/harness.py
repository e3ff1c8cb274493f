"""The four evaluation protocols as reproducible sweeps.

Every trial draws all randomness from ``stable_mix(base_seed, point, trial)``
so results do not depend on execution order or worker count. Trials may run
in a process pool; datasets are shipped to each worker once.
"""
from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import build, extract_features, init_params
from .data import (LabeledImageSet, class_split_disjoint, resize_set, restrict_classes,
                   split_fraction, undersample_per_class)
from .rng import Rng, stable_mix
from .svm import svm_accuracy, train_ovo
from .train import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger(__name__)

PAPER_SPC_GRID = (1, 10, 20, 30, 40, 50, 100, 150, 200)
PAPER_SIZE_GRID = (16, 24, 32, 48, 64, 80, 96)
DEFAULT_FEATURE_GRID = (4, 8, 16, 32, 64, 128)

ARCH_LABEL = {"classic": "classicCNN", "tiny": "tinyNetCNN", "fire": "smallFireNetCNN"}
REG_LABEL = {"bn": "BN", "dropout": "Dropout", "none": "None"}

# extra seed-stream tags, kept out of the range of sweep-point indices
_EXTRACTOR_STREAM = 0xE7E7
_CHANCE_STREAM = 0xC0C0
_RESAMPLE_STREAM = 0x5A5A


@dataclass(frozen=True)
class ExperimentConfig:
    grid: tuple
    trials: int = 3
    archs: tuple = ("classic",)
    regularizers: tuple = ("bn",)
    optimizers: tuple = ("adam",)
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 30              # ClassicCNN
    small_epochs: int = 150       # TinyNet / FireNet
    extractor_epochs: int = 15    # transfer feature extractors
    extractor_batch: int = 64
    feature_size: int = 64
    dropout: float = 0.5
    resamples: int = 3            # train-size sweep: resampled subsets per point
    inits: int = 3                # train-size sweep: weight inits per subset
    svm_C: float = 1.0
    base_seed: int = 42

    def __post_init__(self):
        grid = tuple(self.grid)
        if not grid:
            raise ValueError("sweep grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"sweep grid must be strictly increasing, got {grid}")
        object.__setattr__(self, "grid", grid)
        if self.trials < 1 or self.resamples < 1 or self.inits < 1:
            raise ValueError("trial counts must be >= 1")

    def train_config(self, optimizer="adam", epochs=None, batch=None, seed=0) -> TrainConfig:
        return TrainConfig(optimizer, self.learning_rate, batch or self.batch_size,
                           epochs or self.epochs, seed)


@dataclass
class TrialResult:
    key: tuple                 # configuration label, e.g. ("classic", "adam", "bn")
    value: float               # sweep value
    trial: int
    seed: int
    accuracy: float = math.nan
    svm_accuracy: float = math.nan
    failed: bool = False
    note: str = ""


@dataclass
class SummaryRow:
    value: float
    mean: float
    std: float
    min: float
    max: float
    count: int
    excluded: int = 0


def summarize(results, value=None, excluded=0) -> SummaryRow:
    """Mean, population std, min and max."""
    x = np.asarray(list(results), dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot summarize an empty result set")
    return SummaryRow(value, float(x.mean()), float(x.std()), float(x.min()), float(x.max()),
                      int(x.size), excluded)


def summarize_trials(trials, metric="accuracy") -> dict:
    """Group by (key, value) and summarize; failed trials are excluded and counted."""
    groups = {}
    for t in sorted(trials, key=lambda t: (t.key, t.value, t.trial)):
        groups.setdefault((t.key, t.value), []).append(t)
    out = {}
    for (key, value), ts in groups.items():
        ok = [getattr(t, metric) for t in ts if not t.failed]
        excluded = len(ts) - len(ok)
        if ok:
            out[(key, value)] = summarize(ok, value, excluded)
        else:
            out[(key, value)] = SummaryRow(value, math.nan, math.nan, math.nan, math.nan, 0, excluded)
    return out


def assert_disjoint(a: LabeledImageSet, b: LabeledImageSet, what: str):
    shared = np.intersect1d(a.ids, b.ids)
    if shared.size:
        raise AssertionError(f"{what}: {shared.size} images appear on both sides")


# ------------------------------------------------------------ task execution

_SHARED: dict = {}


def _init_worker(shared):
    global _SHARED
    _SHARED = shared


def _call(task):
    fn, args = task
    return fn(_SHARED, *args)


def run_tasks(tasks, shared: dict, jobs=1) -> list:
    """Run ``fn(shared, *args)`` for each ``(fn, args)``; results keep task order."""
    if jobs <= 1 or len(tasks) <= 1:
        _init_worker(shared)
        try:
            return [_call(t) for t in tasks]
        finally:
            _init_worker({})
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(shared,)) as pool:
        return list(pool.map(_call, tasks))


# -------------------------------------------------------- transfer protocol


def _split_source(source, mode, rng):
    if mode == "disjoint":
        first, second, _ = class_split_disjoint(source, rng)
    elif mode == "same":
        first, second = split_fraction(source, 0.5, rng, stratified=True)
    else:
        raise ValueError(f"mode must be 'same' or 'disjoint', got {mode!r}")
    assert_disjoint(first, second, "feature/target split")
    return first, second


def _svm_on_features(model, fit_set, eval_set, C):
    feats = extract_features(model, fit_set.images)
    ovo = train_ovo(feats, fit_set.labels, C, fit_set.class_count)
    return svm_accuracy(ovo, extract_features(model, eval_set.images), eval_set.labels)


def _transfer_trial(shared, m, j, i, mode):
    cfg: ExperimentConfig = shared["config"]
    seed = stable_mix(cfg.base_seed, j, i)
    result = TrialResult((mode,), m, i, seed)
    rng = Rng(seed)
    first, second = _split_source(shared["source"], mode, rng.spawn(1))
    cnn_train, cnn_test = split_fraction(first, 0.8, rng.spawn(2))
    tl_train, tl_test = split_fraction(second, 0.8, rng.spawn(3))
    assert_disjoint(cnn_train, cnn_test, "CNN train/test")
    assert_disjoint(tl_train, tl_test, "transfer train/test")
    spec = build("classic", first.image_size, first.class_count, cfg.regularizers[0], m, cfg.dropout)
    try:
        model, _ = train(spec, cnn_train, cfg.train_config("adam", cfg.extractor_epochs,
                                                           cfg.extractor_batch, seed), rng.spawn(4))
    except TrainingDiverged as exc:
        result.failed, result.note = True, str(exc)
        return result
    result.accuracy = evaluate(model, cnn_test)
    result.svm_accuracy = _svm_on_features(model, tl_train, tl_test, cfg.svm_C)
    return result


def run_transfer_feature_size(source: LabeledImageSet, config: ExperimentConfig, mode="same",
                              jobs=1) -> list:
    """Feature size m vs CNN test accuracy and SVM transfer accuracy.

    Returns summary-row pairs ``(m, cnn_row, svm_row)``.
    """
    tasks = [(_transfer_trial, (m, j, i, mode))
             for j, m in enumerate(config.grid) for i in range(config.trials)]
    trials = run_tasks(tasks, {"source": source, "config": config}, jobs)
    cnn = summarize_trials(trials, "accuracy")
    svm = summarize_trials(trials, "svm_accuracy")
    return [(m, cnn[((mode,), m)], svm[((mode,), m)]) for m in config.grid], trials


def _chance_trial(shared, i, permute):
    cfg: ExperimentConfig = shared["config"]
    seed = stable_mix(cfg.base_seed, _CHANCE_STREAM, i)
    rng = Rng(seed)
    _, second = _split_source(shared["source"], "disjoint", rng.spawn(1))
    tl_train, tl_test = split_fraction(second, 0.8, rng.spawn(3))
    spec = build("classic", second.image_size, shared["source"].class_count, cfg.regularizers[0],
                 cfg.feature_size, cfg.dropout)
    model = init_params(spec, rng.spawn(4))
    if permute:
        order = rng.spawn(5).permutation(len(tl_train))
        tl_train = LabeledImageSet(tl_train.images, tl_train.labels[order], tl_train.class_names,
                                   tl_train.ids)
    acc = _svm_on_features(model, tl_train, tl_test, cfg.svm_C)
    return TrialResult(("chance", permute), second.class_count, i, seed, acc)


def transfer_chance_control(source: LabeledImageSet, config: ExperimentConfig, trials=20,
                            permute_labels=True, jobs=1) -> list:
    """Untrained (freshly initialized) extractor + SVM on disjoint-class transfer splits.

    With ``permute_labels`` the transfer-training labels are shuffled, so the
    SVM can only reach chance, 1 / (transfer class count). Each result's
    ``value`` is that transfer class count.
    """
    tasks = [(_chance_trial, (i, permute_labels)) for i in range(trials)]
    return run_tasks(tasks, {"source": source, "config": config}, jobs)


# ------------------------------------------------------- object-size protocol


def size_sweep_configs(config: ExperimentConfig) -> list:
    """(arch, optimizer, regularizer) combinations; small nets are BN-only."""
    combos = []
    for arch in config.archs:
        regs = config.regularizers if arch == "classic" else ("bn",)
        for opt in config.optimizers:
            for reg in regs:
                combos.append((arch, opt, reg))
    return combos


def _size_trial(shared, s, j, i, arch, opt, reg):
    cfg: ExperimentConfig = shared["config"]
    seed = stable_mix(cfg.base_seed, j, i)
    result = TrialResult((arch, opt, reg), s, i, seed)
    tr, te = shared["sets"][s]
    spec = build(arch, s, tr.class_count, reg, cfg.feature_size, cfg.dropout)
    epochs = cfg.epochs if arch == "classic" else cfg.small_epochs
    try:
        model, _ = train(spec, tr, cfg.train_config(opt, epochs, seed=seed), Rng(seed))
    except TrainingDiverged as exc:
        result.failed, result.note = True, str(exc)
        return result
    result.accuracy = evaluate(model, te)
    return result


def run_object_size_sweep(train_set, test_set, config: ExperimentConfig, jobs=1):
    """Accuracy vs object size; both sets are resized to every grid size.

    Returns ``({(arch, opt, reg): [SummaryRow per size]}, trials)``.
    """
    sets = {s: (resize_set(train_set, s), resize_set(test_set, s)) for s in config.grid}
    combos = size_sweep_configs(config)
    tasks = [(_size_trial, (s, j, i) + combo)
             for combo in combos for j, s in enumerate(config.grid) for i in range(config.trials)]
    trials = run_tasks(tasks, {"sets": sets, "config": config}, jobs)
    rows = summarize_trials(trials)
    return {c: [rows[(c, s)] for s in config.grid] for c in combos}, trials


# -------------------------------------------------------- train-size protocol


def _spc_trial(shared, spc, j, resample, init, arch, reg):
    cfg: ExperimentConfig = shared["config"]
    index = resample * cfg.inits + init
    seed = stable_mix(cfg.base_seed, j, index)
    result = TrialResult((arch, reg), spc, index, seed)
    tr, te = shared["train"], shared["test"]
    subset = undersample_per_class(tr, spc, Rng(stable_mix(cfg.base_seed, _RESAMPLE_STREAM, j, resample)))
    spec = build(arch, tr.image_size, tr.class_count, reg, cfg.feature_size, cfg.dropout)
    epochs = cfg.epochs if arch == "classic" else cfg.small_epochs
    try:
        model, _ = train(spec, subset, cfg.train_config("adam", epochs, seed=seed), Rng(seed))
    except TrainingDiverged as exc:
        result.failed, result.note = True, str(exc)
        return result
    result.accuracy = evaluate(model, te)
    return result


def run_train_size_sweep(train_set, test_set, config: ExperimentConfig, jobs=1):
    """Accuracy vs samples per class, ADAM only, against the fixed full test set.

    Each point trains ``resamples x inits`` models, one per distinct
    (resampled subset, weight init) pair. Returns ``({(arch, reg): rows}, trials)``.
    """
    combos = [(a, r) for a in config.archs for r in (config.regularizers if a == "classic" else ("bn",))]
    tasks = [(_spc_trial, (spc, j, r, w) + combo)
             for combo in combos for j, spc in enumerate(config.grid)
             for r in range(config.resamples) for w in range(config.inits)]
    trials = run_tasks(tasks, {"train": train_set, "test": test_set, "config": config}, jobs)
    rows = summarize_trials(trials)
    return {c: [rows[(c, v)] for v in config.grid] for c in combos}, trials


# ---------------------------------------------------- TL vs train-size protocol


def _tl_trial(shared, i, mode, reg):
    """One extractor per trial, reused for every grid point (a paired design)."""
    cfg: ExperimentConfig = shared["config"]
    trial_seed = stable_mix(cfg.base_seed, _EXTRACTOR_STREAM, i)
    rng = Rng(trial_seed)
    first, second = _split_source(shared["train"], mode, rng.spawn(1))
    test = shared["test"]
    if mode == "disjoint":
        test = restrict_classes(test, second.class_names)
    spec = build("classic", first.image_size, first.class_count, reg, cfg.feature_size, cfg.dropout)
    results = [TrialResult((mode, reg), spc, i, stable_mix(cfg.base_seed, j, i))
               for j, spc in enumerate(cfg.grid)]
    try:
        model, _ = train(spec, first, cfg.train_config("adam", cfg.extractor_epochs,
                                                       cfg.extractor_batch, trial_seed), rng.spawn(4))
    except TrainingDiverged as exc:
        for r in results:
            r.failed, r.note = True, str(exc)
        return results
    test_feats = extract_features(model, test.images)
    for r in results:
        target = undersample_per_class(second, int(r.value), Rng(r.seed))
        assert_disjoint(first, target, "extractor/target sets")
        ovo = train_ovo(extract_features(model, target.images), target.labels, cfg.svm_C,
                        target.class_count)
        r.accuracy = svm_accuracy(ovo, test_feats, test.labels)
    return results


def run_tl_vs_train_size(train_set, test_set, config: ExperimentConfig, mode="same", jobs=1):
    """Transfer accuracy vs target-set samples per class.

    Each trial trains one feature extractor on half of the training set and
    fits an SVM per grid point on the other half, undersampled to spc.
    Returns ``({(mode, reg): rows}, trials)``.
    """
    tasks = [(_tl_trial, (i, mode, reg)) for reg in config.regularizers for i in range(config.trials)]
    shared = {"train": train_set, "test": test_set, "config": config}
    trials = [r for batch in run_tasks(tasks, shared, jobs) for r in batch]
    rows = summarize_trials(trials)
    return {(mode, reg): [rows[((mode, reg), v)] for v in config.grid]
            for reg in config.regularizers}, trials


# ------------------------------------------------------------------ CSV output

SCHEMAS = {
    "transfer": ("featureSize", "meanCFTestAcc", "stdCFTestAcc", "meanSVMTestAcc", "stdSVMTestAcc"),
    "objsize": ("pixelImageSize", "meanAcc", "stdAcc", "minAcc", "maxAcc"),
    "trainsize": ("samplesPerClass", "meanAcc", "stdAcc", "minAcc", "maxAcc"),
    "tlsize": ("spc", "meanTestAcc", "stdTestAcc"),
}


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return f"{x:.6g}"


def _pct(x) -> str:
    return "nan" if math.isnan(x) else f"{100.0 * x:.6g}"


def format_rows(schema: str, rows) -> list:
    """Data lines for a schema; accuracies become percentages.

    ``transfer`` rows are ``(m, cnn_row, svm_row)``; ``minmax`` rows are
    ``(label, "min" | "max", [SummaryRow per sweep value])``; the rest are
    ``SummaryRow``.
    """
    lines = []
    for row in rows:
        if schema == "transfer":
            m, cnn, svm = row
            lines.append([_num(m), _pct(cnn.mean), _pct(cnn.std), _pct(svm.mean), _pct(svm.std)])
        elif schema in ("objsize", "trainsize"):
            lines.append([_num(row.value), _pct(row.mean), _pct(row.std), _pct(row.min), _pct(row.max)])
        elif schema == "tlsize":
            lines.append([_num(row.value), _pct(row.mean), _pct(row.std)])
        elif schema == "minmax":
            label, stat, summaries = row
            lines.append([label, stat] + [_pct(getattr(r, stat)) for r in summaries])
        else:
            raise ValueError(f"unknown schema {schema!r}")
    return lines


def render_csv(rows, schema: str, seed=None, header=None, comments=()) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    for c in comments:
        buf.write(f"# {c}\n")
    buf.write(",".join(header or SCHEMAS[schema]) + "\n")
    for cells in format_rows(schema, rows):
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def emit_csv(rows, schema: str, path, seed=None, header=None, comments=()):
    """Write rows under ``schema``; reals carry 6 significant digits, '\\n' endings."""
    text = render_csv(rows, schema, seed, header, comments)
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def minmax_table(results: dict, grid, labels=None):
    """Min/max table: a min row and a max row per configuration, one column per sweep value.

    ``labels`` maps configuration keys to row labels; keys are joined with '-' otherwise.
    """
    header = ["model", "stat"] + [_num(v) for v in grid]
    rows = []
    for key, summaries in results.items():
        label = (labels or {}).get(key) or "-".join(str(k) for k in key)
        rows += [(label, "min", summaries), (label, "max", summaries)]
    return rows, header


def excluded_note(trials) -> str:
    failed = [t for t in trials if t.failed]
    return f"excluded={len(failed)}" if failed else ""


# ------------------------------------------------------------------ presets

DESK_SPC_GRID = (1, 10, 50, 200)
DESK_SIZE_GRID = (16, 32, 64)


@dataclass(frozen=True)
class Scale:
    image_size: int          # working size (object-size sweeps resize from 96)
    train_per_class: int     # bundled synthetic set
    test_per_class: int


PAPER_SCALE = Scale(96, 200, 36)
DESK_SCALE = Scale(32, 200, 36)


def preset(experiment: str, paper_scale=False, base_seed=42) -> ExperimentConfig:
    """Default sweep settings; desk scale trims trials, epochs and regularizer lists."""
    if experiment == "transfer":
        return ExperimentConfig(DEFAULT_FEATURE_GRID, trials=20 if paper_scale else 3,
                                base_seed=base_seed)
    if experiment == "objsize":
        if paper_scale:
            return ExperimentConfig(PAPER_SIZE_GRID, trials=20, archs=("classic", "tiny", "fire"),
                                    regularizers=("bn", "dropout"), optimizers=("adam", "sgd"),
                                    base_seed=base_seed)
        return ExperimentConfig(DESK_SIZE_GRID, trials=3, regularizers=("bn", "dropout"),
                                optimizers=("adam", "sgd"), epochs=15, base_seed=base_seed)
    if experiment == "trainsize":
        if paper_scale:
            return ExperimentConfig(PAPER_SPC_GRID, resamples=6, inits=6,
                                    archs=("classic", "tiny", "fire"),
                                    regularizers=("bn", "dropout"), base_seed=base_seed)
        return ExperimentConfig(DESK_SPC_GRID, resamples=3, inits=3, epochs=10, base_seed=base_seed)
    if experiment == "tlsize":
        if paper_scale:
            return ExperimentConfig(PAPER_SPC_GRID, trials=30, regularizers=("bn", "dropout"),
                                    base_seed=base_seed)
        return ExperimentConfig(DESK_SPC_GRID, trials=5, base_seed=base_seed)
    raise ValueError(f"unknown experiment {experiment!r}")
