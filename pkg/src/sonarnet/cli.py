"""Command-line entry point: ``sonarnet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as H
from .arch import build, count_params
from .data import DatasetError, load_manifest, save_dataset
from .gradcheck import run_suite
from .modelio import save_model
from .rng import Rng, stable_mix
from .synth import CLASS_NAMES, synth_sonar_generate
from .train import TrainConfig, TrainingDiverged, train

# reference counts quoted for the small networks, shown next to the computed ones
REFERENCE_COUNTS = {"tiny": 2579, "fire": 3643}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _grid(text):
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(b <= a for a, b in zip(vals, vals[1:])) or vals[0] < 1:
        raise argparse.ArgumentTypeError(f"grid must be positive and strictly increasing: {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="sonarnet", description="Small CNNs, transfer learning and sweeps on sonar-like images.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic sonar dataset", formatter_class=fmt)
    s.add_argument("--classes", type=_positive, default=11,
                   help=f"number of classes (at most {len(CLASS_NAMES)}); 11 matches the marine debris set")
    s.add_argument("--per-class", type=_positive, default=20, help="images per class")
    s.add_argument("--size", type=_positive, default=96, help="image side in pixels (96 is the default crop size)")
    s.add_argument("--seed", type=int, default=42, help="generator seed")
    s.add_argument("--out", required=True, help="output directory (manifest.csv + PGMs)")

    t = sub.add_parser("train", help="train one network on a dataset directory", formatter_class=fmt)
    t.add_argument("--arch", choices=("classic", "tiny", "fire"), default="classic")
    t.add_argument("--reg", choices=("bn", "dropout"), default="bn",
                   help="regularizer; tiny and fire are built with batch norm only")
    t.add_argument("--opt", choices=("adam", "sgd"), default="adam")
    t.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    t.add_argument("--epochs", type=_positive, default=None,
                   help="training epochs (default: 30 for classic, 150 for tiny and fire)")
    t.add_argument("--batch", type=_positive, default=128, help="mini-batch size")
    t.add_argument("--lr", type=float, default=0.001, help="learning rate")
    t.add_argument("--m", type=_positive, default=64, help="ClassicCNN feature size (FC width)")
    t.add_argument("--dropout", type=float, default=0.5, help="drop probability for --reg dropout")
    t.add_argument("--seed", type=int, default=42, help="init, shuffle and dropout seed")
    t.add_argument("--model-out", required=True, help="model file to write")
    t.add_argument("--history-out", default=None,
                   help="per-epoch CSV (default: <model-out>.history.csv)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer", formatter_class=fmt)
    g.add_argument("--tol", type=float, default=None,
                   help="override per-layer tolerances (1e-4 conv/pool/BN, 1e-6 dense/relu/softmax+CE)")
    g.add_argument("--seeds", type=_positive, default=20, help="number of random seeds")

    q = sub.add_parser("params", help="print trainable parameter count", formatter_class=fmt)
    q.add_argument("--arch", choices=("classic", "tiny", "fire"), required=True)
    q.add_argument("--size", type=_positive, required=True, help="input image side")
    q.add_argument("--classes", type=_positive, required=True)
    q.add_argument("--m", type=_positive, default=64, help="ClassicCNN feature size")
    q.add_argument("--reg", choices=("none", "bn", "dropout"), default="none",
                   help="ClassicCNN regularizer (none reproduces the 930K figure)")

    e = sub.add_parser("exp", help="run one of the four experiment sweeps", formatter_class=fmt)
    e.add_argument("--exp", choices=("transfer", "objsize", "trainsize", "tlsize"), required=True)
    e.add_argument("--data", default=None,
                   help="directory holding train/ and test/ datasets (default: bundled synthetic set)")
    e.add_argument("--out-dir", required=True, help="directory for CSV output")
    e.add_argument("--seed", type=int, default=42, help="base seed for every trial")
    e.add_argument("--paper-scale", action="store_true",
                   help="full trial counts, grids and 96px images instead of desk-scale values")
    e.add_argument("--jobs", type=_positive, default=1, help="parallel trial workers")
    e.add_argument("--force", action="store_true", help="allow writing into a non-empty out-dir")
    e.add_argument("--grid", type=_grid, default=None,
                   help="sweep grid override: feature sizes, image sizes or samples per class")
    e.add_argument("--trials", type=_positive, default=None, help="trials per sweep point")
    e.add_argument("--epochs", type=_positive, default=None, help="ClassicCNN epochs for objsize/trainsize")
    e.add_argument("--extractor-epochs", type=_positive, default=None,
                   help="feature-extractor epochs for transfer/tlsize (15 at both scales)")
    e.add_argument("--resamples", type=_positive, default=None, help="trainsize: resampled subsets per point")
    e.add_argument("--inits", type=_positive, default=None, help="trainsize: weight inits per subset")
    e.add_argument("--mode", choices=("same", "disjoint", "both"), default="both",
                   help="transfer/tlsize class relation between feature and target splits")
    e.add_argument("--regs", default=None, help="comma-separated regularizers, e.g. bn,dropout")
    e.add_argument("--archs", default=None, help="comma-separated architectures for objsize/trainsize")
    return p


# ---------------------------------------------------------------- commands


def cmd_synth(a):
    if a.classes > len(CLASS_NAMES):
        raise UsageError(f"--classes must be at most {len(CLASS_NAMES)}, got {a.classes}")
    ds = synth_sonar_generate(a.classes, a.per_class, a.size, Rng(a.seed))
    save_dataset(ds, a.out)
    print(f"wrote {len(ds)} images ({a.classes} classes, {a.size}px) to {a.out}")


def cmd_train(a):
    if not 0 <= a.dropout < 1:
        raise UsageError(f"--dropout must be in [0, 1), got {a.dropout}")
    if not a.lr > 0:
        raise UsageError(f"--lr must be positive, got {a.lr}")
    ds = load_manifest(a.data)
    reg = a.reg if a.arch == "classic" else "bn"
    spec = build(a.arch, ds.image_size, ds.class_count, reg, a.m, a.dropout)
    epochs = a.epochs or (30 if a.arch == "classic" else 150)
    config = TrainConfig(a.opt, a.lr, a.batch, epochs, a.seed)
    model, history = train(spec, ds, config)
    model.meta["class_names"] = list(ds.class_names)
    save_model(model, a.model_out)
    hist = Path(a.history_out or f"{a.model_out}.history.csv")
    hist.write_text(f"# seed={a.seed}\n" + history.to_csv())
    print(f"final loss {history.loss[-1]:.6g}, train accuracy {history.train_acc[-1]:.4f}")
    print(f"wrote {a.model_out} and {hist}")


def cmd_gradcheck(a):
    worst = run_suite(range(a.seeds), a.tol)
    failed = False
    print(f"{'layer':<14}{'max rel error':>16}{'tolerance':>12}")
    for name, (err, tol) in worst.items():
        ok = err < tol
        failed |= not ok
        print(f"{name:<14}{err:>16.3e}{tol:>12.0e}  {'ok' if ok else 'FAIL'}")
    return 2 if failed else 0


def cmd_params(a):
    spec = build(a.arch, a.size, a.classes, a.reg if a.arch == "classic" else "bn", a.m)
    trainable, buffers = count_params(spec)
    print(trainable)
    if buffers:
        print(f"note: plus {buffers} non-trainable batch-norm running statistics")
    if a.arch in REFERENCE_COUNTS:
        cap = REFERENCE_COUNTS[a.arch]
        print(f"note: the reference count is {cap}; the layer table as described "
              f"yields {trainable} (delta {trainable - cap:+d})")


def _load_or_synth(a, scale, size):
    if a.data:
        root = Path(a.data)
        return load_manifest(root / "train"), load_manifest(root / "test")
    train_set = synth_sonar_generate(11, scale.train_per_class, size, Rng(stable_mix(a.seed, 1)))
    test_set = synth_sonar_generate(11, scale.test_per_class, size, Rng(stable_mix(a.seed, 2)))
    return train_set, test_set


def _overrides(cfg, a):
    changes = {}
    for flag, field_name in (("grid", "grid"), ("trials", "trials"), ("epochs", "epochs"),
                             ("extractor_epochs", "extractor_epochs"), ("resamples", "resamples"),
                             ("inits", "inits")):
        if getattr(a, flag) is not None:
            changes[field_name] = getattr(a, flag)
    for flag, allowed in (("regs", ("bn", "dropout")), ("archs", ("classic", "tiny", "fire"))):
        value = getattr(a, flag)
        if value is not None:
            items = tuple(v.strip() for v in value.split(",") if v.strip())
            bad = [v for v in items if v not in allowed]
            if not items or bad:
                raise UsageError(f"--{flag} accepts {','.join(allowed)}, got {value!r}")
            changes["regularizers" if flag == "regs" else "archs"] = items
    try:
        return replace(cfg, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_exp(a):
    out = Path(a.out_dir)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out-dir {out} is not a directory")
    if out.is_dir() and any(out.iterdir()) and not a.force:
        raise UsageError(f"--out-dir {out} is not empty; pass --force to overwrite")
    cfg = _overrides(H.preset(a.exp, a.paper_scale, a.seed), a)
    scale = H.PAPER_SCALE if a.paper_scale else H.DESK_SCALE
    size = 96 if a.exp == "objsize" else scale.image_size
    train_set, test_set = _load_or_synth(a, scale, size)
    out.mkdir(parents=True, exist_ok=True)
    modes = ("same", "disjoint") if a.mode == "both" else (a.mode,)
    written = []

    def emit(name, rows, schema, header=None, trials=()):
        note = H.excluded_note(trials)
        written.append(H.emit_csv(rows, schema, out / name, a.seed, header, [note] if note else ()))

    if a.exp == "transfer":
        for mode in modes:
            rows, trials = H.run_transfer_feature_size(train_set, cfg, mode, a.jobs)
            emit(f"classicCNN-TransferLearning-{mode}Classes.csv", rows, "transfer", trials=trials)
    elif a.exp == "objsize":
        results, trials = H.run_object_size_sweep(train_set, test_set, cfg, a.jobs)
        for (arch, opt, reg), rows in results.items():
            name = f"{H.ARCH_LABEL[arch]}-{H.REG_LABEL[reg]}-{opt.upper()}-AccuracyVsImageSize.csv"
            emit(name, rows, "objsize", trials=[t for t in trials if t.key == (arch, opt, reg)])
    elif a.exp == "trainsize":
        results, trials = H.run_train_size_sweep(train_set, test_set, cfg, a.jobs)
        labels = {}
        for (arch, reg), rows in results.items():
            labels[(arch, reg)] = f"{H.ARCH_LABEL[arch]}-{H.REG_LABEL[reg]}"
            emit(f"{labels[(arch, reg)]}-AccuracyVsTrainSetSize.csv", rows, "trainsize",
                 trials=[t for t in trials if t.key == (arch, reg)])
        table, header = H.minmax_table(results, cfg.grid, labels)
        emit("AccuracyVsTrainSetSize-minmax.csv", table, "minmax", header)
    else:
        combined, labels = {}, {}
        for mode in modes:
            results, trials = H.run_tl_vs_train_size(train_set, test_set, cfg, mode, a.jobs)
            for (m, reg), rows in results.items():
                label = f"classicCNN-{H.REG_LABEL[reg]}-TransferLearningVsTrainSetSize-{m}Classes"
                emit(f"{label}.csv", rows, "tlsize", trials=[t for t in trials if t.key == (m, reg)])
                combined[(m, reg)], labels[(m, reg)] = rows, f"{m}Classes-{H.REG_LABEL[reg]}"
        table, header = H.minmax_table(combined, cfg.grid, labels)
        emit("TransferLearningVsTrainSetSize-minmax.csv", table, "minmax", header)
    for path in written:
        print(path)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "gradcheck": cmd_gradcheck,
            "params": cmd_params, "exp": cmd_exp}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a) or 0
    except UsageError as exc:
        print(f"sonarnet {a.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"sonarnet {a.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
