"""Command-line front end.

    cnninte train-cnn   --data-dir DIR --out RUN
    cnninte build-meta  --out RUN [--factors 4,8,16]
    cnninte evaluate    --out RUN
    cnninte interpret   --out RUN --indices 0 5 9 | --all-misclassified
    cnninte pipeline    --data-dir DIR --out RUN

Metrics are printed as ``key=value`` lines and appended to RUN/metrics.txt.
Exit codes: 0 ok, 1 usage, 2 data error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import cnn, interpret, meta, plotting, report, store
from . import forest as F
from .config import RunConfig, parse_config_text, resolve
from .dataset import load_pair
from .errors import ArtifactError, CnnInteError, DataError, IndexOutOfRange

log = logging.getLogger("cnninte")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(cfg: RunConfig, **metrics):
    line = " ".join(f"{k}={v}" for k, v in metrics.items())
    print(line, flush=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.txt", "a") as fh:
        fh.write(line + "\n")


def _echo_config(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())


def load_data(cfg: RunConfig):
    train = load_pair(cfg.path("train_images"), cfg.path("train_labels"), cfg.train_count)
    test = load_pair(cfg.path("test_images"), cfg.path("test_labels"), cfg.test_count)
    return train, test


def _model_path(cfg, args):
    return Path(getattr(args, "model", None) or Path(cfg.out) / "model.bin")


def _ensemble_path(cfg, args, k=None):
    if getattr(args, "ensemble", None):
        return Path(args.ensemble)
    return Path(cfg.out) / ("ensemble" if k is None else f"ensemble_K{k}")


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


# --- stages --------------------------------------------------------------------

def cmd_train_cnn(cfg: RunConfig, args, data=None):
    train, test = data or load_data(cfg)
    model = cnn.train(cfg.cnn(), train)
    store.write_bytes(_model_path(cfg, args), store.dump_model(model))
    if model.training_log:
        plotting.plot_training_loss(model.training_log, Path(cfg.out) / "figures" / "training_loss.png")
    acc = cnn.evaluate(model, test)
    _emit(cfg, cnn_test_accuracy=f"{acc:.4f}", model_checksum=model.checksum()[:16])
    return model, acc


def _factor_list(args, cfg) -> list:
    raw = getattr(args, "factors_sweep", None)
    if not raw:
        return [cfg.factors]
    try:
        ks = [int(v) for v in str(raw).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--factors expects integers, got {raw!r}")
    if not ks or min(ks) <= 0:
        raise UsageError("--factors values must be positive")
    return ks


def cmd_build_meta(cfg: RunConfig, args, data=None, model=None):
    train, test = data or load_data(cfg)
    model = model or store.load_model(_read_file(_model_path(cfg, args)))
    log.info("extracting fc1 activations for %d training images", train.count)
    act = cnn.extract_activations(model, train)
    store.write_bytes(Path(cfg.out) / "activations.bin", store.dump_activations(act))
    ks = _factor_list(args, cfg)
    ranked = F.rank_columns(train.flat())
    results = {}
    for k in ks:
        ens = meta.train_ensemble(act, train, cfg.ensemble(k), ranked=ranked)
        meta_test = meta.build_meta_test(ens, test)
        path = _ensemble_path(cfg, args, None if len(ks) == 1 else k)
        store.save_ensemble(ens, path)
        store.write_bytes(path / "meta_test.bin", store.dump_meta(meta_test))
        acc = meta.evaluate_ensemble(ens, meta_test)
        results[k] = acc
        if len(ks) == 1:
            _emit(cfg, meta_test_accuracy=f"{acc:.4f}")
        else:
            _emit(cfg, factors=k, meta_test_accuracy=f"{acc:.4f}")
    if len(ks) > 1:
        best = max(ks, key=lambda k: (results[k], -k))
        _emit(cfg, best_factors=best)
        plotting.plot_factor_sweep(results, Path(cfg.out) / "figures" / "factor_sweep.png")
    return results


def _load_interpretation_inputs(cfg, args):
    ens_dir = _ensemble_path(cfg, args)
    ens = store.load_ensemble(ens_dir)
    meta_test = store.load_meta(_read_file(ens_dir / "meta_test.bin"))
    act_path = ens_dir / "activations.bin"
    if not act_path.exists():
        act_path = ens_dir.parent / "activations.bin"
    act = store.load_activations(_read_file(act_path))
    if ens.meta_train is None:
        raise ArtifactError(f"{ens_dir} has no meta_train.bin")
    return ens, meta_test, act


def cmd_evaluate(cfg: RunConfig, args):
    metrics = {}
    model_path = _model_path(cfg, args)
    if model_path.exists():
        _, test = load_data(cfg)
        metrics["cnn_test_accuracy"] = f"{cnn.evaluate(store.load_model(_read_file(model_path)), test):.4f}"
    ens_dir = _ensemble_path(cfg, args)
    if (ens_dir / "meta_test.bin").exists():
        ens = store.load_ensemble(ens_dir)
        meta_test = store.load_meta(_read_file(ens_dir / "meta_test.bin"))
        metrics["meta_test_accuracy"] = f"{meta.evaluate_ensemble(ens, meta_test):.4f}"
    if not metrics:
        raise UsageError(f"nothing to evaluate under {cfg.out}")
    _emit(cfg, **metrics)
    return metrics


def default_indices(ens, meta_test, n_correct=2, n_wrong=1) -> list:
    """Lowest-index correctly and wrongly classified instances (the True/Wrong style picks)."""
    pred = meta.meta_predict(ens, meta_test)
    right = np.flatnonzero(pred == meta_test.labels)[:n_correct]
    wrong = np.flatnonzero(pred != meta_test.labels)[:n_wrong]
    return sorted(int(i) for i in np.concatenate([right, wrong]))


def cmd_interpret(cfg: RunConfig, args):
    ens, meta_test, act = _load_interpretation_inputs(cfg, args)
    if getattr(args, "all_misclassified", False):
        pred = meta.meta_predict(ens, meta_test)
        indices = [int(i) for i in np.flatnonzero(pred != meta_test.labels)]
    elif getattr(args, "indices", None):
        indices = list(args.indices)
    else:
        indices = default_indices(ens, meta_test)
    for i in indices:
        if not 0 <= i < len(meta_test):
            raise IndexOutOfRange(f"instance {i} outside 0..{len(meta_test) - 1}")
    out = Path(cfg.out) / "interp"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in indices:
        tr = interpret.trace(ens, meta_test, ens.meta_train, act, i)
        svg = out / report.svg_filename(tr)
        svg.write_bytes(report.render_svg(tr))
        svg.with_suffix(".trace.txt").write_text(interpret.trace_to_text(tr))
        if getattr(args, "png", False):
            plotting.plot_trace(tr, svg.with_suffix(".png"))
        written.append(svg)
        _emit(cfg, instance=i, true=tr.true_class, pred=tr.predicted_class,
              correct=int(tr.correct), separated=tr.separated_count(), svg=svg.name)
    return written


def cmd_pipeline(cfg: RunConfig, args):
    if getattr(args, "factors_sweep", None):
        raise UsageError("pipeline takes a single --factors value; use build-meta for sweeps")
    data = load_data(cfg)
    model, _ = cmd_train_cnn(cfg, args, data)
    cmd_build_meta(cfg, args, data, model)
    return cmd_interpret(cfg, args)


# --- argument parsing ------------------------------------------------------------

_FLAG_FIELDS = ("data_dir", "train_images", "train_labels", "test_images", "test_labels", "train_count",
                "test_count", "steps", "batch_size", "dropout_keep", "fc1_neurons", "learning_rate", "clusters",
                "tree_depth", "trees", "max_nodes", "seed", "out")


def _add_common(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--data-dir")
    for name in ("train-images", "train-labels", "test-images", "test-labels"):
        p.add_argument(f"--{name}")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout-keep", type=float)
    p.add_argument("--fc1-neurons", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--factors", dest="factors_sweep", help="K, or a comma list to sweep")
    p.add_argument("--clusters", type=int)
    p.add_argument("--tree-depth", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--max-nodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--model", help="model file (default OUT/model.bin)")
    p.add_argument("--ensemble", help="ensemble directory (default OUT/ensemble)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cnninte", description="Interpret a CNN's fc1 layer through a meta-learned decision tree.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("train-cnn", "train the CNN and report test accuracy"),
                        ("build-meta", "extract activations, factorize, train meta tree and base forests"),
                        ("evaluate", "report accuracies of persisted artifacts"),
                        ("interpret", "write trace SVGs for test instances"),
                        ("pipeline", "run every stage")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name in ("interpret", "pipeline"):
            p.add_argument("--indices", type=int, nargs="+")
            p.add_argument("--all-misclassified", action="store_true")
            p.add_argument("--png", action="store_true", help="also write matplotlib PNG grids")
    return parser


def config_from_args(args, environ=None) -> RunConfig:
    file_values = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    flags = {name: getattr(args, name, None) for name in _FLAG_FIELDS}
    sweep = getattr(args, "factors_sweep", None)
    if sweep and "," not in str(sweep):
        try:
            flags["factors"] = int(sweep)
        except ValueError:
            raise UsageError(f"--factors expects integers, got {sweep!r}")
        args.factors_sweep = None
    try:
        return resolve(file_values, flags, environ)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


COMMANDS = {"train-cnn": cmd_train_cnn, "build-meta": cmd_build_meta, "evaluate": cmd_evaluate,
            "interpret": cmd_interpret, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        if args.command in ("train-cnn", "pipeline"):
            _echo_config(cfg)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"cnninte: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IndexOutOfRange) as exc:
        print(f"cnninte: data error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CnnInteError, AssertionError) as exc:
        print(f"cnninte: internal error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
