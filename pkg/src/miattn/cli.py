"""Command-line interface: featurize, train, cv, gridsearch, predict, explain.

Exit status: 0 on success, 2 for usage errors, 3 for data errors, 4 for I/O
errors. Diagnostics go to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from miattn import __version__
from miattn.chem import parse_smiles
from miattn.container import load_model, save_model
from miattn.errors import DataError, IoFailure, MiattnError
from miattn.featurize import MAX_LEN, N_FEATURES, VOCABULARY_VERSION, featurize_smiles
from miattn.report import extract_attention_weights, map_weights_to_atoms, render_smiles_heatmap
from miattn.training import (
    DEFAULT_GRID, DEFAULT_THRESHOLDS, Dataset, Record, TrainConfig, cross_validate, encode_dataset,
    grid_search, load_dataset_csv, train_model,
)

log = logging.getLogger("miattn")


class UsageError(MiattnError):
    pass


EXIT_USAGE, EXIT_DATA, EXIT_IO = 2, 3, 4


# --------------------------------------------------------------------------
# argument parsing

TRAIN_FLAGS = {
    # flag dest -> TrainConfig field
    "batch": "batch_size",
    "dropout": "dropout",
    "opt": "optimizer",
    "lr": "lr",
    "threshold": "threshold",
    "patience": "patience",
    "max_epochs": "max_epochs",
    "seed": "seed",
    "val_fraction": "val_fraction",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--batch", type=int, default=d.batch_size, help="mini-batch size")
    g.add_argument("--dropout", type=float, default=d.dropout, help="dropout rate")
    g.add_argument("--opt", choices=("adam", "sgd"), default=d.optimizer, help="optimizer")
    g.add_argument("--lr", type=float, default=d.lr, help="learning rate")
    g.add_argument("--threshold", type=float, default=d.threshold, help="classification threshold")
    g.add_argument("--patience", type=int, default=d.patience, help="early-stopping patience (epochs)")
    g.add_argument("--max-epochs", type=int, default=d.max_epochs, help="epoch cap")
    g.add_argument("--val-fraction", type=float, default=d.val_fraction,
                   help="stratified share of training data held out for early stopping "
                        "(0 makes cv stop on the scored fold)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"miattn {__version__}")
    parser.add_argument("--log-level", default="warning", choices=("debug", "info", "warning", "error"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text, data=True, train=False, model=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--config", help="key=value file supplying defaults for any flag")
        if data:
            p.add_argument("--data", help="CSV with id,smiles,label columns")
        if model:
            p.add_argument("--model", required=True, help="weight file written by `train`")
        if train:
            _add_train_flags(p)
        return p

    p = command("featurize", "write feature matrices for a dataset or SMILES list")
    p.add_argument("--smiles", nargs="+", help="SMILES strings (instead of --data)")
    p.add_argument("--csv", action="store_true", help="also write one CSV matrix per molecule")

    command("train", "train one model on a dataset", train=True)

    p = command("cv", "stratified k-fold cross-validation", train=True)
    p.add_argument("--folds", type=int, default=5, help="number of folds")

    p = command("gridsearch", "cross-validate every hyperparameter cell and rank by MCC", train=True)
    p.add_argument("--folds", type=int, default=5, help="number of folds")
    axes = p.add_argument_group("grid axes (comma-separated values)")
    axes.add_argument("--grid-batch", default=",".join(map(str, DEFAULT_GRID["batch_size"])), help="%(default)s")
    axes.add_argument("--grid-dropout", default=",".join(map(str, DEFAULT_GRID["dropout"])), help="%(default)s")
    axes.add_argument("--grid-opt", default=",".join(DEFAULT_GRID["optimizer"]), help="%(default)s")
    axes.add_argument("--grid-lr", default=",".join(map(repr, DEFAULT_GRID["lr"])), help="%(default)s")
    axes.add_argument("--grid-threshold", default=",".join(map(str, DEFAULT_THRESHOLDS)), help="%(default)s")

    p = command("predict", "score molecules with a trained model", model=True)
    p.add_argument("--smiles", nargs="+", help="SMILES strings (instead of --data)")
    p.add_argument("--threshold", type=float, help="override the model's stored threshold")

    p = command("explain", "attention heatmaps for molecules", model=True)
    p.add_argument("--smiles", nargs="+", help="SMILES strings (instead of --data)")
    p.add_argument("--name", help="output file stem when explaining a single SMILES")
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys may use - or _."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        overrides = {}
        for key, value in read_config_file(args.config).items():
            action = actions.get(key)
            if action is None or key in ("config", "out", "help"):
                raise UsageError(f"config key {key!r} is not an option of `{args.command}`")
            if action.nargs in ("+", "*"):
                overrides[key] = value.split()
            elif action.type is not None:
                try:
                    overrides[key] = action.type(value)
                except ValueError as exc:
                    raise UsageError(f"config key {key!r}: {exc}") from exc
            elif action.const is True:
                overrides[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                overrides[key] = value
            if action.choices and overrides[key] not in action.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def train_config(args) -> TrainConfig:
    values = {field: getattr(args, dest) for dest, field in TRAIN_FLAGS.items() if hasattr(args, dest)}
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# outputs


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class RunContext:
    def __init__(self, args, config: dict, rows: int):
        self.out = Path(args.out)
        self.command = args.command
        self.seed = args.seed
        self.config = config
        self.hash = config_hash({"command": args.command, **config})
        self.rows = rows

    def meta(self) -> dict:
        return {"tool": "miattn", "tool_version": __version__, "command": self.command, "seed": self.seed,
                "config": self.config, "config_hash": self.hash, "dataset_rows": self.rows}

    def header(self) -> str:
        return f"# miattn {__version__} seed={self.seed} config_hash={self.hash} rows={self.rows}\n"

    def path(self, name: str) -> Path:
        p = (self.out / name).resolve()
        if self.out.resolve() not in p.parents:
            raise UsageError(f"refusing to write outside the output directory: {name}")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        try:
            with open(p, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise IoFailure(f"cannot write {p}: {exc}") from exc
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        return self.write_text(name, json.dumps({"meta": self.meta(), **payload}, sort_keys=True, indent=2) + "\n")

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        buf = io.StringIO()
        buf.write(self.header())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return self.write_text(name, buf.getvalue())


def _prepare_out(path) -> None:
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {path}: {exc}") from exc


def _load_dataset(args) -> Dataset:
    if not args.data:
        raise UsageError(f"`{args.command}` needs --data")
    try:
        ds = load_dataset_csv(args.data)
    except OSError as exc:
        raise IoFailure(f"cannot read {args.data}: {exc}") from exc
    for f in ds.failures:
        diagnostic("warning", "ParseFailure", f.message, row=f.row, id=f.id, offset=f.offset)
    if len(ds) == 0:
        raise DataError("no usable records in the dataset")
    return ds


def _molecules(args, labelled: bool = False) -> Dataset:
    """Records from --smiles or --data (labels optional for predict/explain)."""
    if getattr(args, "smiles", None):
        if args.data:
            raise UsageError("give either --smiles or --data, not both")
        return Dataset([Record(f"mol{i + 1}", s, 0) for i, s in enumerate(args.smiles)])
    if not args.data:
        raise UsageError(f"`{args.command}` needs --data or --smiles")
    if labelled:
        return _load_dataset(args)
    try:
        with open(args.data, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(line for line in fh if not line.startswith("#"))
            names = [n.strip().lower() for n in reader.fieldnames or []]
            if "smiles" not in names:
                raise DataError("input CSV needs a smiles column")
            reader.fieldnames = names
            return Dataset([Record((row.get("id") or f"mol{i + 1}").strip(), row["smiles"].strip(), 0)
                            for i, row in enumerate(reader)])
    except OSError as exc:
        raise IoFailure(f"cannot read {args.data}: {exc}") from exc


def _fold_rows(cv) -> list[list]:
    rows = []
    for f in cv.folds:
        r = f.report
        c = r.confusion
        rows.append([f.fold, len(f.labels), f.best_epoch, len(f.history), r.loss, r.sensitivity,
                     r.specificity, r.accuracy, r.mcc, r.auc, r.threshold, c.tp, c.tn, c.fp, c.fn])
    return rows


FOLD_HEADER = ["fold", "n_test", "best_epoch", "epochs_run", "loss", "sensitivity", "specificity",
               "accuracy", "mcc", "auc", "threshold", "tp", "tn", "fp", "fn"]


def _loss_rows(history) -> list[list]:
    return [[r.epoch, repr(r.train_loss), repr(r.val_loss)] for r in history]


# --------------------------------------------------------------------------
# commands


def cmd_featurize(args) -> None:
    if args.smiles and args.data:
        raise UsageError("give either --smiles or --data, not both")
    if args.smiles:
        ds = Dataset([Record(f"mol{i + 1}", s, 0) for i, s in enumerate(args.smiles)])
    else:
        ds = _molecules(args)
    ctx = RunContext(args, {"max_len": MAX_LEN, "vocabulary": VOCABULARY_VERSION}, len(ds))
    matrices = np.zeros((len(ds), MAX_LEN, N_FEATURES), dtype=np.float32)
    entries, failures = [], []
    for i, rec in enumerate(ds.records):
        try:
            fm = featurize_smiles(rec.smiles, parse_smiles(rec.smiles))
        except DataError as exc:
            failures.append({"id": rec.id, "message": str(exc), "offset": getattr(exc, "offset", None)})
            diagnostic("warning", type(exc).__name__, str(exc), id=rec.id, offset=getattr(exc, "offset", None))
            continue
        matrices[i] = fm.data
        entries.append({"index": i, "id": rec.id, "smiles": rec.smiles, "valid_rows": fm.valid_rows})
        if args.csv:
            safe = re.sub(r"[^A-Za-z0-9_.-]", "_", rec.id)
            ctx.write_text(f"{safe}.features.csv", fm.to_csv())
    if not entries:
        raise DataError("no molecule could be featurized")
    buf = io.BytesIO()
    np.save(buf, matrices)
    p = ctx.path("matrices.npy")
    try:
        p.write_bytes(buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write {p}: {exc}") from exc
    ctx.write_json("manifest.json", {"shape": list(matrices.shape), "dtype": "float32",
                                     "molecules": entries, "failures": failures})


def cmd_train(args) -> None:
    ds = _load_dataset(args)
    cfg = train_config(args)
    ctx = RunContext(args, cfg.as_dict(), len(ds))
    trained = train_model(encode_dataset(ds), cfg,
                          callback=lambda r: log.info("epoch %d train %.5f val %.5f", r.epoch, r.train_loss, r.val_loss))
    model = trained.model
    try:
        save_model(model, ctx.path("model.miattn"), extra={"config_hash": ctx.hash, "dataset_rows": len(ds)})
    except OSError as exc:
        raise IoFailure(f"cannot write model: {exc}") from exc
    ctx.write_csv("loss_log.csv", ["epoch", "train_loss", "val_loss"], _loss_rows(trained.history))
    ctx.write_json("train_report.json", {
        "best_epoch": trained.best_epoch, "epochs_run": trained.epochs_run,
        "class_ratio": ds.class_ratio(), "kept_descriptors": model.scaler.kept_names(),
    })


def cmd_cv(args) -> None:
    ds = _load_dataset(args)
    cfg = train_config(args)
    ctx = RunContext(args, {**cfg.as_dict(), "folds": args.folds}, len(ds))
    cv = cross_validate(encode_dataset(ds), cfg, k=args.folds)
    ctx.write_csv("cv_folds.csv", FOLD_HEADER, _fold_rows(cv))
    for f in cv.folds:
        ctx.write_csv(f"fold{f.fold}_loss.csv", ["epoch", "train_loss", "val_loss"], _loss_rows(f.history))
    ctx.write_json("cv_report.json", {
        "class_ratio": ds.class_ratio(),
        "folds": [dict(f.report.as_dict(), fold=f.fold, best_epoch=f.best_epoch) for f in cv.folds],
        "mean": cv.mean.as_dict(),
    })


def _split_list(text: str, kind):
    try:
        return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_gridsearch(args) -> None:
    ds = _load_dataset(args)
    base = train_config(args)
    grid = {
        "batch_size": _split_list(args.grid_batch, int),
        "dropout": _split_list(args.grid_dropout, float),
        "optimizer": _split_list(args.grid_opt, str.lower),
        "lr": _split_list(args.grid_lr, float),
    }
    thresholds = _split_list(args.grid_threshold, float)
    config = {**base.as_dict(), "folds": args.folds, "grid": {k: list(v) for k, v in grid.items()},
              "thresholds": list(thresholds)}
    ctx = RunContext(args, config, len(ds))
    rows = grid_search(encode_dataset(ds), base, grid, thresholds, k=args.folds)
    table = []
    for rank, row in enumerate(rows, start=1):
        r = row.report
        table.append([rank, row.params["batch_size"], row.params["dropout"], row.params["optimizer"],
                      row.params["lr"], row.threshold, r.loss, r.sensitivity, r.specificity, r.accuracy,
                      r.mcc, r.auc])
    ctx.write_csv("grid_report.csv", ["rank", "batch", "dropout", "opt", "lr", "threshold", "loss",
                                      "sensitivity", "specificity", "accuracy", "mcc", "auc"], table)
    ctx.write_json("grid_report.json", {"ranked": [
        {"rank": i, "params": row.params, "threshold": row.threshold, "mean": row.report.as_dict(),
         "by_threshold": {repr(t): rep.as_dict() for t, rep in row.by_threshold.items()}}
        for i, row in enumerate(rows, start=1)
    ]})


def _load(args):
    try:
        return load_model(args.model)
    except OSError as exc:
        raise IoFailure(f"cannot read model {args.model}: {exc}") from exc


def cmd_predict(args) -> None:
    model = _load(args)
    ds = _molecules(args)
    tau = model.config.threshold if args.threshold is None else args.threshold
    ctx = RunContext(args, {"model": Path(args.model).name, "threshold": tau}, len(ds))
    rows = []
    for rec in ds.records:
        try:
            R, D = model.prepare([rec.smiles])
        except DataError as exc:
            diagnostic("warning", type(exc).__name__, str(exc), id=rec.id, offset=getattr(exc, "offset", None))
            rows.append([rec.id, "", ""])
            continue
        p = float(model.forward(R, D).probability[0])
        rows.append([rec.id, repr(p), int(p >= tau)])
    ctx.write_csv("predictions.csv", ["id", "probability", "label"], rows)


def cmd_explain(args) -> None:
    model = _load(args)
    ds = _molecules(args)
    if args.name and len(ds) != 1:
        raise UsageError("--name only applies to a single molecule")
    ctx = RunContext(args, {"model": Path(args.model).name}, len(ds))
    for rec in ds.records:
        stem = args.name or re.sub(r"[^A-Za-z0-9_.-]", "_", rec.id)
        try:
            wm = extract_attention_weights(model, rec.smiles)
        except DataError as exc:
            diagnostic("warning", type(exc).__name__, str(exc), id=rec.id, offset=getattr(exc, "offset", None))
            continue
        atoms = map_weights_to_atoms(wm, parse_smiles(rec.smiles))
        doc = render_smiles_heatmap(wm, atoms, ctx.path(f"{stem}.html"))
        ctx.write_text(f"{stem}.weights.json",
                       json.dumps({"meta": ctx.meta(), **doc.table}, sort_keys=True, indent=2) + "\n")


COMMANDS = {
    "featurize": cmd_featurize,
    "train": cmd_train,
    "cv": cmd_cv,
    "gridsearch": cmd_gridsearch,
    "predict": cmd_predict,
    "explain": cmd_explain,
}


# --------------------------------------------------------------------------
# entry point


def diagnostic(level: str, code: str, message: str, **extra) -> None:
    payload = {"level": level, "code": code, "message": message}
    payload.update({k: v for k, v in extra.items() if v is not None})
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        diagnostic("error", "UsageError", str(exc))
        return EXIT_USAGE
    except IoFailure as exc:
        diagnostic("error", "IoFailure", str(exc))
        return EXIT_IO
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        _prepare_out(args.out)
        COMMANDS[args.command](args)
    except UsageError as exc:
        diagnostic("error", "UsageError", str(exc))
        return EXIT_USAGE
    except DataError as exc:
        diagnostic("error", type(exc).__name__, str(exc), offset=getattr(exc, "offset", None),
                   row=getattr(exc, "row", None))
        return EXIT_DATA
    except (IoFailure, OSError) as exc:
        diagnostic("error", "IoFailure", str(exc))
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
