"""Dataset ingestion, stratified folds, mini-batch training, CV and grid search."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from miattn.chem import SmilesError, parse_smiles
from miattn.descriptors import DESCRIPTOR_NAMES, apply_scaler, compute_descriptors, fit_scaler
from miattn.errors import DataError
from miattn.featurize import MAX_LEN, N_FEATURES, featurize_smiles
from miattn.metrics import MetricReport, evaluate, mean_report
from miattn.model import ModelConfig, MultiInputModel
from miattn.nn.layers import bce_loss
from miattn.nn.optim import make_optimizer

log = logging.getLogger(__name__)


class MissingColumn(DataError):
    pass


class BadLabel(DataError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DuplicateId(BadLabel):
    pass


class TooFewSamples(DataError):
    pass


class EmptyGrid(DataError):
    pass


# --------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True)
class Record:
    id: str
    smiles: str
    label: int


@dataclass(frozen=True)
class ParseFailure:
    row: int
    id: str
    offset: int | None
    message: str


@dataclass
class Dataset:
    records: list[Record]
    failures: list[ParseFailure] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def smiles(self) -> list[str]:
        return [r.smiles for r in self.records]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def class_counts(self) -> tuple[int, int]:
        pos = int(self.labels.sum())
        return pos, len(self) - pos

    def class_ratio(self) -> str:
        pos, neg = self.class_counts()
        if pos == 0:
            return f"{pos}:{neg}"
        return f"{pos}:{neg} ≈ 1:{neg / pos:.1f}"


REQUIRED_COLUMNS = ("id", "smiles", "label")


def load_dataset_csv(path, validate: bool = True) -> Dataset:
    """Read ``id,smiles,label`` rows; rows that fail to parse land in ``failures``.

    Row numbers count the header as row 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        header = [h.strip().lower() for h in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}")
        reader.fieldnames = header
        records, failures, seen = [], [], set()
        for row_no, row in enumerate(reader, start=2):
            rid, smi, lab = (row[c].strip() if row[c] is not None else "" for c in REQUIRED_COLUMNS)
            if lab not in ("0", "1"):
                raise BadLabel(f"label {lab!r} is not 0 or 1", row_no)
            if rid in seen:
                raise DuplicateId(f"duplicate id {rid!r}", row_no)
            seen.add(rid)
            if validate:
                try:
                    featurize_smiles(smi, parse_smiles(smi))
                except SmilesError as exc:
                    failures.append(ParseFailure(row_no, rid, exc.offset, str(exc)))
                    continue
                except DataError as exc:
                    failures.append(ParseFailure(row_no, rid, None, str(exc)))
                    continue
            records.append(Record(rid, smi, int(lab)))
    for f in failures:
        log.warning("row %d (%s) skipped: %s", f.row, f.id, f.message)
    return Dataset(records, failures)


@dataclass
class EncodedSet:
    """Feature matrices, raw descriptors and labels for a list of molecules."""

    matrices: np.ndarray
    descriptors: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSet(self.matrices[idx], self.descriptors[idx], self.labels[idx],
                          [self.ids[i] for i in idx] if self.ids else [])


def encode_smiles(smiles: Sequence[str], max_len: int = MAX_LEN) -> tuple[np.ndarray, np.ndarray]:
    R = np.zeros((len(smiles), max_len, N_FEATURES), dtype=np.float32)
    D = np.zeros((len(smiles), len(DESCRIPTOR_NAMES)))
    for i, s in enumerate(smiles):
        g = parse_smiles(s)
        R[i] = featurize_smiles(s, g, max_len=max_len).data
        D[i] = compute_descriptors(g).values
    return R, D


def encode_dataset(ds: Dataset) -> EncodedSet:
    R, D = encode_smiles(ds.smiles)
    return EncodedSet(R, D, ds.labels.astype(np.float64), ds.ids)


# --------------------------------------------------------------------------
# Folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    test_indices: tuple[np.ndarray, ...]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([t for i, t in enumerate(self.test_indices) if i != fold]))


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class with ``seed`` and deal members round-robin into ``k`` folds."""
    y = np.asarray(labels).astype(np.int64)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    slot = 0
    for cls in (1, 0):
        members = np.flatnonzero(y == cls)
        if members.size < k:
            raise TooFewSamples(f"class {cls} has {members.size} members, need at least {k}")
        for i in rng.permutation(members):
            buckets[slot % k].append(int(i))
            slot += 1
    return FoldPlan(k, tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets))


def inner_split(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified ``(train, validation)`` positions with about ``fraction`` held out."""
    y = np.asarray(labels).astype(np.int64)
    rng = np.random.default_rng(seed)
    val = []
    for cls in (1, 0):
        members = rng.permutation(np.flatnonzero(y == cls))
        n_val = int(round(fraction * members.size))
        if members.size >= 2:
            n_val = min(max(n_val, 1), members.size - 1)
        val.extend(members[:n_val].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(y.size), val)
    return train, val


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    batch_size: int = 128
    dropout: float = 0.5
    optimizer: str = "adam"
    lr: float = 1e-5
    threshold: float = 0.5
    patience: int = 30
    max_epochs: int = 1000
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.optimizer.lower() not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.optimizer = self.optimizer.lower()

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def early_stopping_check(val_losses: Sequence[float], patience: int = 30) -> bool:
    """True once ``patience`` epochs have passed without a strictly lower loss."""
    if len(val_losses) == 0:
        return False
    best = int(np.argmin(val_losses))
    return len(val_losses) - 1 - best >= patience


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a single-sample batch has no batch statistics; fold it into its neighbour
    if len(chunks) > 1 and chunks[-1].size == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


@dataclass
class TrainedFold:
    model: MultiInputModel
    history: list[EpochRecord]
    best_epoch: int

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def train_fold(train: EncodedSet, val: EncodedSet | None, cfg: TrainConfig,
               callback: Callable[[EpochRecord], None] | None = None) -> TrainedFold:
    """Fit a fresh model; the returned weights are those of the best validation epoch.

    The descriptor scaler is fitted on ``train`` only. Without a validation set
    the training-set eval loss drives early stopping.
    """
    scaler = fit_scaler(train.descriptors)
    D_train = apply_scaler(train.descriptors, scaler)
    model = MultiInputModel(
        ModelConfig(dropout=cfg.dropout, n_descriptors=scaler.n_kept, threshold=cfg.threshold, seed=cfg.seed),
        scaler,
    )
    monitor = val if val is not None and len(val) else train
    D_monitor = apply_scaler(monitor.descriptors, scaler)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))

    history: list[EpochRecord] = []
    best_loss, best_state, best_epoch = np.inf, model.state_dict(), 0
    val_losses: list[float] = []
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, shuffle):
            model.forward(train.matrices[idx], D_train[idx], train=True)
            total += model.backward(train.labels[idx]) * idx.size
            opt.step()
            opt.zero_grad()
        train_loss = total / len(train)
        probs = model.predict_proba(monitor.matrices, D_monitor)
        val_loss = bce_loss(probs, monitor.labels)
        rec = EpochRecord(epoch, train_loss, val_loss)
        history.append(rec)
        val_losses.append(val_loss)
        if callback is not None:
            callback(rec)
        if val_loss < best_loss:
            best_loss, best_state, best_epoch = val_loss, model.state_dict(), epoch
        if not np.isfinite(train_loss):
            log.warning("training diverged at epoch %d", epoch)
            break
        if early_stopping_check(val_losses, cfg.patience):
            break
    model.load_state_dict(best_state)
    return TrainedFold(model, history, best_epoch)


def train_model(data: EncodedSet, cfg: TrainConfig, callback=None) -> TrainedFold:
    """Train on all of ``data`` with a stratified inner split for early stopping."""
    if cfg.val_fraction > 0:
        tr, va = inner_split(data.labels, cfg.val_fraction, cfg.seed)
        return train_fold(data.subset(tr), data.subset(va), cfg, callback)
    return train_fold(data, None, cfg, callback)


# --------------------------------------------------------------------------
# Cross-validation


@dataclass
class FoldOutcome:
    fold: int
    test_indices: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray
    report: MetricReport
    history: list[EpochRecord]
    best_epoch: int
    model: MultiInputModel | None = None


@dataclass
class CVResult:
    config: TrainConfig
    folds: list[FoldOutcome]
    mean: MetricReport
    n_samples: int

    def out_of_fold(self) -> tuple[np.ndarray, np.ndarray]:
        probs = np.empty(self.n_samples)
        labels = np.empty(self.n_samples)
        for f in self.folds:
            probs[f.test_indices] = f.probabilities
            labels[f.test_indices] = f.labels
        return probs, labels

    def at_threshold(self, threshold: float) -> MetricReport:
        """Re-score the stored fold probabilities at another threshold."""
        reports = [evaluate(f.probabilities, f.labels, threshold, f.report.loss) for f in self.folds]
        return mean_report(reports)


def _run_fold(args) -> FoldOutcome:
    data, plan, fold, cfg, keep_model = args
    fold_cfg = replace(cfg, seed=cfg.seed + fold)
    test_idx = plan.test_indices[fold]
    train_set = data.subset(plan.train_indices(fold))
    test_set = data.subset(test_idx)
    if cfg.val_fraction > 0:
        tr, va = inner_split(train_set.labels, cfg.val_fraction, fold_cfg.seed)
        trained = train_fold(train_set.subset(tr), train_set.subset(va), fold_cfg)
    else:
        trained = train_fold(train_set, test_set, fold_cfg)
    model = trained.model
    probs = model.predict_proba(test_set.matrices, apply_scaler(test_set.descriptors, model.scaler))
    loss = bce_loss(probs, test_set.labels)
    report = evaluate(probs, test_set.labels, cfg.threshold, loss)
    log.info("fold %d: best epoch %d of %d, auc %.4f, mcc %.4f",
             fold, trained.best_epoch, trained.epochs_run, report.auc, report.mcc)
    return FoldOutcome(fold, test_idx, probs, test_set.labels, report, trained.history, trained.best_epoch,
                       model if keep_model else None)


def worker_count() -> int:
    env = os.environ.get("MIATTN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring MIATTN_THREADS=%r", env)
    return os.cpu_count() or 1


def _map(fn, jobs: list, workers: int | None = None) -> list:
    workers = min(worker_count() if workers is None else workers, len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def cross_validate(data: EncodedSet, cfg: TrainConfig, k: int = 5, workers: int | None = None,
                   keep_models: bool = False) -> CVResult:
    """Stratified k-fold CV; fold ``i`` trains with seed ``cfg.seed + i``.

    With ``val_fraction > 0`` each training portion keeps a stratified inner
    split for early stopping and the held-out fold is only scored. With
    ``val_fraction == 0`` the held-out fold also drives early stopping.
    ``keep_models`` attaches each fold's best model to its outcome.
    """
    plan = stratified_kfold(data.labels, k, cfg.seed)
    outcomes = _map(_run_fold, [(data, plan, i, cfg, keep_models) for i in range(k)], workers)
    return CVResult(cfg, outcomes, mean_report([o.report for o in outcomes]), len(data))


# --------------------------------------------------------------------------
# Grid search

DEFAULT_GRID: dict[str, tuple] = {
    "batch_size": (32, 64, 128, 512),
    "dropout": (0.0, 0.2, 0.5),
    "optimizer": ("sgd", "adam"),
    "lr": (1e-4, 1e-5, 1e-6),
}
DEFAULT_THRESHOLDS = (0.2, 0.5, 0.8)


def expand_grid(grid: dict[str, Iterable]) -> list[dict]:
    keys = list(grid)
    values = [tuple(grid[k]) for k in keys]
    empty = [k for k, v in zip(keys, values) if not v]
    if not keys or empty:
        raise EmptyGrid(f"grid dimension(s) without values: {', '.join(empty) or '<none>'}")
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


@dataclass
class GridRow:
    params: dict
    threshold: float
    report: MetricReport
    by_threshold: dict[float, MetricReport]


def grid_search(data: EncodedSet, base: TrainConfig, grid: dict[str, Iterable] | None = None,
                thresholds: Sequence[float] = DEFAULT_THRESHOLDS, k: int = 5,
                workers: int | None = None) -> list[GridRow]:
    """Cross-validate every grid cell and rank by mean MCC (ties: higher AUC, then grid order).

    Thresholds do not affect training, so each cell is trained once and scored
    at every threshold from its stored fold probabilities.
    """
    cells = expand_grid(DEFAULT_GRID if grid is None else grid)
    if not thresholds:
        raise EmptyGrid("no thresholds to score")
    cfgs = [replace(base, **cell) for cell in cells]
    plan = stratified_kfold(data.labels, k, base.seed)
    jobs = [(data, plan, fold, cfg, False) for cfg in cfgs for fold in range(k)]
    outcomes = _map(_run_fold, jobs, workers)
    rows = []
    for i, (cell, cfg) in enumerate(zip(cells, cfgs)):
        folds = outcomes[i * k:(i + 1) * k]
        cv = CVResult(cfg, folds, mean_report([o.report for o in folds]), len(data))
        scored = {float(t): cv.at_threshold(float(t)) for t in thresholds}
        best_t = max(scored, key=lambda t: (scored[t].mcc, t))
        rows.append(GridRow(cell, best_t, scored[best_t], scored))
    order = sorted(range(len(rows)), key=lambda i: (-rows[i].report.mcc, -rows[i].report.auc, i))
    return [rows[i] for i in order]

