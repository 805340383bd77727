"""Training runs, shift sweeps and the analyses built on them.

Artifacts
---------
* run records: JSON lines, one object per run, ``format_version`` first;
* sweep tables: CSV starting with ``# format_version: 1`` and columns
  ``shift, seed, final_test_acc, first_epoch_train_acc, status``;
* histograms: CSV with the same version line and columns ``bin_left, count``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import data as data_mod
from .models import Model, ModelSpec, build, init_from_pretrained, load_checkpoint
from .nn import BatchNorm, SignAct, named_layers, softmax_xent
from .nn.activations import ConfigError
from .nn.container import Sequential
from .optim import lr_at, make_optimizer

FORMAT_VERSION = 1


class FormatVersionError(ValueError):
    pass


class MirrorError(AssertionError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset: str = "mnist"
    data_dir: str | None = None
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 256
    warmup: int = 0
    shifts: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    trainable_threshold: bool = False
    record_distributions: bool = False
    # None: on for CIFAR-10, off for MNIST
    augment: bool | None = None
    # zero-pad images spatially (MNIST into a 32x32 architecture uses 2)
    pad: int = 0
    # first N items of each split; 0 keeps everything
    train_subset: int = 0
    test_subset: int = 0
    # samples of the test split used for balance statistics and snapshots
    analysis_samples: int = 1000
    pretrained: str | None = None
    pretrained_shift: float = 0.0

    def __post_init__(self):
        if not self.shifts:
            raise ConfigError("shift grid must not be empty")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.trainable_threshold and self.model.activation != "sign":
            raise ConfigError("trainable thresholds need the sign activation")
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")

    @property
    def use_augment(self) -> bool:
        return self.dataset == "cifar10" if self.augment is None else self.augment

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c, hw = (1, 28) if self.dataset == "mnist" else (3, 32)
        return c, hw + 2 * self.pad, hw + 2 * self.pad

    def spec_for(self, shift: float) -> ModelSpec:
        """Model spec of one run; the input shape follows the dataset unless set explicitly."""
        spec = self.model.with_shift(shift) if self.model.activation != "relu6" else self.model
        if spec.input_shape is None:
            spec = dataclasses.replace(spec, input_shape=self.input_shape)
        if self.trainable_threshold:
            sign = dataclasses.replace(spec.sign, trainable=True, per_channel=True)
            spec = dataclasses.replace(spec, sign=sign)
        return spec

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shifts"] = list(self.shifts)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        d["shifts"] = tuple(float(s) for s in d["shifts"])
        d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    format_version: int
    config_hash: str
    config: dict
    shift: float
    seed: int
    status: str  # "ok" or "diverged"
    epochs: list[dict]
    balance: dict[str, float] = field(default_factory=dict)
    thresholds: dict[str, dict] = field(default_factory=dict)
    preact_hist: dict[str, dict] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def final_test_acc(self) -> float:
        return self.epochs[-1]["test_acc"]

    @property
    def first_epoch_train_acc(self) -> float:
        return self.epochs[0]["train_acc"]

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(dataclasses.asdict(self)))

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        d = json.loads(line)
        if d.get("format_version") != FORMAT_VERSION:
            raise FormatVersionError(f"unsupported record format_version {d.get('format_version')!r}")
        d["epochs"] = [{k: (math.nan if v is None else v) for k, v in e.items()} for e in d["epochs"]]
        return cls(**d)


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------- data

_DATA_CACHE: dict = {}


def load_data(cfg: ExperimentConfig) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    """Train/test splits for ``cfg``, cached per process."""
    key = (cfg.dataset, cfg.data_dir)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = data_mod.load(cfg.dataset, cfg.data_dir)
    train, test = _DATA_CACHE[key]
    train = data_mod.pad_images(train.subset(cfg.train_subset), cfg.pad)
    test = data_mod.pad_images(test.subset(cfg.test_subset), cfg.pad)
    return train, test


# ---------------------------------------------------------------- training

def evaluate(model: Model, ds: data_mod.Dataset, batch_size: int = 1000) -> tuple[float, float]:
    """(mean loss, accuracy) in eval mode."""
    model.eval()
    loss_sum, correct = 0.0, 0
    for s in range(0, len(ds), batch_size):
        x, y = ds.images[s:s + batch_size], ds.labels[s:s + batch_size]
        logits = model.forward(x)
        loss, _ = softmax_xent(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return loss_sum / len(ds), correct / len(ds)


def bn_sign_pairs(model: Model) -> list[tuple[str, BatchNorm, SignAct]]:
    """(activation name, batch norm, activation) for each sign right after a batch norm."""
    out = []
    for qname, layer in named_layers(model.net):
        if not isinstance(layer, Sequential):
            continue
        prev = None
        for name, child in layer.layers:
            if isinstance(child, SignAct) and isinstance(prev, BatchNorm):
                out.append((f"{qname}.{name}" if qname else name, prev, child))
            prev = child
    return out


def check_mirror(model: Model):
    """Raise unless every trainable threshold gradient is the exact negative of its BN bias gradient."""
    for name, bn, act in bn_sign_pairs(model):
        if act.cfg.trainable and act.cfg.per_channel and not np.array_equal(act.threshold.grad, -bn.beta.grad):
            raise MirrorError(f"{name}: threshold gradient is not the negated batch-norm bias gradient")


def train_run(cfg: ExperimentConfig, shift: float, seed: int, data=None, log=None,
              debug_mirror: bool = False) -> tuple[RunRecord, Model]:
    """Train one model and return its record and the trained model."""
    t0 = time.perf_counter()
    train, test = data if data is not None else load_data(cfg)
    model = build(cfg.spec_for(shift), seed)
    if cfg.pretrained:
        init_from_pretrained(model, load_checkpoint(cfg.pretrained), cfg.pretrained_shift)
    opt = make_optimizer(cfg.optimizer, model.params(), cfg.momentum)
    epochs, status = [], "ok"
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.lr, cfg.warmup)
        if status != "ok":
            epochs.append(dict(epoch=epoch, lr=lr, train_loss=math.nan, train_acc=math.nan,
                               test_loss=math.nan, test_acc=math.nan))
            continue
        model.train()
        loss_sum, correct = 0.0, 0
        for x, y in data_mod.batches(train, cfg.batch_size, seed, cfg.use_augment, epoch):
            logits = model.forward(x)
            loss, grad = softmax_xent(logits, y)
            if not math.isfinite(loss):
                status = "diverged"
                break
            model.backward(grad)
            if debug_mirror:
                check_mirror(model)
            opt.step(lr)
            loss_sum += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
        if status != "ok":
            epochs.append(dict(epoch=epoch, lr=lr, train_loss=math.nan, train_acc=math.nan,
                               test_loss=math.nan, test_acc=math.nan))
            continue
        test_loss, test_acc = evaluate(model, test)
        epochs.append(dict(epoch=epoch, lr=lr, train_loss=loss_sum / len(train), train_acc=correct / len(train),
                           test_loss=test_loss, test_acc=test_acc))
        if log:
            log(f"shift {shift:+.2f} seed {seed} epoch {epoch + 1}/{cfg.epochs} lr {lr:.5f} "
                f"train_loss {epochs[-1]['train_loss']:.4f} train_acc {epochs[-1]['train_acc']:.4f} "
                f"test_loss {test_loss:.4f} test_acc {test_acc:.4f}")
    rec = RunRecord(FORMAT_VERSION, cfg.hash(), cfg.to_dict(), float(shift), int(seed), status, epochs)
    if status == "ok" and model.sign_layers():
        sample = test.images[:cfg.analysis_samples]
        rec.balance = balance_stats(model, sample)
        rec.thresholds = threshold_table(model)
        if cfg.record_distributions:
            rec.preact_hist = preactivation_histograms(model, sample)
    rec.wall_time = time.perf_counter() - t0
    return rec, model


# ---------------------------------------------------------------- analyses

def balance_stats(model: Model, x: np.ndarray, batch_size: int = 500) -> dict[str, float]:
    """Fraction of +1 outputs of every binary activation over all elements of ``x``."""
    layers = model.sign_layers()
    if not layers:
        raise ConfigError("model has no binary activation")
    model.eval()
    plus = {n: 0 for n, _ in layers}
    total = {n: 0 for n, _ in layers}
    for _, layer in layers:
        layer.record = True
    try:
        for s in range(0, len(x), batch_size):
            model.forward(x[s:s + batch_size])
            for n, layer in layers:
                plus[n] += layer.last_plus_count
                total[n] += layer.last_size
    finally:
        for _, layer in layers:
            layer.record = False
    return {n: plus[n] / total[n] for n, _ in layers}


def plus_fraction(y: np.ndarray) -> float:
    """Fraction of +1 entries in a ±1 tensor."""
    return float(np.count_nonzero(y > 0)) / y.size


def threshold_table(model: Model) -> dict[str, dict]:
    """Per activation: batch-norm bias, threshold and effective threshold (th - beta) per channel."""
    out = {}
    for name, bn, act in bn_sign_pairs(model):
        beta = bn.beta.value.astype(np.float64)
        th = np.broadcast_to(act.threshold.value.astype(np.float64), beta.shape)
        out[name] = {"beta": beta.tolist(), "th": th.tolist(), "effective": (th - beta).tolist()}
    return out


def preactivation_histograms(model: Model, x: np.ndarray, bins: int = 80,
                             lo: float = -4.0, hi: float = 4.0) -> dict[str, dict]:
    """Histogram of the inputs of every binary activation (values outside [lo, hi] land in the end bins)."""
    model.eval()
    model.forward(x)
    edges = np.linspace(lo, hi, bins + 1)
    out = {}
    for name, layer in model.sign_layers():
        v = np.clip(np.asarray(layer._x, dtype=np.float64).ravel(), lo, hi)
        counts, _ = np.histogram(v, edges)
        out[name] = {"bin_left": edges[:-1].tolist(), "count": counts.tolist(),
                     "mean": float(v.mean()), "median": float(np.median(v))}
    return out


def _run_one(args):
    cfg, shift, seed = args
    rec, _ = train_run(cfg, shift, seed)
    return rec


def _run_settings(cfg: ExperimentConfig) -> str:
    return cfg.replace(shifts=(0.0,), seeds=(0,)).hash()


def run_grid(cfg: ExperimentConfig, workers: int = 1, log=None, on_record=None,
             done: list[RunRecord] = ()) -> list[RunRecord]:
    """One run per (shift, seed), returned in (shift, seed) order.

    ``on_record`` is called with each new record as soon as its run finishes.
    Records in ``done`` trained with the same settings as ``cfg`` (the shift
    and seed lists aside) are reused instead of retrained.
    """
    key = _run_settings(cfg)
    have = {(r.shift, r.seed): r for r in done if _run_settings(ExperimentConfig.from_dict(r.config)) == key}
    jobs = [(cfg, float(s), int(seed)) for s in sorted(cfg.shifts) for seed in cfg.seeds
            if (float(s), int(seed)) not in have]

    def finish(rec):
        have[(rec.shift, rec.seed)] = rec
        if on_record:
            on_record(rec)
        if log:
            log(f"shift {rec.shift:+.2f} seed {rec.seed}: {rec.status} test_acc {rec.final_test_acc:.4f}")

    if workers <= 1:
        data = load_data(cfg) if jobs else None
        for c, s, seed in jobs:
            finish(train_run(c, s, seed, data)[0])
    elif jobs:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for fut in as_completed([pool.submit(_run_one, j) for j in jobs]):
                finish(fut.result())
    return [have[(float(s), int(seed))] for s in sorted(cfg.shifts) for seed in cfg.seeds]


@dataclass
class ShiftSummary:
    shift: float
    mean: float
    std: float
    n_ok: int
    n_failed: int
    first_epoch_mean: float


def summarize(records: list[RunRecord]) -> list[ShiftSummary]:
    """Mean and sample standard deviation of final test accuracy per shift over completed runs.

    The standard deviation is 0 when only one run completed.
    """
    by_shift: dict[float, list[RunRecord]] = {}
    for r in records:
        by_shift.setdefault(r.shift, []).append(r)
    out = []
    for s in sorted(by_shift):
        ok = [r for r in by_shift[s] if r.status == "ok"]
        acc = np.array([r.final_test_acc for r in ok])
        fe = np.array([r.first_epoch_train_acc for r in ok])
        mean = float(acc.mean()) if len(acc) else math.nan
        std = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
        out.append(ShiftSummary(s, mean, std, len(ok), len(by_shift[s]) - len(ok),
                                float(fe.mean()) if len(fe) else math.nan))
    return out


def shift_sweep(cfg: ExperimentConfig, workers: int = 1, log=None, on_record=None,
                done: list[RunRecord] = ()) -> tuple[list[ShiftSummary], list[RunRecord]]:
    records = run_grid(cfg, workers, log, on_record, done)
    return summarize(records), records


def select_shift(acc: dict[float, float]) -> float:
    """Shift with the highest accuracy; ties go to the smaller |shift| (then the smaller shift)."""
    if not acc:
        raise ValueError("no accuracies to choose from")
    return min(acc, key=lambda s: (-acc[s], abs(s), s))


def first_epoch_search(cfg: ExperimentConfig, workers: int = 1, log=None) -> tuple[float, dict[float, float]]:
    """Train every shift for one epoch and pick the best mean first-epoch train accuracy.

    The one-epoch runs use the learning rate of the first epoch of the full
    schedule (identical to ``lr_at(0, epochs, ...)``).
    """
    one = cfg.replace(epochs=1)
    records = run_grid(one, workers, log)
    acc: dict[float, list[float]] = {}
    for r in records:
        if r.status == "ok":
            acc.setdefault(r.shift, []).append(r.first_epoch_train_acc)
    means = {s: float(np.mean(v)) for s, v in acc.items()}
    return select_shift(means), means


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


def search_validity(summary: list[ShiftSummary]) -> float:
    """Spearman correlation between first-epoch train accuracy and final test accuracy across shifts."""
    return spearman([s.first_epoch_mean for s in summary], [s.mean for s in summary])


@dataclass
class ThresholdStudy:
    init: float
    records: list[RunRecord]

    def effective(self) -> np.ndarray:
        """All per-channel effective thresholds of all runs."""
        vals = [v for r in self.records for t in r.thresholds.values() for v in t["effective"]]
        return np.asarray(vals, dtype=np.float64)

    def pairs(self) -> list[tuple[float, float]]:
        return [(b, t) for r in self.records for v in r.thresholds.values() for b, t in zip(v["beta"], v["th"])]


def threshold_bias_study(cfg: ExperimentConfig, workers: int = 1, log=None) -> list[ThresholdStudy]:
    """Train with per-channel trainable thresholds, one study per initial threshold in ``cfg.shifts``."""
    cfg = cfg.replace(trainable_threshold=True)
    records = run_grid(cfg, workers, log)
    return [ThresholdStudy(s, [r for r in records if r.shift == s]) for s in sorted(cfg.shifts)]


def histogram(values, bins: int = 40, lo: float | None = None, hi: float | None = None):
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins, (lo, hi))
    return edges[:-1], counts


@dataclass
class SlopeGrid:
    slopes: list[float]
    table: dict[tuple[float, float], ShiftSummary]
    snapshots: dict[float, dict]


def slope_grid(cfg: ExperimentConfig, slopes, workers: int = 1, log=None) -> SlopeGrid:
    """Shift sweep for every LeakyReLU slope, with pre-activation snapshots at shift 0."""
    if cfg.model.arch != "resnet20ds":
        raise ConfigError("slope grid needs arch resnet20ds")
    table, snaps = {}, {}
    for slope in slopes:
        spec = dataclasses.replace(cfg.model, extra_act="leaky", leaky_slope=float(slope))
        sub = cfg.replace(model=spec, record_distributions=True)
        summary, records = shift_sweep(sub, workers, log)
        for s in summary:
            table[(float(slope), s.shift)] = s
        at_zero = [r for r in records if r.shift == 0.0 and r.preact_hist]
        if at_zero:
            snaps[float(slope)] = at_zero[0].preact_hist
    return SlopeGrid([float(s) for s in slopes], table, snaps)


# ---------------------------------------------------------------- files

def write_records(records, path):
    with open(path, "a") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_records(path) -> list[RunRecord]:
    with open(path) as f:
        return [RunRecord.from_json(line) for line in f if line.strip()]


SWEEP_COLUMNS = ["shift", "seed", "final_test_acc", "first_epoch_train_acc", "status"]


def _check_version_line(f, path):
    first = f.readline().strip()
    if first != f"# format_version: {FORMAT_VERSION}":
        raise FormatVersionError(f"{path}: expected '# format_version: {FORMAT_VERSION}', got {first!r}")


def write_sweep_csv(records, path):
    with open(path, "w", newline="") as f:
        f.write(f"# format_version: {FORMAT_VERSION}\n")
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for r in records:
            w.writerow([r.shift, r.seed, r.final_test_acc, r.first_epoch_train_acc, r.status])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        _check_version_line(f, path)
        rows = list(csv.DictReader(f))
    for row in rows:
        row["shift"] = float(row["shift"])
        row["seed"] = int(row["seed"])
        row["final_test_acc"] = float(row["final_test_acc"])
        row["first_epoch_train_acc"] = float(row["first_epoch_train_acc"])
    return rows


def write_hist_csv(bin_left, counts, path):
    with open(path, "w", newline="") as f:
        f.write(f"# format_version: {FORMAT_VERSION}\n")
        w = csv.writer(f)
        w.writerow(["bin_left", "count"])
        for b, c in zip(bin_left, counts):
            w.writerow([f"{b:.6g}", int(c)])


def read_hist_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        _check_version_line(f, path)
        rows = list(csv.DictReader(f))
    return np.array([float(r["bin_left"]) for r in rows]), np.array([int(r["count"]) for r in rows])


def write_table_csv(header, rows, path):
    with open(path, "w", newline="") as f:
        f.write(f"# format_version: {FORMAT_VERSION}\n")
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
