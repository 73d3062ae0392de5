"""Adam training loop, early stopping, checkpoints, evaluation and the data-efficiency sweep."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from .classifier import ClassifierConfig, cross_entropy, maxnorm_project
from .dsp import EpochTensor
from .encoder import EncoderConfig
from .ingest import DatasetManifest, ManifestEntry, subsample_per_class
from .model import Model
from .tensor import NonFiniteError, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EEGCKPT1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    batch_size: int = 32
    epochs: int = 100
    decay_rate: float = 0.95
    patience: int = 15
    val_fraction: float = 0.2
    seed: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(NonFiniteError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch}"
                         + (f": {detail}" if detail else ""))


class LabelMismatch(ValueError):
    pass


# ----------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr_t: float, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        step = lr_t * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_p[k] = (p - step).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, t)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay_rate ** epoch


class EarlyStopping:
    """Tracks the best (lowest) monitored value; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


# ----------------------------------------------------------------------
# metrics

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class MetricsLog:
    rows: list[EpochMetrics] = field(default_factory=list)

    def append(self, row: EpochMetrics) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        for acc in (row.train_acc, row.val_acc):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            # repr keeps every float bit so reruns can be compared byte for byte
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in METRICS_HEADER[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MetricsLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header {reader.fieldnames}")
            out = cls()
            for rec in reader:
                out.append(EpochMetrics(int(rec["epoch"]),
                                        *(float(rec[k]) for k in METRICS_HEADER[1:])))
        return out


# ----------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: Model
    train: TrainConfig
    adam: AdamState
    epoch: int = -1
    best_val_loss: float = float("inf")
    seed: int = 0
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ck: Checkpoint, path) -> None:
    arrays = {f"param/{k}": v for k, v in ck.model.params.items()}
    arrays.update({f"adam.m/{k}": v for k, v in ck.adam.m.items()})
    arrays.update({f"adam.v/{k}": v for k, v in ck.adam.v.items()})
    meta = {
        "kind": "checkpoint", "version": ck.version,
        "encoder": ck.model.encoder.to_dict(), "classifier": ck.model.classifier.to_dict(),
        "train": ck.train.to_dict(), "class_names": ck.model.class_names,
        "timesteps": ck.model.timesteps, "epoch": ck.epoch,
        "best_val_loss": ck.best_val_loss, "adam_step": ck.adam.t, "seed": ck.seed,
    }
    container.write_file(path, CHECKPOINT_MAGIC, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = container.read_file(path, CHECKPOINT_MAGIC)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise container.ContainerError(
            f"checkpoint version {meta.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    enc = EncoderConfig(**meta["encoder"])
    clf = ClassifierConfig(**meta["classifier"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    reference = Model.init(enc, clf, 0, next(iter(params.values())).dtype,
                           meta["class_names"], meta["timesteps"])
    if set(params) != set(reference.params):
        raise container.ContainerError("checkpoint parameter names do not match its configuration")
    for k, ref in reference.params.items():
        if params[k].shape != ref.shape:
            raise container.ContainerError(
                f"{k}: stored shape {params[k].shape} but configuration implies {ref.shape}")
    model = Model(enc, clf, params, list(meta["class_names"]), meta["timesteps"])
    adam = AdamState({k[7:]: v for k, v in arrays.items() if k.startswith("adam.m/")},
                     {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v/")},
                     int(meta["adam_step"]))
    return Checkpoint(model, TrainConfig(**meta["train"]), adam, int(meta["epoch"]),
                      float(meta["best_val_loss"]), int(meta["seed"]), int(meta["version"]))


# ----------------------------------------------------------------------
# training

def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing batch of one is folded into its predecessor
    because batch statistics need at least two samples."""
    if n < 1:
        raise ValueError("cannot batch an empty split")
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def evaluate_loss(model: Model, data: EpochTensor, batch_size: int = 256) -> tuple[float, float]:
    """Mean objective (cross-entropy + L2) and accuracy in inference mode."""
    probs = model.predict_proba(data.data.astype(model.dtype), batch_size)
    ce = cross_entropy(probs, data.labels).item()
    reg = model.classifier.l2_lambda * sum(float(np.sum(model.params[k].astype(np.float64) ** 2))
                                          for k in model.l2_names())
    acc = float(np.mean(probs.argmax(axis=1) == data.labels))
    return ce + reg, acc


def _check_labels(model: Model, data: EpochTensor) -> None:
    if len(data) and (data.labels.min() < 0 or data.labels.max() >= model.classifier.n_classes):
        raise LabelMismatch(f"labels outside [0, {model.classifier.n_classes})")
    if data.class_names and list(data.class_names) != list(model.class_names):
        raise LabelMismatch(f"data classes {data.class_names} differ from model classes "
                            f"{model.class_names}")


def fit(train: EpochTensor, val: EpochTensor, model: Model, cfg: TrainConfig,
        on_epoch: Callable[[EpochMetrics], None] | None = None) -> tuple[Checkpoint, MetricsLog]:
    """Train ``model`` and return the best-validation-loss checkpoint with the epoch log.

    Each epoch reshuffles the training split with ``(seed, epoch)``; dropout
    masks come from ``(seed, epoch, batch)``. Both are reproducible offline.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if cfg.batch_size > len(train):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds {len(train)} training trials")
    _check_labels(model, train)
    _check_labels(model, val)

    dtype = model.dtype
    x_train = train.data.astype(dtype)
    params = {k: v.copy() for k, v in model.params.items()}
    trainable = model.trainable_names()
    dense = model.dense_names()
    state = AdamState.zeros_like({k: params[k] for k in trainable})
    stopper = EarlyStopping(cfg.patience)
    metrics = MetricsLog()
    best = Checkpoint(model, cfg, state, -1, float("inf"), cfg.seed)
    current = Model(model.encoder, model.classifier, params, list(model.class_names),
                    model.timesteps)

    for epoch in range(cfg.epochs):
        lr_t = lr_at(epoch, cfg)
        order = epoch_order(cfg.seed, epoch, len(train))
        loss_sum, correct = 0.0, 0
        for b, sl in enumerate(batch_slices(len(train), cfg.batch_size)):
            idx = order[sl]
            try:
                # overflow surfaces as NonFiniteError from the tensor checks
                with np.errstate(over="ignore", invalid="ignore"):
                    tensors = current.leaves()
                    total, _, probs, updates = current.loss(
                        x_train[idx], train.labels[idx], tensors, "train",
                        batch_rng(cfg.seed, epoch, b))
                    backward(total)
                    grads = {k: tensors[k].grad for k in trainable}
                    stepped, state = adam_step({k: params[k] for k in trainable}, grads,
                                               state, lr_t, cfg)
                    for k, v in stepped.items():
                        if not np.isfinite(v).all():
                            raise NonFiniteError(f"parameter {k} became non-finite")
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            params.update(stepped)
            for k in dense:
                params[k] = maxnorm_project(params[k], model.classifier.maxnorm_c)
            params.update({k: v.astype(dtype) for k, v in updates.items()})
            loss_sum += total.item() * len(idx)
            correct += int(np.sum(probs.data.argmax(axis=1) == train.labels[idx]))

        val_loss, val_acc = evaluate_loss(current, val, cfg.eval_batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1, "validation loss")
        row = EpochMetrics(epoch, loss_sum / len(train), correct / len(train),
                           val_loss, val_acc, lr_t)
        metrics.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d train %.4f/%.3f val %.4f/%.3f", epoch, row.train_loss,
                  row.train_acc, val_loss, val_acc)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            snap = Model(model.encoder, model.classifier, {k: v.copy() for k, v in params.items()},
                         list(model.class_names), model.timesteps)
            best = Checkpoint(snap, cfg, AdamState(dict(state.m), dict(state.v), state.t),
                              epoch, val_loss, cfg.seed)
        if stop:
            break
    return best, metrics


# ----------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray  # rows = true class, columns = prediction
    mean_loss: float
    class_names: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.per_class)


def evaluate(model: Model | Checkpoint, data: EpochTensor, batch_size: int = 256) -> EvalReport:
    model = model.model if isinstance(model, Checkpoint) else model
    _check_labels(model, data)
    if len(data) == 0:
        raise ValueError("nothing to evaluate")
    probs = model.predict_proba(data.data.astype(model.dtype), batch_size)
    pred = probs.argmax(axis=1)
    nc = model.classifier.n_classes
    conf = np.zeros((nc, nc), dtype=np.int64)
    np.add.at(conf, (data.labels, pred), 1)
    counts = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(conf) / np.maximum(counts, 1), np.nan)
    loss = cross_entropy(probs, data.labels).item()
    return EvalReport(float(np.mean(pred == data.labels)), per_class, conf, loss,
                      list(model.class_names))


def accuracy_table_csv(rows: Sequence[tuple[int, float]]) -> str:
    lines = ["classes,accuracy"] + [f"{n},{acc!r}" for n, acc in rows]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# data-efficiency sweep

DEFAULT_K = (10, 25, 50, 100)


@dataclass
class SweepRow:
    samples_per_class: int
    classes: int
    accuracy: float
    seed: int = 0


def _as_manifest(data: EpochTensor) -> DatasetManifest:
    paths = data.paths or [f"trial_{i}" for i in range(len(data))]
    return DatasetManifest([ManifestEntry(p, "", int(l), str(s))
                            for p, l, s in zip(paths, data.labels, data.split)],
                           list(data.class_names))


def subsample_epochs(data: EpochTensor, k: int, seed: int) -> EpochTensor:
    """Training subset with ``k`` trials per class (nested in ``k`` for a fixed seed)."""
    sub = subsample_per_class(_as_manifest(data), k, seed)
    return data.subset(sub.indices("train"))


def sweep_data_efficiency(data: EpochTensor, ks: Sequence[int],
                          make_model: Callable[[], Model], cfg: TrainConfig,
                          subsample_seed: int | None = None) -> list[SweepRow]:
    """Fit on ``k`` training trials per class for each ``k``; the validation split is shared.

    ``data.split`` must mark the training (``"train"``) and validation
    (``"val"``) trials.
    """
    val = data.where("val")
    seed = cfg.seed if subsample_seed is None else subsample_seed
    per_class = np.bincount(data.labels[data.split == "train"])
    infeasible = [k for k in ks if k < 1 or k > per_class.min()]
    if infeasible:
        raise ValueError(f"infeasible k {infeasible}: smallest class has {per_class.min()} "
                         "training trials")
    rows = []
    for k in ks:
        train = subsample_epochs(data, k, seed)
        run_cfg = TrainConfig(**{**cfg.to_dict(), "batch_size": min(cfg.batch_size, len(train))})
        model = make_model()
        ck, _ = fit(train, val, model, run_cfg)
        rows.append(SweepRow(k, model.classifier.n_classes, evaluate(ck, val).accuracy, cfg.seed))
    return rows


def sweep_table_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["samples_per_class,classes,accuracy"]
    lines += [f"{r.samples_per_class},{r.classes},{r.accuracy!r}" for r in rows]
    return "\n".join(lines) + "\n"


__all__ = [
    "AdamState", "Checkpoint", "EarlyStopping", "EpochMetrics", "EvalReport", "LabelMismatch",
    "MetricsLog", "SweepRow", "TrainConfig", "TrainingDiverged", "accuracy_table_csv",
    "adam_step", "batch_slices", "evaluate", "evaluate_loss", "fit", "load_checkpoint", "lr_at",
    "save_checkpoint", "subsample_epochs", "sweep_data_efficiency", "sweep_table_csv",
]
