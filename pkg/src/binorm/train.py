"""Losses, metrics, optimizers, the learning-rate schedule and the training loop."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, TextIO

import numpy as np

from binorm import autograd as ag
from binorm.autograd import Tape, Variable
from binorm.config import ScheduleConfig, TrainConfig, model_config_from_dict, model_config_to_dict
from binorm.data import split_dataset
from binorm.errors import ConfigurationError, DataError, DimensionError, FormatError, NumericalError
from binorm.layers import Parameter
from binorm.models import Model, build_model
from binorm.parallel import batch_slices, map_shards

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class Supervised(Protocol):
    """Anything that yields aligned model inputs and integer targets."""

    @property
    def inputs(self) -> np.ndarray: ...

    @property
    def targets(self) -> np.ndarray: ...

    def __len__(self) -> int: ...

    def subset(self, indices: np.ndarray) -> "Supervised": ...


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def _flatten(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs)
    labels = np.asarray(labels).reshape(-1)
    probs = probs.reshape(-1, probs.shape[-1])
    if probs.shape[0] != labels.shape[0]:
        raise DimensionError(f"{probs.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DataError(f"labels must lie in [0, {probs.shape[1]})")
    return probs, labels.astype(np.int64)


def _label_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return probs[np.arange(labels.size), labels]


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -log(probs[label]) over the batch, with probs clamped to 1e-12.

    Sequence outputs (batch, L, K) are scored per position.
    """
    probs, labels = _flatten(probs, labels)
    picked = np.maximum(_label_probs(probs, labels), PROB_FLOOR)
    return float(-np.log(picked.astype(np.float64)).mean())


@dataclass
class Metrics:
    loss: float
    accuracy: float
    perplexity: float


def metrics(probs: np.ndarray, labels: np.ndarray) -> Metrics:
    """Loss, argmax accuracy (ties go to the lowest index) and perplexity."""
    loss = cross_entropy(probs, labels)
    flat, labels = _flatten(probs, labels)
    accuracy = float((flat.argmax(axis=-1) == labels).mean())
    return Metrics(loss=loss, accuracy=accuracy, perplexity=math.exp(loss))


def cross_entropy_loss(probs: Variable, labels: np.ndarray) -> Variable:
    """cross_entropy() as a recorded scalar."""
    flat, labels = _flatten(probs.value, labels)
    picked = _label_probs(flat, labels)
    clamped = np.maximum(picked, PROB_FLOOR)
    n = labels.size
    value = np.asarray(-np.log(clamped).mean(), dtype=probs.value.dtype)

    def backward(g):
        grad = np.zeros_like(flat)
        grad[np.arange(n), labels] = np.where(picked >= PROB_FLOOR, -g / (n * clamped), 0.0)
        return (grad.reshape(probs.shape),)

    return ag.apply("cross_entropy", value, (probs,), backward)


# ---------------------------------------------------------------------------
# Optimizers and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam/AdamW moments keyed by parameter name."""

    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerState":
        return cls(
            kind=config.optimizer,
            lr=config.max_lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        )


def optimizer_step(
    state: OptimizerState,
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> None:
    """One Adam or AdamW update of the 32-bit masters, in place.

    Every gradient is checked before any parameter changes, so a failing
    step leaves the model untouched.

    Raises:
        NumericalError: If a gradient is NaN or infinite.
    """
    if state.kind not in ("adam", "adamw"):
        raise ConfigurationError(f"Unknown optimizer '{state.kind}'")
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {param.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}", parameter=name)

    lr = state.lr if lr is None else lr
    state.t += 1
    correct1 = 1.0 - state.beta1 ** state.t
    correct2 = 1.0 - state.beta2 ** state.t

    for name, param in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.value)
            v = np.zeros_like(param.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v

        value = param.value
        if state.kind == "adamw" and state.weight_decay:
            value = value - lr * state.weight_decay * value
        delta = lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
        param.value = value - delta


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """Linear warmup to max_lr, cosine decay to the floor, then the floor."""
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    into_decay = step - schedule.warmup_steps
    if into_decay >= schedule.decay_steps:
        return schedule.floor
    cosine = 0.5 * (1.0 + math.cos(math.pi * into_decay / schedule.decay_steps))
    return schedule.floor + (schedule.max_lr - schedule.floor) * cosine


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    lr: float
    wall_time: float
    train_ppl: float | None = None
    val_ppl: float | None = None

    def to_dict(self, timing: bool = False) -> dict:
        data = asdict(self)
        if self.train_ppl is None:
            del data["train_ppl"], data["val_ppl"]
        if not timing:
            data["wall_time"] = None
        return data


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    def summary(self) -> dict:
        """Best validation figures over all epochs."""
        if not self.records:
            return {"best_val_loss": None, "best_val_acc": None}
        summary = {
            "best_val_loss": min(r.val_loss for r in self.records),
            "best_val_acc": max(r.val_acc for r in self.records),
        }
        if self.records[0].val_ppl is not None:
            summary["best_val_ppl"] = min(r.val_ppl for r in self.records)
        return summary


class JsonlWriter:
    """Streams one JSON object per line, for epoch records and the summary."""

    def __init__(self, stream: TextIO, timing: bool = False):
        self.stream = stream
        self.timing = timing

    def record(self, record: EpochRecord) -> None:
        self.write(record.to_dict(self.timing))

    def write(self, obj: dict) -> None:
        self.stream.write(json.dumps(obj, sort_keys=True) + "\n")
        self.stream.flush()


# ---------------------------------------------------------------------------
# Evaluation and training
# ---------------------------------------------------------------------------


def evaluate(
    model: Model | Callable[[np.ndarray], np.ndarray],
    dataset: Supervised,
    batch_size: int = 64,
    threads: int = 1,
) -> Metrics:
    """Inference-mode metrics over a dataset, sharded across threads.

    Batch results are combined in batch order, so the thread count does not
    change the result.
    """
    count = len(dataset)
    if count == 0:
        raise DataError("cannot evaluate on an empty dataset")
    predict = model.predict if isinstance(model, Model) else model
    if isinstance(model, Model):
        for param in model.parameters().values():
            param.value  # materialize before sharing across threads

    inputs, targets = dataset.inputs, dataset.targets

    def score(part: slice) -> tuple[float, int, int]:
        probs, labels = _flatten(predict(inputs[part]), targets[part])
        picked = np.maximum(_label_probs(probs, labels), PROB_FLOOR).astype(np.float64)
        return float(-np.log(picked).sum()), int((probs.argmax(axis=-1) == labels).sum()), labels.size

    parts = map_shards(score, batch_slices(count, batch_size), threads)
    nll = sum(p[0] for p in parts)
    correct = sum(p[1] for p in parts)
    scored = sum(p[2] for p in parts)
    loss = nll / scored
    return Metrics(loss=loss, accuracy=correct / scored, perplexity=math.exp(loss))


def _snapshot(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in params.items()}


def _restore(params: dict[str, Parameter], saved: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.value = saved[name]


def train_step(
    model: Model,
    params: dict[str, Parameter],
    state: OptimizerState,
    inputs: np.ndarray,
    labels: np.ndarray,
    lr: float,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Forward, backward and one optimizer update on a batch.

    Returns:
        The batch loss and accuracy before the update.
    """
    tape = Tape()
    probs = model.forward(tape.constant(inputs), trainable=True, rng=rng)
    loss = cross_entropy_loss(probs, labels)
    if not np.isfinite(loss.value):
        raise NumericalError(f"non-finite loss at step {state.t}")
    tape.backward(loss)

    grads = {}
    for name, param in params.items():
        leaf = tape.bound(param)
        grads[name] = leaf.grad if leaf is not None else np.zeros_like(param.value)
    optimizer_step(state, params, grads, lr)

    flat, flat_labels = _flatten(probs.value, labels)
    return float(loss.value), float((flat.argmax(axis=-1) == flat_labels).mean())


def fit(
    model: Model,
    dataset: Supervised,
    config: TrainConfig,
    val: Supervised | None = None,
    on_epoch: Callable[[EpochRecord, Model], None] | None = None,
) -> TrainReport:
    """Train the masters of model in place.

    Args:
        model: Model to train.
        dataset: Training examples. When val is None, a held-out part of
            dataset (1 - config.train_fraction) is used for validation.
        config: Training hyperparameters; config.seed drives shuffling and dropout.
        val: Optional explicit validation set.
        on_epoch: Called after every completed epoch, e.g. to stream the
            record and write a checkpoint.

    Raises:
        NumericalError: On a non-finite loss or gradient. The masters are
            restored to the end of the last completed epoch first.
    """
    config.validate()
    if val is None:
        dataset, val = split_dataset(dataset, config.train_fraction, config.seed)
    count = len(dataset)
    report = TrainReport()
    if config.epochs == 0:
        return report
    if count < config.batch_size:
        raise DataError(f"{count} training examples cannot fill one batch of {config.batch_size}")

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = OptimizerState.from_config(config)
    schedule = config.schedule()
    is_sequence = model.config.kind == "blm"
    last_good = _snapshot(params)
    batches = count // config.batch_size

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(count)
        losses, accs = [], []
        lr = lr_at(schedule, report.steps)
        try:
            for b in range(batches):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                lr = lr_at(schedule, report.steps)
                loss, acc = train_step(
                    model, params, state, dataset.inputs[idx], dataset.targets[idx], lr, rng,
                )
                losses.append(loss)
                accs.append(acc)
                report.steps += 1
        except NumericalError:
            _restore(params, last_good)
            logger.error("aborting in epoch %d; masters restored to the end of epoch %d", epoch, epoch - 1)
            raise

        measured = evaluate(model, val, config.batch_size, config.threads)
        train_loss = float(np.mean(losses))
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=measured.loss,
            train_acc=float(np.mean(accs)),
            val_acc=measured.accuracy,
            lr=lr,
            wall_time=time.perf_counter() - started,
        )
        if is_sequence:
            record.train_ppl = math.exp(train_loss)
            record.val_ppl = measured.perplexity
        report.records.append(record)
        last_good = _snapshot(params)

        logger.info(
            "epoch %d: loss %.4f acc %.3f | val loss %.4f acc %.3f",
            epoch, record.train_loss, record.train_acc, record.val_loss, record.val_acc,
        )
        if on_epoch is not None:
            on_epoch(record, model)

    return report


# ---------------------------------------------------------------------------
# Float checkpoints
# ---------------------------------------------------------------------------

CONFIG_KEY = "__config__"


def save_checkpoint(model: Model, path: Path) -> None:
    """Write every master and the model config to an .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.value for name, p in model.parameters().items()}
    arrays[CONFIG_KEY] = np.array(json.dumps(model_config_to_dict(model.config), sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: Path) -> Model:
    """Rebuild a model from save_checkpoint() output."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint does not exist: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            config = model_config_from_dict(json.loads(str(data[CONFIG_KEY])), str(path))
            model = build_model(config)
            for name, param in model.parameters().items():
                if name not in data.files:
                    raise FormatError(f"{path}: checkpoint has no array for {name}")
                param.value = data[name]
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"{path}: not a binorm checkpoint ({e})") from e
    return model
