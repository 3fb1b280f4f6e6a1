"""Weighted cross-entropy training loop, evaluation, and checkpointing.

A deterministic run is a pure function of (config, seed): the sampler
stream is keyed by epoch and the dropout stream counter is saved in the
checkpoint, so resuming from epoch e reproduces a straight-through run
bit for bit.
"""

import math
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from .data import class_weights, label_counts, stratified_batches, uniform_batches
from .errors import ContractError, FormatError, NumericError, ParameterError
from .model import EngagementModel, config_from_text, config_to_text
from .rng import PURPOSE_SAMPLER, DropoutRng, SeedStream
from .tensor import Tape, Tensor, backward, make_op_output, tensor_from_bytes, tensor_to_bytes

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.0
    batch_size: int = 5
    epochs: int = 1
    use_class_weights: bool = False
    use_stratified_sampler: bool = False
    seed: int = 0
    deterministic: bool = True
    weight_split: str = "train"

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.weight_split not in ("train", "train+val"):
            raise ParameterError(f"weight_split must be 'train' or 'train+val', got {self.weight_split!r}")


# -- loss -----------------------------------------------------------------------


def weighted_cross_entropy(logits, targets, weights=None):
    """Per-class weighted mean of -log softmax(logits)[target].

    loss = sum_i w_{y_i} * l_i / sum_i w_{y_i}; unit (or absent) weights
    reduce it to the plain mean cross-entropy. Log-softmax uses max
    subtraction; the whole thing is one fused differentiable op.
    """
    if logits.data.ndim != 2:
        raise ParameterError(f"logits must be 2-d, got {logits.data.ndim}-d")
    b, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (b,):
        raise ParameterError(f"targets shape {targets.shape} does not match batch {b}")
    for y in targets:
        if not 0 <= y < k:
            raise IndexError(f"target {y} outside [0, {k})")
    if weights is None:
        w = np.ones(k, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (k,):
            raise ParameterError(f"weights shape {w.shape} does not match {k} classes")
        if np.any(w <= 0):
            raise ParameterError("class weights must be positive")
    x = logits.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logz
    rows = np.arange(b)
    losses = -log_probs[rows, targets]
    sample_w = w[targets]
    wsum = sample_w.sum()
    loss_value = float((sample_w * losses).sum() / wsum)
    out = np.asarray(loss_value, dtype=logits.dtype)

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        dlogits = probs * (sample_w / wsum)[:, None] * float(g)
        return (dlogits.astype(logits.dtype, copy=False),)

    return make_op_output("weighted_cross_entropy", out, (logits,), backward_fn)


# -- optimizer -------------------------------------------------------------------


def sgd_step(store, grads, lr, momentum, velocity):
    """v <- momentum*v + g; p <- p - lr*v for every trainable entry.

    ``velocity`` maps parameter names to their momentum buffers and is
    created lazily at zero; missing gradients are a contract violation.
    """
    for name, p in store.trainable_items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        v = velocity.get(name)
        if v is None:
            v = np.zeros(p.shape, dtype=np.float64)
            velocity[name] = v
        if momentum != 0.0:
            v *= momentum
            v += g
        else:
            v[...] = g
        p.data -= (lr * v).astype(p.dtype, copy=False)
    return velocity


# -- evaluation -------------------------------------------------------------------


class ConfusionMatrix:
    """K x K count table; rows are true classes, columns are predictions."""

    def __init__(self, num_classes):
        if num_classes < 1:
            raise ParameterError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, true, pred):
        if not 0 <= true < self.num_classes:
            raise IndexError(f"true label {true} outside [0, {self.num_classes})")
        if not 0 <= pred < self.num_classes:
            raise IndexError(f"prediction {pred} outside [0, {self.num_classes})")
        self.counts[true, pred] += 1

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    def per_class_recall(self):
        """(recalls, zero_support) with recall defined as 0 on empty rows."""
        support = self.counts.sum(axis=1)
        recalls = np.zeros(self.num_classes, dtype=np.float64)
        zero_support = support == 0
        nonzero = ~zero_support
        recalls[nonzero] = np.diag(self.counts)[nonzero] / support[nonzero]
        return recalls, zero_support

    def to_csv_text(self):
        lines = ["true\\pred," + ",".join(str(c) for c in range(self.num_classes))]
        for r in range(self.num_classes):
            lines.append(f"{r}," + ",".join(str(v) for v in self.counts[r]))
        return "\n".join(lines) + "\n"

    def to_text(self):
        width = max(5, len(str(int(self.counts.max(initial=0)))) + 1)
        header = "true\\pred" + "".join(f"{c:>{width}}" for c in range(self.num_classes))
        lines = [header]
        for r in range(self.num_classes):
            lines.append(f"{r:>9}" + "".join(f"{v:>{width}}" for v in self.counts[r]))
        return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    accuracy: float
    per_class_recall: np.ndarray
    zero_support: np.ndarray


def evaluate(model, dataset, batch_size=8):
    """Eval-mode pass over a dataset split; argmax ties go to the lower class."""
    model.eval()
    cm = ConfusionMatrix(model.config.num_classes)
    indices = list(range(len(dataset)))
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        clips, labels = dataset.batch(chunk)
        logits = model.forward_batch(clips)
        preds = np.argmax(logits.data, axis=1)
        for y, p in zip(labels, preds):
            cm.add(int(y), int(p))
    recalls, zero_support = cm.per_class_recall()
    return EvalResult(cm, cm.accuracy, recalls, zero_support)


# -- training ---------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    seconds: float

    def csv_row(self):
        return f"{self.epoch},{self.loss:.6f},{self.train_acc:.6f},{self.seconds:.3f}"


LOG_HEADER = "epoch,loss,train_acc,seconds"


def resolve_class_weights(manifest, num_classes, weight_split):
    """Class weights from the manifest's train (or train+validation) counts."""
    labels = list(manifest.labels("train"))
    if weight_split == "train+val":
        labels += list(manifest.labels("validation"))
    return class_weights(label_counts(labels, num_classes))


def train(
    model,
    dataset,
    config,
    out_dir=None,
    weights=None,
    start_epoch=0,
    velocity=None,
    log_stream=None,
):
    """Run epochs [start_epoch, config.epochs) of SGD over the train split.

    Returns (list of EpochLog, velocity). When ``out_dir`` is given, every
    epoch appends to log.csv and overwrites checkpoint.bin there. Weights
    default to the dataset's own train counts when class weighting is on.
    """
    num_classes = model.config.num_classes
    if config.use_class_weights and weights is None:
        weights = class_weights(label_counts(dataset.labels, num_classes))
    if not config.use_class_weights:
        weights = None
    if config.use_stratified_sampler:
        present = len(set(dataset.labels))
        if config.batch_size < present:
            raise ParameterError(
                f"batch_size {config.batch_size} cannot cover all {present} classes per batch"
            )
    if velocity is None:
        velocity = {}
    if start_epoch == 0:
        model.dropout_rng = DropoutRng(config.seed)
    model.train()
    labels = dataset.labels
    logs = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv") if out_dir else None
    if log_path and start_epoch == 0:
        with open(log_path, "w") as fh:
            fh.write(LOG_HEADER + "\n")
    if out_dir and config.epochs == start_epoch:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model, config, velocity, start_epoch)
    for epoch in range(start_epoch, config.epochs):
        stream = SeedStream(config.seed, PURPOSE_SAMPLER, counter=epoch)
        if config.use_stratified_sampler:
            batches = stratified_batches(labels, config.batch_size, stream)
        else:
            batches = uniform_batches(len(labels), config.batch_size, stream)
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        seen = 0
        for bi, batch_indices in enumerate(batches):
            clips, batch_labels = dataset.batch(batch_indices)
            tape = Tape()
            model.params.attach_all(tape)
            logits = model.forward_batch(clips)
            loss = weighted_cross_entropy(logits, batch_labels, weights)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NumericError(f"non-finite loss {loss_value} in epoch {epoch} batch {bi}")
            backward(loss)
            grads = {name: p.grad for name, p in model.params.trainable_items()}
            sgd_step(model.params, grads, config.lr, config.momentum, velocity)
            loss_sum += loss_value
            preds = np.argmax(logits.data, axis=1)
            correct += int((preds == batch_labels).sum())
            seen += len(batch_labels)
        row = EpochLog(
            epoch=epoch,
            loss=loss_sum / max(1, len(batches)),
            train_acc=correct / max(1, seen),
            seconds=time.perf_counter() - t0,
        )
        logs.append(row)
        if log_stream is not None:
            print(row.csv_row(), file=log_stream)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(row.csv_row() + "\n")
        if out_dir:
            save_checkpoint(
                os.path.join(out_dir, "checkpoint.bin"), model, config, velocity, epoch + 1
            )
    return logs, velocity


# -- checkpoint format --------------------------------------------------------------


def _pack_named_tensors(pairs, flags=None):
    out = [struct.pack("<I", len(pairs))]
    for i, (name, tensor) in enumerate(pairs):
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        if flags is not None:
            out.append(struct.pack("<B", flags[i]))
        out.append(tensor_to_bytes(tensor))
    return b"".join(out)


def save_checkpoint(path, model, train_config, velocity, epoch):
    """Binary snapshot of config, parameters, momentum buffers, and rng state."""
    parts = [_CKPT_MAGIC, struct.pack("<B", _CKPT_VERSION)]
    cfg_text = config_to_text(model.config).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg_text)))
    parts.append(cfg_text)
    parts.append(struct.pack("<I", int(epoch)))
    parts.append(struct.pack("<QQ", train_config.seed, model.dropout_rng.counter))
    entries = model.params.items()
    flags = [1 if model.params.is_trainable(n) else 0 for n, _ in entries]
    parts.append(_pack_named_tensors(entries, flags))
    vel_pairs = [(n, Tensor(velocity[n])) for n, _ in model.params.trainable_items() if n in velocity]
    parts.append(_pack_named_tensors(vel_pairs))
    blob = b"".join(parts)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return blob


def _unpack_named_tensors(buf, offset, with_flags):
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        flag = None
        if with_flags:
            (flag,) = struct.unpack_from("<B", buf, offset)
            offset += 1
        tensor, offset = tensor_from_bytes(buf, offset)
        entries.append((name, flag, tensor))
    return entries, offset


@dataclass
class CheckpointState:
    model: EngagementModel
    velocity: dict
    epoch: int
    seed: int


def load_checkpoint(path, expected_config=None):
    """Rebuild the model, optimizer buffers, and rng state from a checkpoint."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic at byte 0: {buf[:4]!r}")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    offset = 5
    (cfg_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    cfg_text = buf[offset : offset + cfg_len].decode("utf-8")
    offset += cfg_len
    config = config_from_text(cfg_text)
    if expected_config is not None and config_to_text(expected_config) != cfg_text:
        raise FormatError("checkpoint model configuration does not match the expected one")
    (epoch,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    seed, dropout_counter = struct.unpack_from("<QQ", buf, offset)
    offset += 16
    params, offset = _unpack_named_tensors(buf, offset, with_flags=True)
    vels, offset = _unpack_named_tensors(buf, offset, with_flags=False)
    if offset != len(buf):
        raise FormatError(f"trailing bytes after checkpoint payload at byte {offset}")
    model = EngagementModel(config, seed=seed)
    stored = {name: (flag, tensor) for name, flag, tensor in params}
    own = dict(model.params.items())
    if set(stored) != set(own):
        raise FormatError("checkpoint parameters do not match the model configuration")
    for name, tensor in own.items():
        flag, loaded = stored[name]
        expected_flag = 1 if model.params.is_trainable(name) else 0
        if flag != expected_flag or loaded.shape != tensor.shape or loaded.dtype != tensor.dtype:
            raise FormatError(f"checkpoint entry {name!r} does not match the model configuration")
        tensor.data[...] = loaded.data
    velocity = {}
    for name, _, tensor in vels:
        if name not in own:
            raise FormatError(f"checkpoint velocity entry {name!r} is not a model parameter")
        velocity[name] = tensor.data.astype(np.float64)
    model.dropout_rng = DropoutRng(seed, counter=dropout_counter)
    return CheckpointState(model=model, velocity=velocity, epoch=int(epoch), seed=int(seed))
