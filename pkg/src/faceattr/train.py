"""Training loop, checkpointing, evaluation, and report rendering.

One model is trained per attribute.  Each epoch runs the augmented
training batches with Adam, then a full eval-mode validation pass; a
checkpoint is written whenever validation loss strictly improves, so
the checkpoint on disk is always the best-so-far model.  The final
model is saved next to it for inspection.

Checkpoints are a self-contained binary container (architecture
document, parameters, batchnorm running statistics, optimizer config,
provenance) with no timestamps or absolute paths, so identical runs
produce identical bytes.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, batch_iterator
from .errors import (CheckpointError, CheckpointFormatError,
                     CheckpointVersionError, ContractError, NumericError)
from .model import Model, NetworkSpec
from .optim import (AdamConfig, AdamState, MetricAccumulator, adam_step,
                    sigmoid_binary_cross_entropy, softmax_cross_entropy)
from .tensor import ComputeGraph, Tensor, backward

LOSS_KINDS = ("categorical", "binary")


@dataclass(frozen=True)
class TrainConfig:
    """One training run: what to learn, for how long, where to save."""

    attribute: str
    checkpoint_path: str
    epochs: int = 100
    batch_size: int = 32
    loss: str = "categorical"
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSS_KINDS:
            raise ContractError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not self.attribute:
            raise ContractError("attribute name must be non-empty")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seen: int  # training samples touched this epoch


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"FACEATTR"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and know where it came from."""

    arch: dict
    params: dict
    bn_stats: dict  # prefix -> {"mean": array, "var": array}
    adam: dict
    epoch: int
    val_loss: float
    val_acc: float
    provenance: dict

    @classmethod
    def from_model(cls, model, adam_cfg, epoch, val_loss, val_acc, provenance):
        params = {name: p.data.copy() for name, p in model.params.items()}
        stats = {prefix: {"mean": st.mean.copy(), "var": st.var.copy()}
                 for prefix, st in model.bn_states.items()}
        return cls(arch=model.spec.to_doc(), params=params, bn_stats=stats,
                   adam=adam_cfg.to_dict(), epoch=epoch, val_loss=val_loss,
                   val_acc=val_acc, provenance=dict(provenance))

    def to_model(self):
        spec = NetworkSpec.from_doc(self.arch)
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        model = Model.build(spec, seed=0, dtype=dtype)
        if set(model.params) != set(self.params):
            raise CheckpointError(
                "checkpoint parameters do not match the architecture document")
        if set(model.bn_states) != set(self.bn_stats):
            raise CheckpointError(
                "checkpoint batchnorm stats do not match the architecture document")
        for name, arr in self.params.items():
            if model.params[name].data.shape != arr.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {arr.shape}, expected "
                    f"{model.params[name].data.shape}")
            model.params[name].data = arr.copy()
        for prefix, st in self.bn_stats.items():
            model.bn_states[prefix].mean[...] = st["mean"]
            model.bn_states[prefix].var[...] = st["var"]
        return model


def _tensor_entries(ckpt):
    for name, arr in ckpt.params.items():
        yield "p/" + name, arr
    for prefix, st in ckpt.bn_stats.items():
        yield "s/" + prefix + "/mean", st["mean"]
        yield "s/" + prefix + "/var", st["var"]


def save_checkpoint(ckpt, path):
    """Write the binary container; identical checkpoints byte-match."""
    header = {
        "arch": ckpt.arch,
        "adam": ckpt.adam,
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "val_acc": ckpt.val_acc,
        "provenance": ckpt.provenance,
    }
    doc = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = list(_tensor_entries(ckpt))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(doc)))
        fh.write(doc)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            dt = np.dtype(arr.dtype)
            if dt not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {dt}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    (doc_len,) = struct.unpack("<Q", take(8, "header length"))
    try:
        header = json.loads(take(doc_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header document") from exc
    for key in ("arch", "adam", "epoch", "val_loss", "val_acc", "provenance"):
        if key not in header:
            raise CheckpointFormatError(f"{path}: header lacks {key!r}")

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(name_len, f"tensor {i} name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"tensor {name} dtype/ndim"))
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor {name} shape"))
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(take(nbytes, f"tensor {name} payload"), dtype=dt)
        tensors[name] = data.reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")

    params = {}
    stats = {}
    for name, arr in tensors.items():
        if name.startswith("p/"):
            params[name[2:]] = arr
        elif name.startswith("s/") and name.endswith("/mean"):
            stats.setdefault(name[2:-5], {})["mean"] = arr
        elif name.startswith("s/") and name.endswith("/var"):
            stats.setdefault(name[2:-4], {})["var"] = arr
        else:
            raise CheckpointFormatError(f"{path}: unrecognized tensor entry {name!r}")
    for prefix, st in stats.items():
        if "mean" not in st or "var" not in st:
            raise CheckpointFormatError(f"{path}: batchnorm stats for {prefix!r} incomplete")
    return Checkpoint(arch=header["arch"], params=params, bn_stats=stats,
                      adam=header["adam"], epoch=header["epoch"],
                      val_loss=header["val_loss"], val_acc=header["val_acc"],
                      provenance=header["provenance"])


# ---------------------------------------------------------------------------
# training


def _check_compat(model, cfg, schema):
    head = model.spec.head
    if cfg.loss == "categorical" and head.kind != "softmax":
        raise ContractError(
            f"categorical loss needs a softmax head, model has {head.kind}")
    if cfg.loss == "binary" and head.kind != "sigmoid":
        raise ContractError(
            f"binary loss needs a sigmoid head, model has {head.kind}")
    if schema is not None:
        if head.kind == "softmax" and head.classes != len(schema.classes):
            raise ContractError(
                f"head has {head.classes} outputs but attribute "
                f"{schema.name!r} has {len(schema.classes)} classes")
        if head.kind == "sigmoid" and head.classes != 1:
            raise ContractError("binary training expects a single sigmoid output")


def _targets(labels, cfg, classes, dtype):
    if cfg.loss == "categorical":
        if labels.min() < 0 or labels.max() >= classes:
            raise ContractError(
                f"label outside [0, {classes}) in batch: {int(labels.min())}..{int(labels.max())}")
        y = np.zeros((labels.size, classes), dtype=dtype)
        y[np.arange(labels.size), labels] = 1.0
        return Tensor(y)
    if labels.min() < 0 or labels.max() > 1:
        raise ContractError("binary labels must be 0 or 1")
    return Tensor(labels.reshape(-1, 1).astype(dtype))


def _batch_correct(logits, labels, loss_kind):
    z = logits.data
    if loss_kind == "categorical":
        return int((z.argmax(axis=1) == labels).sum())
    return int(((z.reshape(-1) >= 0.0).astype(np.int64) == labels).sum())


def _loss_fn(cfg):
    return softmax_cross_entropy if cfg.loss == "categorical" else sigmoid_binary_cross_entropy


def _cast_batch(images, dtype):
    """Match the image batch to the parameter dtype.

    Activations follow the input dtype, so a 64-bit model fed 32-bit
    images would silently compute in 32 bits.
    """
    if images.data.dtype == dtype:
        return images
    return Tensor(images.data.astype(dtype))


def _eval_pass(model, records, source, cfg, num_classes):
    """Mean loss and accuracy over records in eval mode, no augmentation."""
    loss_fn = _loss_fn(cfg)
    dtype = model.param_dtype()
    total = 0
    loss_sum = 0.0
    correct = 0
    for images, labels in batch_iterator(records, source, cfg.attribute,
                                         batch_size=cfg.batch_size, phase="eval"):
        logits = model.forward_logits(_cast_batch(images, dtype), mode="eval")
        y = _targets(labels, cfg, num_classes, logits.dtype)
        loss = loss_fn(logits, y).item()
        n = labels.size
        loss_sum += loss * n
        correct += _batch_correct(logits, labels, cfg.loss)
        total += n
    if total == 0:
        raise ContractError("evaluation over zero samples")
    return loss_sum / total, correct / total


def train(model, source, train_records, val_records, cfg, schema=None,
          log=None):
    """Run the full loop; returns (best Checkpoint, list of EpochStats).

    The checkpoint at ``cfg.checkpoint_path`` tracks the best validation
    loss seen; the final-epoch model is written to the same path with a
    ``.final`` suffix.  ``log`` is called with one line per epoch.
    """
    if not train_records:
        raise ContractError("training set is empty")
    if not val_records:
        raise ContractError("validation set is empty")
    _check_compat(model, cfg, schema)
    out_classes = model.spec.head.classes
    loss_fn = _loss_fn(cfg)
    dtype = model.param_dtype()
    state = AdamState(model.params)
    provenance = {
        "attribute": cfg.attribute,
        "classes": list(schema.classes) if schema is not None else None,
        "seed": cfg.seed,
        "train_count": len(train_records),
        "val_count": len(val_records),
        "loss": cfg.loss,
    }

    history = []
    best = None
    best_loss = np.inf
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        correct = 0
        seen = 0
        for bidx, (images, labels) in enumerate(batch_iterator(
                train_records, source, cfg.attribute, batch_size=cfg.batch_size,
                phase="train", seed=cfg.seed, epoch=epoch, augment_cfg=cfg.augment)):
            graph = ComputeGraph()
            with graph:
                logits = model.forward_logits(_cast_batch(images, dtype), mode="train")
                y = _targets(labels, cfg, out_classes, logits.dtype)
                loss = loss_fn(logits, y)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericError(
                    f"non-finite training loss {lval} at epoch {epoch} batch {bidx}")
            model.zero_grad()
            backward(loss, graph)
            adam_step(model.params, None, state, cfg.adam)
            n = labels.size
            loss_sum += lval * n
            correct += _batch_correct(logits, labels, cfg.loss)
            seen += n

        val_loss, val_acc = _eval_pass(model, val_records, source, cfg, out_classes)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        stats = EpochStats(epoch=epoch, train_loss=loss_sum / seen,
                           train_acc=correct / seen, val_loss=val_loss,
                           val_acc=val_acc, seen=seen)
        history.append(stats)
        if log is not None:
            log(f"epoch={epoch} train_loss={stats.train_loss:.6g} "
                f"train_acc={stats.train_acc:.4f} val_loss={val_loss:.6g} "
                f"val_acc={val_acc:.4f}")
        if val_loss < best_loss:
            best_loss = val_loss
            best = Checkpoint.from_model(model, cfg.adam, epoch, val_loss,
                                         val_acc, provenance)
            save_checkpoint(best, cfg.checkpoint_path)

    final = Checkpoint.from_model(model, cfg.adam, cfg.epochs - 1,
                                  history[-1].val_loss, history[-1].val_acc,
                                  provenance)
    save_checkpoint(final, cfg.checkpoint_path + ".final")
    return best, history


# ---------------------------------------------------------------------------
# evaluation and reports


@dataclass
class EvalReport:
    """Test-set outcome for one attribute; accuracy derives from the matrix."""

    attribute: str
    classes: list
    confusion: np.ndarray  # rows = true class, columns = predicted
    count: int

    @property
    def accuracy(self):
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def precision(self):
        col = self.confusion.sum(axis=0)
        diag = np.diag(self.confusion)
        return [float(diag[i] / col[i]) if col[i] else 0.0 for i in range(len(col))]

    @property
    def recall(self):
        row = self.confusion.sum(axis=1)
        diag = np.diag(self.confusion)
        return [float(diag[i] / row[i]) if row[i] else 0.0 for i in range(len(row))]

    def to_obj(self):
        return {
            "attribute": self.attribute,
            "accuracy": self.accuracy,
            "count": self.count,
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "precision": self.precision,
            "recall": self.recall,
        }

    def lines(self):
        out = [f"attribute={self.attribute}",
               f"samples={self.count}",
               f"accuracy={self.accuracy:.4f}"]
        for i, name in enumerate(self.classes):
            out.append(f"class={name} precision={self.precision[i]:.4f} "
                       f"recall={self.recall[i]:.4f}")
        return out


def evaluate(ckpt, records, source, batch_size=32):
    """Eval-mode predictions over a manifest; order-insensitive."""
    model = ckpt.to_model()
    attribute = ckpt.provenance.get("attribute")
    if not attribute:
        raise CheckpointError("checkpoint carries no attribute name")
    classes = ckpt.provenance.get("classes")
    if not classes:
        classes = ([f"class{i}" for i in range(model.spec.head.classes)]
                   if model.spec.head.kind == "softmax" else ["class0", "class1"])
    k = len(classes)
    kind = "multiclass" if model.spec.head.kind == "softmax" else "binary"
    acc = MetricAccumulator(kind=kind, num_classes=k)
    dtype = model.param_dtype()
    for images, labels in batch_iterator(records, source, attribute,
                                         batch_size=batch_size, phase="eval"):
        if labels.min() < 0 or labels.max() >= k:
            raise ContractError(
                f"test label outside [0, {k}) for attribute {attribute!r}")
        probs = model.forward(_cast_batch(images, dtype), mode="eval")
        acc.update(probs, labels)
    if acc.total == 0:
        raise ContractError("evaluation over zero samples")
    return EvalReport(attribute=attribute, classes=list(classes),
                      confusion=acc.confusion, count=acc.total)


def report_from_obj(obj):
    """Rebuild an EvalReport from its JSON object form."""
    needed = {"attribute", "accuracy", "count", "classes", "confusion",
              "precision", "recall"}
    if not isinstance(obj, dict) or not needed <= set(obj):
        raise ContractError("malformed evaluation report object")
    return EvalReport(attribute=obj["attribute"], classes=list(obj["classes"]),
                      confusion=np.asarray(obj["confusion"], dtype=np.int64),
                      count=obj["count"])


def _report_rows(items):
    rows = []
    for item in items:
        if isinstance(item, EvalReport):
            rows.append((item.attribute, item.accuracy))
        else:
            name, acc = item
            rows.append((str(name), float(acc)))
    return rows


def report_table(items, style="plain"):
    """Aligned text table of accuracies as percentages (2 decimals).

    ``plain`` lists one row per attribute; ``averaged`` appends an
    Average row (arithmetic mean of the listed accuracies).
    """
    if style not in ("plain", "averaged"):
        raise ContractError(f"style must be 'plain' or 'averaged', got {style!r}")
    rows = _report_rows(items)
    if not rows:
        raise ContractError("report needs at least one result")
    if style == "averaged":
        mean = sum(acc for _, acc in rows) / len(rows)
        rows = rows + [("Average", mean)]
    width = max(len(name) for name, _ in rows)
    width = max(width, len("attribute"))
    lines = [f"{'attribute':<{width}}  accuracy"]
    lines += [f"{name:<{width}}  {acc * 100.0:.2f}" for name, acc in rows]
    return "\n".join(lines) + "\n"


def report_jsonl(reports):
    """One JSON object per report, in input order."""
    return "".join(json.dumps(r.to_obj(), sort_keys=True) + "\n" for r in reports)


# ---------------------------------------------------------------------------
# history CSV

HISTORY_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"


def export_history(history, path):
    """History as CSV, 6 significant digits per value."""
    if not history:
        raise ContractError("history is empty; nothing to export")
    lines = [HISTORY_HEADER]
    for st in history:
        lines.append(f"{st.epoch},{st.train_loss:.6g},{st.train_acc:.6g},"
                     f"{st.val_loss:.6g},{st.val_acc:.6g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_history(path):
    """Read a history CSV back into rows of floats."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != HISTORY_HEADER:
        raise ContractError(f"{path}: not a history CSV (bad header)")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise ContractError(f"{path}: malformed row {ln!r}")
        try:
            rows.append({"epoch": int(parts[0]), "train_loss": float(parts[1]),
                         "train_acc": float(parts[2]), "val_loss": float(parts[3]),
                         "val_acc": float(parts[4])})
        except ValueError as exc:
            raise ContractError(f"{path}: malformed row {ln!r}") from exc
    return rows
