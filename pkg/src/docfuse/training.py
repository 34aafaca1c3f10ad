"""Mini-batch SGD-momentum loop shared by all three classifiers."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .embeddings import SubwordEmbedder, TokenBatch, encode_batch
from .errors import ConfigError, DataError, DocfuseError
from .model import Model, predict_logits
from .nn import SgdMomentum, SoftmaxCrossEntropy, child_rng

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 40
    epochs: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"invalid training hyperparameters {self}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


# -- dataset adaptors: anything with __len__ and batch(indices) ---------------

class TextData:
    def __init__(self, docs: Sequence[Sequence[str]], embedder: SubwordEmbedder, max_len: int):
        self.docs, self.embedder, self.max_len = list(docs), embedder, max_len

    def __len__(self):
        return len(self.docs)

    def batch(self, idx) -> TokenBatch:
        return encode_batch([self.docs[i] for i in idx], self.embedder, self.max_len)


class ArrayData:
    def __init__(self, array: np.ndarray):
        self.array = array

    def __len__(self):
        return len(self.array)

    def batch(self, idx):
        return self.array[idx]


class PairData:
    """Text and image views of the same samples, batched together."""

    def __init__(self, text, image):
        if len(text) != len(image):
            raise DataError(f"text/image sample counts differ: {len(text)} vs {len(image)}")
        self.text, self.image = text, image

    def __len__(self):
        return len(self.text)

    def batch(self, idx):
        return self.text.batch(idx), self.image.batch(idx)


def accuracy_of(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == labels))


def fit(model: Model, data, labels, hyper: TrainHyper, rng: np.random.Generator,
        val: tuple | None = None, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Train ``model`` in place; returns one record per epoch.

    ``loss`` and ``train_acc`` are averaged over the epoch's mini-batches in
    training mode (dropout active).  ``val`` is an optional ``(data, labels)``
    pair scored in inference mode after every epoch.  Shuffling is reseeded
    per epoch from ``rng``; dropout draws from a separate child stream.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(data)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if len(labels) != n:
        raise DataError(f"{n} samples but {len(labels)} labels")
    drop_rng = child_rng(rng)
    opt = SgdMomentum(hyper.learning_rate, hyper.momentum)
    loss_fn = SoftmaxCrossEntropy()
    history = []
    for epoch in range(1, hyper.epochs + 1):
        order = child_rng(rng).permutation(n)
        total_loss = correct = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            logits = model.forward(data.batch(idx), training=True, rng=drop_rng)
            loss = loss_fn.forward(logits, labels[idx])
            if not np.isfinite(loss):
                raise DocfuseError(f"training diverged at epoch {epoch} (loss={loss})")
            model.backward(loss_fn.backward().astype(logits.dtype, copy=False))
            opt.step(*model.trainable())
            total_loss += loss * len(idx)
            correct += float(np.sum(logits.argmax(axis=1) == labels[idx]))
        record = {"epoch": epoch, "loss": total_loss / n, "train_acc": correct / n, "val_acc": None}
        if val is not None:
            record["val_acc"] = accuracy_of(predict_logits(model, val[0]), np.asarray(val[1]))
        history.append(record)
        log.debug("epoch %d loss %.4f train_acc %.3f", epoch, record["loss"], record["train_acc"])
        if on_epoch is not None:
            on_epoch(record)
    return history


def write_history(history: list[dict], path) -> None:
    """JSON lines, one ``{epoch, loss, train_acc, val_acc}`` record per epoch."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps({k: rec[k] for k in ("epoch", "loss", "train_acc", "val_acc")}) + "\n")


def hyper_dict(hyper: TrainHyper) -> dict:
    return asdict(hyper)
