"""Common plumbing for the text, vision and fusion classifiers.

A model is a named list of layers.  ``features`` runs everything up to the
fusion cut point, ``forward`` adds the softmax head (logits out).  State
(parameters and buffers, in graph order) round-trips through the binary
checkpoint format.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .nn import checkpoint
from .nn.layers import Layer

_REGISTRY: dict[str, type["Model"]] = {}


def register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


class Model:
    kind = "model"

    def __init__(self):
        self.head: Layer | None = None

    # -- graph ---------------------------------------------------------------
    def modules(self) -> list[tuple[str, Layer]]:
        raise NotImplementedError

    def features(self, x, training: bool = False, rng=None):
        raise NotImplementedError

    def backward_features(self, dfeat):
        raise NotImplementedError

    def forward(self, x, training: bool = False, rng=None):
        if self.head is None:
            raise DimensionError(f"{self.kind} was built without a classification head")
        return self.head.forward(self.features(x, training, rng), training, rng)

    def backward(self, dlogits):
        return self.backward_features(self.head.backward(dlogits))

    def config_dict(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_config(cls, config: dict) -> "Model":
        raise NotImplementedError

    # -- parameters ----------------------------------------------------------
    def named_params(self) -> Iterator[tuple[str, Layer, str]]:
        for prefix, layer in self.modules():
            yield from layer.named_params(prefix + ".")

    def named_state(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters then buffers of each module, module by module."""
        for prefix, layer in self.modules():
            for name, owner, key in layer.named_params(prefix + "."):
                yield name, owner.params[key]
            for name, owner, key in layer.named_buffers(prefix + "."):
                yield name, owner.buffers[key]

    def trainable(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        params, grads = {}, {}
        for name, owner, key in self.named_params():
            params[name] = owner.params[key]
            grads[name] = owner.grads[key]
        return params, grads

    def load_state(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy ``tensors`` into the existing arrays (in place, shapes must match)."""
        own = dict(self.named_state())
        if strict and list(tensors) != list(own):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise FormatError(f"{self.kind}: state mismatch (missing {missing[:5]}, unexpected {extra[:5]})")
        for name, arr in tensors.items():
            if name not in own:
                continue
            if own[name].shape != arr.shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
            own[name][...] = arr

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        config = {"model": self.config_dict()}
        if extra:
            config.update(extra)
        checkpoint.save(path, self.kind, config, self.named_state())


def load_model(path) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, full_config)``."""
    kind, config, tensors = checkpoint.load(path)
    cls = _REGISTRY.get(kind)
    if cls is None:
        raise FormatError(f"unknown model kind {kind!r} in {path}")
    model = cls.from_config(config["model"])
    model.load_state(tensors)
    return model, config


def predict_logits(model: Model, data, batch_size: int = 64) -> np.ndarray:
    """Inference-mode logits over a dataset object (see ``training``)."""
    n = len(data)
    if n == 0:
        raise DataError("cannot predict on an empty dataset")
    out = [model.forward(data.batch(np.arange(i, min(i + batch_size, n))), training=False)
           for i in range(0, n, batch_size)]
    return np.concatenate(out)
