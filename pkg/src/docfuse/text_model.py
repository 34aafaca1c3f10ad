"""Text classifiers: the word-sequence 1D CNN and the document-embedding MLP."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .embeddings import DocumentEmbedding, SubwordEmbedder, SubwordEmbedding, TokenBatch
from .errors import ConfigError, DataError, DimensionError
from .model import Model, register
from .nn import BatchNorm, Conv1d, Dense, Dropout, MaxOverTime, MaxPool1d, ReLU, Sequential, make_rng
from .training import ArrayData, TextData, TrainHyper, fit


@dataclass
class TextCnnConfig:
    num_classes: int = 10
    depth: int = 4
    channels: int = 512
    window: int = 12
    pool_window: int = 2
    pool_stride: int = 2
    feature_dim: int = 128
    dropout: float = 0.5
    max_len: int = 500
    embed_dim: int = 300
    num_buckets: int = 2_000_000
    n_min: int = 3
    n_max: int = 6
    hash_seed: int = 0
    batchnorm: bool = False
    trainable_embeddings: bool = True
    embed_init_std: float = 0.5

    def __post_init__(self):
        ints = (self.num_classes, self.depth, self.channels, self.window, self.pool_window,
                self.pool_stride, self.feature_dim, self.max_len, self.embed_dim, self.num_buckets)
        if min(ints) < 1:
            raise ConfigError(f"TextCnnConfig values must be positive: {self}")
        if self.window > self.max_len:
            raise ConfigError(f"window {self.window} exceeds max_len {self.max_len}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.embed_init_std <= 0:
            raise ConfigError(f"embed_init_std must be positive, got {self.embed_init_std}")

    @classmethod
    def desk(cls, num_classes: int = 10, **overrides) -> "TextCnnConfig":
        """Laptop-sized variant: same topology, narrower, shorter and with a smaller bucket table."""
        base = cls(num_classes=num_classes, channels=32, embed_dim=32, max_len=64, num_buckets=50_000)
        return replace(base, **overrides)


@dataclass
class MlpConfig:
    input_dim: int = 300
    num_classes: int = 10
    hidden_width: int = 2048
    num_hidden_layers: int = 2
    feature_dim: int = 128
    dropout: float = 0.5

    def __post_init__(self):
        if min(self.input_dim, self.num_classes, self.hidden_width, self.feature_dim) < 1:
            raise ConfigError(f"MlpConfig values must be positive: {self}")
        if self.num_hidden_layers < 0:
            raise ConfigError("num_hidden_layers must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@register
class TextCnn(Model):
    """``depth`` x (conv1d -> [BN] -> ReLU -> maxpool) -> max-over-time -> dropout -> dense.

    Accepts either a :class:`TokenBatch` (embedded by the trainable subword
    table) or an already embedded ``(B, embed_dim, max_len)`` array.  Without
    an ``rng`` only the shape algebra is run and nothing is allocated.
    """

    kind = "textcnn"

    def __init__(self, cfg: TextCnnConfig, rng: np.random.Generator | None = None,
                 embedder: SubwordEmbedder | None = None, head: bool = True, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        if rng is not None and embedder is None:
            # a word averages ~15 rows, so rows start wider than the usual 1/sqrt(dim)
            table = rng.normal(0.0, cfg.embed_init_std, size=(cfg.num_buckets, cfg.embed_dim))
            embedder = SubwordEmbedder(table.astype(dtype), cfg.n_min, cfg.n_max, cfg.hash_seed)
        if embedder is not None and embedder.dim != cfg.embed_dim:
            raise DimensionError(f"embedder dim {embedder.dim} != config embed_dim {cfg.embed_dim}")
        self.embedder = embedder
        self.embedding = None
        if embedder is not None:
            self.embedding = SubwordEmbedding(embedder, cfg.max_len)
            self.embedding.trainable = cfg.trainable_embeddings
        layers = []
        for _ in range(cfg.depth):
            layers.append(Conv1d(cfg.channels, cfg.window))
            if cfg.batchnorm:
                layers.append(BatchNorm())
            layers += [ReLU(), MaxPool1d(cfg.pool_window, cfg.pool_stride)]
        layers += [MaxOverTime(), Dropout(cfg.dropout), Dense(cfg.feature_dim)]
        self.body = Sequential(layers)
        self.body.build((cfg.embed_dim, cfg.max_len), rng, dtype)
        if head:
            self.head = Dense(cfg.num_classes)
            self.head.build((cfg.feature_dim,), rng, dtype)

    def shape_trace(self) -> list[tuple[int, ...]]:
        """Input shape followed by every distinct intermediate shape (batch axis excluded)."""
        trace = [self.body.shapes[0]]
        for s in self.body.shapes[1:]:
            if s != trace[-1]:
                trace.append(s)
        return trace

    def modules(self):
        mods = []
        if self.embedding is not None:
            mods.append(("embedding", self.embedding))
        mods.append(("features", self.body))
        if self.head is not None:
            mods.append(("head", self.head))
        return mods

    def embed(self, x, training=False, rng=None):
        if isinstance(x, TokenBatch):
            if self.embedding is None:
                raise DimensionError("token input needs a model built with an embedder")
            return self.embedding.forward(x)
        return x

    def features(self, x, training=False, rng=None):
        self._token_input = isinstance(x, TokenBatch)
        x = self.embed(x)
        if x.shape[1:] != (self.cfg.embed_dim, self.cfg.max_len):
            raise DimensionError(
                f"text input {x.shape[1:]} does not match (embed_dim, max_len)="
                f"{(self.cfg.embed_dim, self.cfg.max_len)}")
        return self.body.forward(x, training, rng)

    def backward_features(self, dfeat):
        dx = self.body.backward(dfeat)
        if self._token_input and self.embedding.trainable:
            self.embedding.backward(dx)
        return dx

    def config_dict(self):
        return {"cfg": asdict(self.cfg), "head": self.head is not None}

    @classmethod
    def from_config(cls, config):
        cfg = TextCnnConfig(**config["cfg"])
        table = np.zeros((cfg.num_buckets, cfg.embed_dim), dtype=np.float32)
        embedder = SubwordEmbedder(table, cfg.n_min, cfg.n_max, cfg.hash_seed)
        return cls(cfg, make_rng(0), embedder=embedder, head=config["head"])


@register
class TextMlp(Model):
    """``n`` x (dense -> ReLU -> dropout -> BN) -> dense(feature_dim) over SIF vectors."""

    kind = "textmlp"

    def __init__(self, cfg: MlpConfig, rng: np.random.Generator | None = None, head: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        layers = []
        for _ in range(cfg.num_hidden_layers):
            layers += [Dense(cfg.hidden_width), ReLU(), Dropout(cfg.dropout), BatchNorm()]
        layers.append(Dense(cfg.feature_dim))
        self.body = Sequential(layers)
        self.body.build((cfg.input_dim,), rng, dtype)
        if head:
            self.head = Dense(cfg.num_classes)
            self.head.build((cfg.feature_dim,), rng, dtype)

    def modules(self):
        mods = [("features", self.body)]
        if self.head is not None:
            mods.append(("head", self.head))
        return mods

    def features(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise DimensionError(f"document vectors {x.shape} do not match input_dim {self.cfg.input_dim}")
        return self.body.forward(x, training, rng)

    def backward_features(self, dfeat):
        return self.body.backward(dfeat)

    def config_dict(self):
        return {"cfg": asdict(self.cfg), "head": self.head is not None}

    @classmethod
    def from_config(cls, config):
        return cls(MlpConfig(**config["cfg"]), make_rng(0), head=config["head"])


def textcnn_forward(seq, model: TextCnn, training: bool = False, features: bool = False):
    """Single-document convenience wrapper: ``WordSequence`` or ``(E, L)`` matrix in."""
    matrix = getattr(seq, "matrix", seq)
    x = np.asarray(matrix, dtype=model.head.params["w"].dtype if model.head else np.float32)[None]
    out = model.features(x, training) if features else model.forward(x, training)
    return out[0]


def train_text(docs, labels, cfg: TextCnnConfig | MlpConfig, hyper: TrainHyper | None = None,
               rng: np.random.Generator | None = None, embedder: SubwordEmbedder | None = None,
               val=None) -> tuple[Model, list[dict]]:
    """Train the CNN on token lists or the MLP on document vectors.

    ``val`` is an optional ``(docs, labels)`` pair of the same kind as ``docs``.
    """
    hyper = hyper or TrainHyper(epochs=100)
    rng = rng if rng is not None else make_rng(0)
    if len(docs) == 0:
        raise DataError("cannot train on an empty dataset")
    if isinstance(cfg, TextCnnConfig):
        model = TextCnn(cfg, rng, embedder=embedder)
        wrap = lambda d: TextData(d, model.embedder, cfg.max_len)  # noqa: E731
    else:
        model = TextMlp(cfg, rng)
        wrap = lambda d: ArrayData(_as_matrix(d))  # noqa: E731
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise DataError(f"labels outside [0, {cfg.num_classes})")
    val_pair = (wrap(val[0]), val[1]) if val is not None else None
    history = fit(model, wrap(docs), labels, hyper, rng, val=val_pair)
    return model, history


def _as_matrix(docs) -> np.ndarray:
    if isinstance(docs, np.ndarray):
        return docs.astype(np.float32)
    return np.stack([d.vector if isinstance(d, DocumentEmbedding) else d for d in docs]).astype(np.float32)
