"""End-to-end text + image fusion classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .embeddings import SubwordEmbedder, WordSequence
from .errors import ConfigError, DataError, DimensionError
from .model import Model, register
from .nn import Dense, Dropout, ReLU, Sequential, make_rng
from .text_model import TextCnn, TextCnnConfig
from .training import ArrayData, PairData, TextData, TrainHyper, fit
from .vision import ImageSample, MobileNet, VisionConfig

FUSION_KINDS = ("concat", "sum")


def fuse(text_feat: np.ndarray, image_feat: np.ndarray, kind: str = "concat") -> np.ndarray:
    """Concatenate (text first, then image) or add along the last axis."""
    if text_feat.shape != image_feat.shape:
        raise DimensionError(f"cannot fuse text {text_feat.shape} with image {image_feat.shape}")
    if kind == "concat":
        return np.concatenate([text_feat, image_feat], axis=-1)
    if kind == "sum":
        return text_feat + image_feat
    raise ConfigError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def fuse_backward(dfused: np.ndarray, kind: str = "concat") -> tuple[np.ndarray, np.ndarray]:
    if kind == "concat":
        d = dfused.shape[-1] // 2
        return dfused[..., :d], dfused[..., d:]
    return dfused, dfused


@dataclass
class FusionConfig:
    text: TextCnnConfig = field(default_factory=TextCnnConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    num_classes: int = 10
    fusion_kind: str = "concat"
    hidden_widths: tuple[int, ...] = (256, 256)
    dropout: float = 0.5

    def __post_init__(self):
        if isinstance(self.text, dict):
            self.text = TextCnnConfig(**self.text)
        if isinstance(self.vision, dict):
            self.vision = VisionConfig(**self.vision)
        self.hidden_widths = tuple(self.hidden_widths)
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion_kind!r}; expected one of {FUSION_KINDS}")
        if self.text.feature_dim != self.vision.feature_dim:
            raise DimensionError(
                f"branch feature dims differ: text {self.text.feature_dim}, image {self.vision.feature_dim}")
        if self.num_classes < 1 or any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"invalid classifier spec {self.hidden_widths} / {self.num_classes} classes")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def joint_dim(self) -> int:
        d = self.text.feature_dim
        return 2 * d if self.fusion_kind == "concat" else d

    @classmethod
    def desk(cls, num_classes: int = 10, **overrides) -> "FusionConfig":
        return cls(text=TextCnnConfig.desk(num_classes), vision=VisionConfig.desk(num_classes),
                   num_classes=num_classes, **overrides)


@dataclass
class MultimodalSample:
    image: ImageSample
    sequence: WordSequence
    label: int = -1

    @property
    def missing_text(self) -> bool:
        return bool(self.sequence.empty)


@register
class FusionModel(Model):
    """Text CNN and image CNN feature extractors, fused, then an MLP classifier.

    Inputs are ``(text, images)`` pairs where ``text`` is anything the text
    branch accepts (token batch or embedded sequences).
    """

    kind = "fusion"

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator | None = None,
                 embedder: SubwordEmbedder | None = None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.text = TextCnn(cfg.text, rng, embedder=embedder, head=False, dtype=dtype)
        self.vision = MobileNet(cfg.vision, rng, head=False, dtype=dtype)
        layers = []
        for width in cfg.hidden_widths:
            layers += [Dense(width), ReLU(), Dropout(cfg.dropout)]
        self.classifier = Sequential(layers)
        feat_shape = self.classifier.build((cfg.joint_dim,), rng, dtype)
        self.head = Dense(cfg.num_classes)
        self.head.build(feat_shape, rng, dtype)

    @property
    def embedder(self) -> SubwordEmbedder | None:
        return self.text.embedder

    def modules(self):
        mods = [(f"text.{name}", layer) for name, layer in self.text.modules()]
        mods += [(f"image.{name}", layer) for name, layer in self.vision.modules()]
        return mods + [("classifier", self.classifier), ("head", self.head)]

    def branch_features(self, x, training=False, rng=None):
        text, images = x
        return self.text.features(text, training, rng), self.vision.features(images, training, rng)

    def features(self, x, training=False, rng=None):
        t, v = self.branch_features(x, training, rng)
        return self.classifier.forward(fuse(t, v, self.cfg.fusion_kind), training, rng)

    def backward_features(self, dfeat):
        dt, dv = fuse_backward(self.classifier.backward(dfeat), self.cfg.fusion_kind)
        self.text.backward_features(np.ascontiguousarray(dt))
        self.vision.backward_features(np.ascontiguousarray(dv))

    def config_dict(self):
        return {"cfg": asdict(self.cfg)}

    @classmethod
    def from_config(cls, config):
        cfg = FusionConfig(**config["cfg"])
        table = np.zeros((cfg.text.num_buckets, cfg.text.embed_dim), dtype=np.float32)
        embedder = SubwordEmbedder(table, cfg.text.n_min, cfg.text.n_max, cfg.text.hash_seed)
        return cls(cfg, make_rng(0), embedder=embedder)

    def load_branches(self, text_model: TextCnn | None = None, vision_model: MobileNet | None = None) -> None:
        """Copy feature-extractor weights from separately trained branch models."""
        for own, other in ((self.text, text_model), (self.vision, vision_model)):
            if other is None:
                continue
            state = {k: v for k, v in other.named_state() if not k.startswith("head.")}
            own.load_state(state)

    def export_branch(self, which: str) -> Model:
        """The text or image feature extractor as a standalone (headless) model."""
        if which == "text":
            return self.text
        if which == "image":
            return self.vision
        raise ConfigError(f"unknown branch {which!r}; expected text or image")


def fusion_forward(sample: MultimodalSample, model: FusionModel, features: bool = False) -> np.ndarray:
    """Logits (or classifier features) for one already embedded sample."""
    text = np.asarray(sample.sequence.matrix, dtype=np.float32)[None]
    image = sample.image.standardized()[None]
    out = model.features((text, image)) if features else model.forward((text, image))
    return out[0]


def fusion_data(docs, images: np.ndarray, model: FusionModel) -> PairData:
    return PairData(TextData(docs, model.embedder, model.cfg.text.max_len),
                    ArrayData(np.asarray(images, dtype=np.float32)))


def train_fusion(docs, images: np.ndarray, labels, cfg: FusionConfig, hyper: TrainHyper | None = None,
                 rng: np.random.Generator | None = None, init: str = "scratch",
                 pretrained: tuple[TextCnn | None, MobileNet | None] | None = None,
                 embedder: SubwordEmbedder | None = None, val=None) -> tuple[FusionModel, list[dict]]:
    """Joint SGD over both branches and the classifier.

    ``init="from_pretrained_branches"`` copies branch weights (and the text
    model's embedding table) from ``pretrained`` before training.  ``val`` is
    an optional ``(docs, images, labels)`` triple.
    """
    hyper = hyper or TrainHyper(epochs=200)
    rng = rng if rng is not None else make_rng(0)
    if len(docs) == 0:
        raise DataError("cannot train on an empty dataset")
    labels = np.asarray(labels)
    if len(labels) != len(docs) or len(images) != len(docs):
        raise DataError(f"sample counts differ: {len(docs)} texts, {len(images)} images, {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise DataError(f"labels outside [0, {cfg.num_classes})")
    if init == "from_pretrained_branches":
        if pretrained is None:
            raise ConfigError("from_pretrained_branches needs pretrained (text, image) models")
        if embedder is None and pretrained[0] is not None and pretrained[0].embedder is not None:
            embedder = SubwordEmbedder(pretrained[0].embedder.table.copy(), cfg.text.n_min,
                                       cfg.text.n_max, cfg.text.hash_seed)
        model = FusionModel(cfg, rng, embedder=embedder)
        model.load_branches(*pretrained)
    elif init == "scratch":
        model = FusionModel(cfg, rng, embedder=embedder)
    else:
        raise ConfigError(f"unknown init {init!r}; expected scratch or from_pretrained_branches")
    val_pair = (fusion_data(val[0], val[1], model), val[2]) if val is not None else None
    return model, fit(model, fusion_data(docs, images, model), labels, hyper, rng, val=val_pair)
