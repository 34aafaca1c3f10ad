"""Image ingest and the inverted-residual (MobileNetV2-style) image branch."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError
from .model import Model, register
from .nn import (
    BatchNorm, Conv2d, Dense, DepthwiseConv2d, GlobalAvgPool2d, PointwiseConv2d, ReLU,
    Sequential, make_rng,
)
from .nn.layers import Layer
from .training import ArrayData, TrainHyper, fit

# -- raster I/O --------------------------------------------------------------

_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def decode_pgm(data: bytes) -> np.ndarray:
    """Binary PGM (P5) with maxval 255 -> ``uint8`` array of shape ``(H, W)``."""
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM: missing P5 magic")
    m = _PGM_HEADER.match(data)
    if m is None:
        raise FormatError("malformed PGM header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"empty PGM raster {width}x{height}")
    body = data[m.end():]
    if len(body) < width * height:
        raise FormatError(f"PGM data truncated: {len(body)} bytes for {width}x{height}")
    return np.frombuffer(body[:width * height], dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise FormatError(f"PGM export needs a 2D uint8 raster, got {raster.dtype} {raster.shape}")
    h, w = raster.shape
    return b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes()


def read_raster(path) -> np.ndarray:
    """Read an 8-bit grayscale raster.  PNG needs the optional Pillow dependency."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc.strerror}") from None
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise FormatError("PNG ingest requires Pillow (install docfuse[png])") from None
        import io
        try:
            with Image.open(io.BytesIO(data)) as img:
                return np.asarray(img.convert("L"), dtype=np.uint8)
        except OSError as exc:  # includes UnidentifiedImageError
            raise FormatError(f"{path}: {exc}") from None
    try:
        return decode_pgm(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_pgm(path, raster: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(raster))


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping.

    The aspect ratio is not preserved; a same-size call is the identity.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, height)
    x0, x1, wx = axis(w, width)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


@dataclass
class ImageSample:
    """Three identical channels in [0, 1]; ``standardized`` is the model input."""

    pixels: np.ndarray
    source_size: tuple[int, int]

    def standardized(self) -> np.ndarray:
        return ((self.pixels - 0.5) / 0.5).astype(np.float32)


def preprocess_image(raster: np.ndarray, size: int) -> ImageSample:
    """Warp-resize to ``size x size``, scale to [0, 1], replicate to 3 channels."""
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.size == 0:
        raise FormatError(f"expected a non-empty 2D grayscale raster, got shape {raster.shape}")
    if raster.dtype != np.uint8:
        raise FormatError(f"expected 8-bit grayscale, got dtype {raster.dtype}")
    gray = resize_bilinear(raster, size, size) / 255.0
    pixels = np.broadcast_to(gray.astype(np.float32), (3, size, size)).copy()
    return ImageSample(pixels, (int(raster.shape[0]), int(raster.shape[1])))


# -- architecture ------------------------------------------------------------

@dataclass
class InvertedResidualSpec:
    expansion: int
    out_channels: int
    stride: int = 1
    repeat: int = 1

    def __post_init__(self):
        if self.expansion < 1 or self.out_channels < 1 or self.repeat < 1:
            raise ConfigError(f"invalid inverted residual spec {self}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")


# (t, c, n, s) rows of the original MobileNetV2 body
MOBILENET_V2_BLOCKS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                       (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


@dataclass
class VisionConfig:
    num_classes: int = 10
    input_size: int = 384
    stem_channels: int = 32
    blocks: list[InvertedResidualSpec] = field(
        default_factory=lambda: [InvertedResidualSpec(t, c, s, n) for t, c, n, s in MOBILENET_V2_BLOCKS])
    head_dim: int = 1280
    feature_dim: int = 128
    linear_bottleneck: bool = False

    def __post_init__(self):
        self.blocks = [b if isinstance(b, InvertedResidualSpec) else InvertedResidualSpec(**b)
                       for b in self.blocks]
        if min(self.num_classes, self.input_size, self.stem_channels, self.head_dim, self.feature_dim) < 1:
            raise ConfigError(f"VisionConfig values must be positive: {self}")

    @classmethod
    def full(cls, num_classes: int = 10) -> "VisionConfig":
        return cls(num_classes=num_classes)

    @classmethod
    def desk(cls, num_classes: int = 10, **overrides) -> "VisionConfig":
        blocks = [InvertedResidualSpec(1, 16, 1), InvertedResidualSpec(4, 24, 2),
                  InvertedResidualSpec(4, 24, 1), InvertedResidualSpec(4, 32, 2),
                  InvertedResidualSpec(4, 32, 1), InvertedResidualSpec(4, 64, 2)]
        base = cls(num_classes=num_classes, input_size=96, stem_channels=16, blocks=blocks, head_dim=256)
        return replace(base, **overrides)

    @classmethod
    def micro(cls, num_classes: int = 10, **overrides) -> "VisionConfig":
        """Two-block network on 32x32 input, for tests and quick experiments."""
        blocks = [InvertedResidualSpec(2, 8, 1), InvertedResidualSpec(3, 16, 2)]
        base = cls(num_classes=num_classes, input_size=32, stem_channels=8, blocks=blocks, head_dim=32)
        return replace(base, **overrides)

    @classmethod
    def preset(cls, name: str, num_classes: int = 10) -> "VisionConfig":
        try:
            return {"full": cls.full, "desk": cls.desk, "micro": cls.micro}[name](num_classes)
        except KeyError:
            raise ConfigError(f"unknown vision preset {name!r}; expected full, desk or micro") from None


class InvertedResidual(Layer):
    """1x1 expand (linear) -> 3x3 depthwise -> ReLU -> 1x1 project -> ReLU, BN after each conv.

    The identity skip is added iff ``stride == 1`` and the channel count is
    unchanged.  ``linear_bottleneck`` drops the final ReLU.
    """

    kind = "invertedresidual"

    def __init__(self, expansion: int, out_channels: int, stride: int = 1, linear_bottleneck: bool = False):
        super().__init__()
        self.expansion, self.out_channels, self.stride = expansion, out_channels, stride
        self.linear_bottleneck = linear_bottleneck
        self.use_skip = False
        self.body: Sequential | None = None

    def build(self, in_shape, rng=None, dtype=np.float32):
        if len(in_shape) != 3:
            raise DimensionError(f"inverted residual: expected (C, H, W), got {tuple(in_shape)}")
        c = in_shape[0]
        layers = [PointwiseConv2d(c * self.expansion), BatchNorm(),
                  DepthwiseConv2d(3, self.stride), BatchNorm(), ReLU(),
                  PointwiseConv2d(self.out_channels), BatchNorm()]
        if not self.linear_bottleneck:
            layers.append(ReLU())
        self.body = Sequential(layers)
        self.use_skip = self.stride == 1 and c == self.out_channels
        return self.body.build(in_shape, rng, dtype)

    def forward(self, x, training=False, rng=None):
        y = self.body.forward(x, training, rng)
        return y + x if self.use_skip else y

    def backward(self, dout):
        dx = self.body.backward(dout)
        return dx + dout if self.use_skip else dx

    def named_params(self, prefix=""):
        return self.body.named_params(prefix)

    def named_buffers(self, prefix=""):
        return self.body.named_buffers(prefix)


def inverted_residual_forward(x, block: InvertedResidual, training: bool = False, rng=None):
    return block.forward(x, training, rng)


@register
class MobileNet(Model):
    """Stem conv -> inverted residual blocks -> 1x1 conv to ``head_dim`` -> GAP -> dense+ReLU."""

    kind = "mobilenet"

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator | None = None, head: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        layers: list[Layer] = [Conv2d(cfg.stem_channels, 3, 2), BatchNorm(), ReLU()]
        for spec in cfg.blocks:
            for i in range(spec.repeat):
                layers.append(InvertedResidual(spec.expansion, spec.out_channels,
                                               spec.stride if i == 0 else 1, cfg.linear_bottleneck))
        layers += [PointwiseConv2d(cfg.head_dim), BatchNorm(), ReLU(), GlobalAvgPool2d()]
        self.pooled_index = len(layers)
        layers += [Dense(cfg.feature_dim), ReLU()]
        self.body = Sequential(layers)
        self.body.build((3, cfg.input_size, cfg.input_size), rng, dtype)
        if head:
            self.head = Dense(cfg.num_classes)
            self.head.build((cfg.feature_dim,), rng, dtype)

    @property
    def pooled_shape(self) -> tuple[int, ...]:
        return self.body.shapes[self.pooled_index]

    @property
    def num_blocks(self) -> int:
        return sum(isinstance(layer, InvertedResidual) for layer in self.body.layers)

    def modules(self):
        mods = [("features", self.body)]
        if self.head is not None:
            mods.append(("head", self.head))
        return mods

    def features(self, x, training=False, rng=None):
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise DimensionError(f"image batch {x.shape} does not match (B, 3, {s}, {s})")
        return self.body.forward(x, training, rng)

    def backward_features(self, dfeat):
        return self.body.backward(dfeat)

    def config_dict(self):
        return {"cfg": asdict(self.cfg), "head": self.head is not None}

    @classmethod
    def from_config(cls, config):
        return cls(VisionConfig(**config["cfg"]), make_rng(0), head=config["head"])


def vision_forward(img: ImageSample | np.ndarray, model: MobileNet, features: bool = False) -> np.ndarray:
    x = img.standardized() if isinstance(img, ImageSample) else np.asarray(img, dtype=np.float32)
    x = x[None] if x.ndim == 3 else x
    out = model.features(x) if features else model.forward(x)
    return out[0] if isinstance(img, ImageSample) else out


def train_vision(images: np.ndarray, labels, cfg: VisionConfig, hyper: TrainHyper | None = None,
                 rng: np.random.Generator | None = None, val=None) -> tuple[MobileNet, list[dict]]:
    """``images`` are standardized ``(N, 3, S, S)`` arrays."""
    hyper = hyper or TrainHyper(epochs=200)
    rng = rng if rng is not None else make_rng(0)
    if len(images) == 0:
        raise DataError("cannot train on an empty dataset")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise DataError(f"labels outside [0, {cfg.num_classes})")
    model = MobileNet(cfg, rng)
    val_pair = (ArrayData(val[0]), val[1]) if val is not None else None
    return model, fit(model, ArrayData(np.asarray(images, dtype=np.float32)), labels, hyper, rng, val=val_pair)
