"""Per-stage inference latency harness.

Stages, in pipeline order: ``load`` (read text and raster from disk),
``text_embed`` (tokenize and look up subword vectors), ``text_forward``
(text CNN up to its feature vector), ``image_preprocess`` (resize and
normalise), ``image_forward`` (image CNN up to its feature vector) and
``fusion_head`` (fuse, classifier, softmax).  Stages a model does not have
report zero.  ``total`` is timed independently around the whole iteration.

Sequential mode runs the stages back to back, so their means add up to the
total.  Parallel mode runs the two branches on two threads; stage times are
then per-thread and their sum may exceed the total.
"""

from __future__ import annotations

import json
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np

from .data import DatasetManifest, read_text
from .embeddings import encode_batch, tokenize
from .errors import ConfigError
from .fusion import FusionModel, fuse
from .model import Model
from .nn.functional import softmax
from .text_model import TextCnn
from .vision import MobileNet, preprocess_image, read_raster

STAGES = ("load", "text_embed", "text_forward", "image_preprocess", "image_forward", "fusion_head")
WARMUP = 3
MIN_ITERATIONS = 10


def hardware_note() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} logical cpus, "
            f"python {platform.python_version()}, numpy {np.__version__}")


@dataclass
class LatencyReport:
    stages: dict[str, dict[str, float]]
    total: dict[str, float]
    iterations: int
    batch_size: int
    warmup: int = WARMUP
    mode: str = "sequential"
    hardware: str = field(default_factory=hardware_note)
    ocr_ms: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def per_sample_ms(self) -> float:
        return self.total["mean"] / self.batch_size

    @property
    def stage_sum_ratio(self) -> float:
        return sum(s["mean"] for s in self.stages.values()) / self.total["mean"]

    def to_dict(self) -> dict:
        return {
            "stages": self.stages, "total": self.total, "per_sample_ms": self.per_sample_ms,
            "stage_sum_ratio": self.stage_sum_ratio, "iterations": self.iterations,
            "batch_size": self.batch_size, "warmup": self.warmup, "mode": self.mode,
            "clock": "time.perf_counter", "hardware": self.hardware, "ocr_ms": self.ocr_ms,
            "config": self.config,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _stats(samples_s: list[float]) -> dict[str, float]:
    ms = np.asarray(samples_s) * 1e3
    return {"mean": float(ms.mean()), "p50": float(np.percentile(ms, 50)), "p95": float(np.percentile(ms, 95))}


class _Pipeline:
    """One batched inference pass through ``model``, stage by stage."""

    def __init__(self, model: Model, manifest: DatasetManifest):
        self.model, self.manifest = model, manifest
        if isinstance(model, FusionModel):
            self.text, self.vision = model.text, model.vision
        else:
            self.text = model if isinstance(model, TextCnn) else None
            self.vision = model if isinstance(model, MobileNet) else None
        if self.text is None and self.vision is None:
            raise ConfigError(f"cannot benchmark a {model.kind} model")

    def run(self, records, parallel: bool, pool: ThreadPoolExecutor | None) -> dict[str, float]:
        t = dict.fromkeys(STAGES, 0.0)
        start = perf_counter()
        texts = rasters = None
        if self.text is not None:
            texts = [read_text(self.manifest.text_path(r)) for r in records]
        if self.vision is not None:
            rasters = [read_raster(self.manifest.image_path(r)) for r in records]
        t["load"] = perf_counter() - start

        if parallel and self.text is not None and self.vision is not None:
            ft = pool.submit(self._text_branch, texts, t)
            fv = pool.submit(self._image_branch, rasters, t)
            feat_t, feat_v = ft.result(), fv.result()
        else:
            feat_t = self._text_branch(texts, t) if self.text is not None else None
            feat_v = self._image_branch(rasters, t) if self.vision is not None else None

        s = perf_counter()
        if isinstance(self.model, FusionModel):
            feat = self.model.classifier.forward(fuse(feat_t, feat_v, self.model.cfg.fusion_kind))
        else:
            feat = feat_t if feat_t is not None else feat_v
        softmax(self.model.head.forward(feat))
        t["fusion_head"] = perf_counter() - s
        return t

    def _text_branch(self, texts, t):
        s = perf_counter()
        batch = encode_batch([tokenize(x) for x in texts], self.text.embedder, self.text.cfg.max_len)
        seq = self.text.embed(batch)
        t["text_embed"] = perf_counter() - s
        s = perf_counter()
        feat = self.text.features(seq)
        t["text_forward"] = perf_counter() - s
        return feat

    def _image_branch(self, rasters, t):
        size = self.vision.cfg.input_size
        s = perf_counter()
        x = np.stack([preprocess_image(r, size).standardized() for r in rasters])
        t["image_preprocess"] = perf_counter() - s
        s = perf_counter()
        feat = self.vision.features(x)
        t["image_forward"] = perf_counter() - s
        return feat


def run_bench(model: Model, manifest: DatasetManifest, iterations: int = 20, batch_size: int = 1,
              parallel: bool = False, ocr_ms: float | None = None, config: dict | None = None) -> LatencyReport:
    """Time ``iterations`` batched passes after ``WARMUP`` untimed ones."""
    if iterations < MIN_ITERATIONS:
        raise ConfigError(f"iterations must be >= {MIN_ITERATIONS}, got {iterations}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if len(manifest) == 0:
        raise ConfigError("benchmark manifest has no records")
    pipe = _Pipeline(model, manifest)
    recs = manifest.records
    per_stage = {s: [] for s in STAGES}
    totals = []
    with ThreadPoolExecutor(max_workers=2) if parallel else nullcontext() as pool:
        for it in range(WARMUP + iterations):
            batch = [recs[(it * batch_size + j) % len(recs)] for j in range(batch_size)]
            start = perf_counter()
            stage_t = pipe.run(batch, parallel, pool)
            elapsed = perf_counter() - start
            if it < WARMUP:
                continue
            totals.append(elapsed)
            for s in STAGES:
                per_stage[s].append(stage_t[s])
    return LatencyReport({s: _stats(v) for s, v in per_stage.items()}, _stats(totals), iterations, batch_size,
                         mode="parallel" if parallel else "sequential", ocr_ms=ocr_ms, config=config or {})


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "LatencyReport",
    "type": "object",
    "required": ["stages", "total", "per_sample_ms", "iterations", "batch_size", "warmup", "mode",
                 "hardware", "ocr_ms"],
    "properties": {
        "stages": {
            "type": "object",
            "required": list(STAGES),
            "additionalProperties": {"$ref": "#/$defs/stat"},
        },
        "total": {"$ref": "#/$defs/stat"},
        "per_sample_ms": {"type": "number", "minimum": 0},
        "stage_sum_ratio": {"type": "number"},
        "iterations": {"type": "integer", "minimum": MIN_ITERATIONS},
        "batch_size": {"type": "integer", "minimum": 1},
        "warmup": {"type": "integer", "minimum": 0},
        "mode": {"enum": ["sequential", "parallel"]},
        "clock": {"type": "string"},
        "hardware": {"type": "string"},
        "ocr_ms": {"type": ["number", "null"]},
        "config": {"type": "object"},
    },
    "$defs": {"stat": {"type": "object", "required": ["mean", "p50", "p95"],
                       "properties": {k: {"type": "number", "minimum": 0} for k in ("mean", "p50", "p95")}}},
}
