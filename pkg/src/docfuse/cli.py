"""``docfuse`` command line: train, eval, predict, bench, synth.

Machine-readable results go to files or standard output, diagnostics to
standard error.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import MODALITIES, RunConfig, load_config
from .data import (
    SynthConfig, generate_synthetic, load_images, load_manifest, load_texts, read_text,
)
from .embeddings import encode_batch, tokenize
from .errors import ConfigError, DataError, DocfuseError
from .fusion import FusionModel, fusion_data, train_fusion
from .metrics import evaluate
from .model import Model, load_model, predict_logits
from .nn import make_rng
from .nn.functional import softmax
from .text_model import TextCnn, train_text
from .training import ArrayData, TextData, write_history
from .vision import MobileNet, preprocess_image, read_raster, train_vision

log = logging.getLogger("docfuse")

KEYWORD_POOL = ("invoice", "letter", "memo", "report", "email", "resume", "budget", "news")
PATTERN_POOL = ("stripes", "checker", "blobs")


def _modality_of(model: Model) -> str:
    return {FusionModel: "fusion", TextCnn: "text", MobileNet: "image"}[type(model)]


def _model_inputs(model: Model, manifest, indices):
    """Dataset object matching what ``model`` consumes."""
    kind = _modality_of(model)
    if kind == "text":
        return TextData(load_texts(manifest, indices), model.embedder, model.cfg.max_len)
    if kind == "image":
        return ArrayData(load_images(manifest, indices, model.cfg.input_size))
    return fusion_data(load_texts(manifest, indices), load_images(manifest, indices, model.cfg.vision.input_size),
                       model)


def _split_or_all(manifest, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(len(manifest))
    idx = manifest.split_indices(split)
    if len(idx) == 0:
        raise DataError(f"manifest has no records with split={split}")
    return idx


def _parse_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = _parse_sets(args.set)
    for key in ("seed", "modality", "epochs"):
        if getattr(args, key) is not None:
            overrides[key] = str(getattr(args, key))
    cfg = load_config(args.config, overrides)
    manifest = load_manifest(args.manifest)
    names, k = manifest.label_names, len(manifest.label_names)
    train_idx = manifest.split_indices("train")
    if len(train_idx) == 0:
        train_idx = manifest.split_indices("unsplit")
    if len(train_idx) == 0:
        raise DataError("manifest has no train or unsplit records to train on")
    val_idx = manifest.split_indices("val")
    labels = manifest.labels()
    rng, hyper = make_rng(cfg.seed), cfg.hyper()
    log.info("training %s on %d samples (%d classes), %d epochs", cfg.modality, len(train_idx), k, hyper.epochs)

    if cfg.modality == "text":
        tcfg = cfg.text_config(k)
        val = (load_texts(manifest, val_idx), labels[val_idx]) if len(val_idx) else None
        model, history = train_text(load_texts(manifest, train_idx), labels[train_idx], tcfg, hyper, rng, val=val)
    elif cfg.modality == "image":
        vcfg = cfg.vision_config(k)
        val = (load_images(manifest, val_idx, vcfg.input_size), labels[val_idx]) if len(val_idx) else None
        model, history = train_vision(load_images(manifest, train_idx, vcfg.input_size), labels[train_idx],
                                      vcfg, hyper, rng, val=val)
    else:
        fcfg = cfg.fusion_config(k)
        size = fcfg.vision.input_size
        pretrained = None
        if cfg.fusion_init == "from_pretrained_branches":
            if not (args.pretrained_text or args.pretrained_image):
                raise ConfigError("fusion_init=from_pretrained_branches needs --pretrained-text/--pretrained-image")
            pretrained = (load_model(args.pretrained_text)[0] if args.pretrained_text else None,
                          load_model(args.pretrained_image)[0] if args.pretrained_image else None)
        val = None
        if len(val_idx):
            val = (load_texts(manifest, val_idx), load_images(manifest, val_idx, size), labels[val_idx])
        model, history = train_fusion(load_texts(manifest, train_idx), load_images(manifest, train_idx, size),
                                      labels[train_idx], fcfg, hyper, rng, init=cfg.fusion_init,
                                      pretrained=pretrained, val=val)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt", extra={"run": cfg.as_dict(), "seed": cfg.seed, "label_names": names,
                                          "modality": cfg.modality})
    write_history(history, out / "history.jsonl")
    (out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
    summary = {"checkpoint": str(out / "model.ckpt"), "history": str(out / "history.jsonl"),
               "epochs": len(history), "final_loss": history[-1]["loss"], "train_acc": history[-1]["train_acc"]}
    print(json.dumps(summary))
    return 0


def _load_labelled(path: str):
    model, conf = load_model(path)
    if "label_names" not in conf:
        raise DataError(f"{path}: checkpoint carries no label names")
    return model, conf


def cmd_eval(args) -> int:
    model, conf = _load_labelled(args.model)
    names = conf["label_names"]
    manifest = load_manifest(args.manifest)
    unknown = sorted(set(manifest.label_names) - set(names))
    if unknown:
        raise DataError(f"label sets differ: manifest {manifest.label_names} vs checkpoint {names}")
    manifest.label_names = list(names)
    idx = _split_or_all(manifest, args.split)
    labels = manifest.labels()[idx]
    preds = predict_logits(model, _model_inputs(model, manifest, idx)).argmax(axis=1)
    preds2, provenance = None, {"model": args.model, "run": conf.get("run"), "seed": conf.get("seed"),
                                "split": args.split, "manifest": args.manifest}
    if args.model2:
        model2, conf2 = _load_labelled(args.model2)
        if conf2["label_names"] != names:
            raise DataError(f"label sets differ: {args.model} {names} vs {args.model2} {conf2['label_names']}")
        preds2 = predict_logits(model2, _model_inputs(model2, manifest, idx)).argmax(axis=1)
        provenance.update(model2=args.model2, run2=conf2.get("run"), seed2=conf2.get("seed"))
    report = evaluate(preds, labels, names, preds2)
    if preds2 is not None:
        report.extra["second_overall_accuracy"] = float(np.mean(preds2 == labels))
    report.extra["provenance"] = provenance
    report.write(args.report)
    if args.confusion:
        Path(args.confusion).write_text(report.confusion_csv(), encoding="utf-8")
    sys.stderr.write(report.f1_table())
    print(json.dumps({"overall_accuracy": report.overall_accuracy, "macro_f1": report.macro_f1,
                      "oracle_accuracy": report.oracle_accuracy, "report": args.report}))
    return 0


def cmd_predict(args) -> int:
    model, conf = _load_labelled(args.model)
    kind = _modality_of(model)
    text = image = None
    if kind in ("text", "fusion"):
        if args.text is None and not args.no_text:
            raise DataError(f"{kind} model needs --text; pass --no-text to use an all-zero text sequence")
        tokens = tokenize(read_text(args.text)) if args.text else []
        tm = model.text if kind == "fusion" else model
        text = encode_batch([tokens], tm.embedder, tm.cfg.max_len)
    if kind in ("image", "fusion"):
        if args.image is None:
            raise DataError(f"{kind} model needs --image")
        size = model.cfg.vision.input_size if kind == "fusion" else model.cfg.input_size
        image = preprocess_image(read_raster(args.image), size).standardized()[None]
    x = {"text": text, "image": image, "fusion": (text, image)}[kind]
    probs = softmax(model.forward(x).astype(np.float64))[0]
    names = conf["label_names"]
    print(json.dumps({"label": names[int(probs.argmax())],
                      "probabilities": {n: float(p) for n, p in zip(names, probs)}}))
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench

    model, conf = load_model(args.model)
    manifest = load_manifest(args.manifest)
    report = run_bench(model, manifest, args.iterations, args.batch, parallel=args.parallel, ocr_ms=args.ocr_ms,
                       config={"model": args.model, "run": conf.get("run"), "seed": conf.get("seed")})
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        sys.stderr.write(f"total mean {report.total['mean']:.1f} ms per batch of {args.batch}, "
                         f"{report.per_sample_ms:.1f} ms per sample\n")
    else:
        sys.stdout.write(text)
    return 0


def synth_config(n: int, classes: int, seed: int, mode: str = "joint", image_size: int = 32,
                 test_fraction: float = 0.2) -> SynthConfig:
    """Pick keywords and patterns so that ``mode`` yields ``classes`` classes."""
    if mode == "joint":
        patterns = next((p for p in (2, 3) if classes % p == 0 and classes // p >= 2), None)
        if patterns is None or classes // patterns > len(KEYWORD_POOL):
            raise ConfigError(f"joint mode needs classes = keywords x patterns (2 or 3 patterns), got {classes}")
        kw, pat = KEYWORD_POOL[:classes // patterns], PATTERN_POOL[:patterns]
    elif mode == "image":
        if not 2 <= classes <= len(PATTERN_POOL):
            raise ConfigError(f"image mode supports 2..{len(PATTERN_POOL)} classes, got {classes}")
        kw, pat = KEYWORD_POOL[:2], PATTERN_POOL[:classes]
    else:
        limit = len(PATTERN_POOL) if mode == "both" else len(KEYWORD_POOL)
        if not 2 <= classes <= limit:
            raise ConfigError(f"{mode} mode supports 2..{limit} classes, got {classes}")
        kw = KEYWORD_POOL[:classes]
        pat = PATTERN_POOL[:classes] if mode == "both" else PATTERN_POOL[:2]
    return SynthConfig(num_samples=n, keywords=kw, patterns=pat, mode=mode, image_size=image_size,
                       test_fraction=test_fraction, seed=seed)


def cmd_synth(args) -> int:
    cfg = synth_config(args.n, args.classes, args.seed, args.mode, args.image_size, args.test_fraction)
    ds = generate_synthetic(cfg, args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.csv"), "samples": len(ds.manifest),
                      "classes": ds.manifest.label_names}))
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="docfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a text, image or fusion classifier")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="key = value file (default: $DOCFUSE_CONFIG)")
    t.add_argument("--modality", choices=MODALITIES)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--pretrained-text", help="text checkpoint for fusion_init=from_pretrained_branches")
    t.add_argument("--pretrained-image", help="image checkpoint for fusion_init=from_pretrained_branches")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    e.add_argument("--model", required=True)
    e.add_argument("--model2", help="second single-modality checkpoint; adds the oracle accuracy")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "unsplit", "all"))
    e.add_argument("--report", required=True, help="JSON report path")
    e.add_argument("--confusion", help="optional confusion matrix CSV path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="classify one document")
    r.add_argument("--model", required=True)
    r.add_argument("--image")
    r.add_argument("--text")
    r.add_argument("--no-text", action="store_true", help="treat the text as empty (all-zero sequence)")
    r.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="per-stage inference latency")
    b.add_argument("--model", required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--iterations", type=int, default=20)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--parallel", action="store_true", help="run the two branches on two threads")
    b.add_argument("--ocr-ms", type=float, help="external OCR time to record alongside")
    b.add_argument("--out", help="JSON report path (default: standard output)")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("joint", "text", "image", "both"), default="joint")
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"docfuse {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DocfuseError, OSError) as exc:
        print(f"docfuse {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
