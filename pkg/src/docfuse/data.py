"""Dataset manifests, evaluation protocols, sample loading and the synthetic generator.

Manifest format: UTF-8 CSV with header ``id,image,text,label,split``; image
and text paths are relative to the manifest's directory.  Corpora in the
QS-OCR layout (one ``.txt`` per image, same stem) can be indexed with
:func:`manifest_from_layout`.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .embeddings import SubwordEmbedder, sequence_embed, tokenize
from .errors import ConfigError, DataError, FormatError
from .fusion import MultimodalSample
from .nn import child_rng, make_rng
from .vision import encode_pgm, preprocess_image, read_raster

COLUMNS = ("id", "image", "text", "label", "split")
SPLITS = ("train", "val", "test", "unsplit")
IMAGE_SUFFIXES = (".pgm", ".png")


@dataclass(frozen=True)
class Record:
    id: str
    image: str
    text: str
    label: str
    split: str = "unsplit"


@dataclass
class DatasetManifest:
    records: list[Record]
    label_names: list[str]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def label_index(self, label: str) -> int:
        try:
            return self.label_names.index(label)
        except ValueError:
            raise DataError(f"unknown label {label!r}; known labels {self.label_names}") from None

    def labels(self) -> np.ndarray:
        lookup = {name: i for i, name in enumerate(self.label_names)}
        return np.array([lookup[r.label] for r in self.records], dtype=np.int64)

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=np.int64)

    def image_path(self, rec: Record) -> Path:
        return self.root / rec.image

    def text_path(self, rec: Record) -> Path:
        return self.root / rec.text


def parse_manifest(text: str, root=".", label_names: list[str] | None = None,
                   check_files: bool = True, source: str = "<manifest>") -> DatasetManifest:
    """Validate manifest CSV text.  Errors name the offending line."""
    try:
        return _parse_rows(csv.reader(io.StringIO(text)), Path(root), label_names, check_files, source)
    except csv.Error as exc:
        raise DataError(f"{source}: malformed CSV: {exc}") from None


def _parse_rows(reader, root: Path, label_names, check_files: bool, source: str) -> DatasetManifest:
    header = next(reader, None)
    if header is None:
        raise DataError(f"{source}: empty manifest")
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise DataError(f"{source}: line 1: missing column(s) {missing}; expected header {','.join(COLUMNS)}")
    col = {name: header.index(name) for name in COLUMNS}
    records, seen = [], {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{source}: line {line}: expected {len(header)} fields, got {len(row)}")
        rec = Record(*(row[col[c]] for c in COLUMNS))
        if not rec.id:
            raise DataError(f"{source}: line {line}: empty id")
        if rec.id in seen:
            raise DataError(f"{source}: line {line}: duplicate id {rec.id!r} (first on line {seen[rec.id]})")
        seen[rec.id] = line
        if rec.split not in SPLITS:
            raise DataError(f"{source}: line {line}: split {rec.split!r} not in {SPLITS}")
        if label_names is not None and rec.label not in label_names:
            raise DataError(f"{source}: line {line}: unknown label {rec.label!r}")
        if check_files:
            for kind, rel in (("image", rec.image), ("text", rec.text)):
                if not (root / rel).is_file():
                    raise DataError(f"{source}: line {line}: {kind} file not found: {root / rel}")
        records.append(rec)
    names = list(label_names) if label_names is not None else sorted({r.label for r in records})
    return DatasetManifest(records, names, root)


def load_manifest(path, label_names: list[str] | None = None, check_files: bool = True) -> DatasetManifest:
    """Read a manifest; without ``label_names`` the classes are the sorted distinct labels."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"manifest {path} is not UTF-8 (byte {exc.start})") from None
    return parse_manifest(text, path.parent, label_names, check_files, source=str(path))


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    try:
        for r in manifest.records:
            writer.writerow([r.id, r.image, r.text, r.label, r.split])
    except csv.Error as exc:
        raise DataError(f"record cannot be written as CSV: {exc}") from None
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_manifest(manifest), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write manifest {path}: {exc.strerror}") from None


def manifest_from_layout(image_root, text_root, out_path, split: str = "unsplit") -> DatasetManifest:
    """Index ``<image_root>/<label>/<stem>.{pgm,png}`` paired with ``<text_root>/<label>/<stem>.txt``."""
    image_root, text_root, out_path = Path(image_root), Path(text_root), Path(out_path)
    if not image_root.is_dir():
        raise DataError(f"image directory not found: {image_root}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base = out_path.parent.resolve()
    records = []
    for label_dir in sorted(p for p in image_root.iterdir() if p.is_dir()):
        for img in sorted(label_dir.iterdir()):
            if img.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            txt = text_root / label_dir.name / (img.stem + ".txt")
            if not txt.is_file():
                raise DataError(f"no OCR text for {img} (expected {txt})")
            records.append(Record(f"{label_dir.name}/{img.stem}", _relpath(img, base), _relpath(txt, base),
                                  label_dir.name, split))
    if not records:
        raise DataError(f"no images found under {image_root}")
    manifest = DatasetManifest(records, sorted({r.label for r in records}), base)
    write_manifest(manifest, out_path)
    return manifest


def _relpath(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p.resolve(), base)).as_posix()


# -- protocols ---------------------------------------------------------------

@dataclass
class ProtocolSpec:
    kind: str = "tobacco_kfold"
    train_size: int = 800
    runs: int = 3
    sizes: tuple[int, int, int] = (320_000, 40_000, 40_000)

    def __post_init__(self):
        if self.kind not in ("tobacco_kfold", "rvl_fixed", "custom"):
            raise ConfigError(f"unknown protocol {self.kind!r}")
        if self.runs < 1 or self.train_size < 1:
            raise ConfigError("protocol needs runs >= 1 and train_size >= 1")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_quota(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportional to ``counts``."""
    exact = counts * total / counts.sum()
    quota = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:total - quota.sum()]] += 1
    return np.minimum(quota, counts)


def kfold_splits(labels, num_classes: int, train_size: int = 800, runs: int = 3,
                 rng: np.random.Generator | None = None) -> list[Split]:
    """Independent stratified draws of ``train_size`` training samples; the rest is test."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = rng if rng is not None else make_rng(0)
    if train_size > len(labels):
        raise DataError(f"train_size {train_size} exceeds corpus size {len(labels)}")
    counts = np.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        raise DataError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    quota = stratified_quota(counts, train_size)
    out = []
    for _ in range(runs):
        run_rng = child_rng(rng)
        chosen = [run_rng.choice(np.flatnonzero(labels == c), size=q, replace=False)
                  for c, q in enumerate(quota)]
        train = np.sort(np.concatenate(chosen))
        test = np.setdiff1d(np.arange(len(labels)), train)
        out.append(Split(train, np.array([], dtype=np.int64), test))
    return out


def protocol_splits(manifest: DatasetManifest, spec: ProtocolSpec,
                    rng: np.random.Generator | None = None) -> list[Split]:
    if spec.kind == "tobacco_kfold":
        return kfold_splits(manifest.labels(), len(manifest.label_names), spec.train_size, spec.runs, rng)
    split = Split(*(manifest.split_indices(s) for s in ("train", "val", "test")))
    if spec.kind == "rvl_fixed":
        for name, have, want in zip(("train", "val", "test"), (split.train, split.val, split.test), spec.sizes):
            if len(have) > want:
                raise DataError(f"{name} split has {len(have)} samples, protocol allows {want}")
    if len(split.train) == 0:
        raise DataError("manifest has no records with split=train")
    return [split]


# -- sample loading ----------------------------------------------------------

def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataError(f"cannot read text {path}: {exc.strerror}") from None


def load_sample(manifest: DatasetManifest, rec: Record, embedder: SubwordEmbedder,
                image_size: int, max_len: int = 500) -> MultimodalSample:
    """Read, tokenize and embed the text; read and preprocess the raster."""
    tokens = tokenize(read_text(manifest.text_path(rec)))
    seq = sequence_embed(tokens, embedder, max_len)
    try:
        raster = read_raster(manifest.image_path(rec))
    except FormatError as exc:
        raise DataError(str(exc)) from None
    return MultimodalSample(preprocess_image(raster, image_size), seq, manifest.label_index(rec.label))


def load_texts(manifest: DatasetManifest, indices) -> list[list[str]]:
    return [tokenize(read_text(manifest.text_path(manifest.records[i]))) for i in indices]


def load_images(manifest: DatasetManifest, indices, image_size: int) -> np.ndarray:
    """Standardized ``(N, 3, S, S)`` float32 batch."""
    images = []
    for i in indices:
        path = manifest.image_path(manifest.records[i])
        try:
            raster = read_raster(path)
        except FormatError as exc:
            raise DataError(str(exc)) from None
        images.append(preprocess_image(raster, image_size).standardized())
    if not images:
        return np.zeros((0, 3, image_size, image_size), np.float32)
    return np.stack(images)


def load_arrays(manifest: DatasetManifest, indices, image_size: int) -> tuple[list[list[str]], np.ndarray, np.ndarray]:
    """Token lists, standardized image batch and label indices for training."""
    indices = np.asarray(indices, dtype=np.int64)
    return (load_texts(manifest, indices), load_images(manifest, indices, image_size),
            manifest.labels()[indices])


# -- synthetic multimodal corpus ---------------------------------------------

PATTERNS = ("stripes", "checker", "blobs")
SYNTH_MODES = ("joint", "text", "image", "both")


def filler_words() -> list[str]:
    text = resources.files("docfuse").joinpath("resources/filler_words.txt").read_text(encoding="utf-8")
    return text.split()


@dataclass
class SynthConfig:
    """Generator settings.

    In ``joint`` mode the class is the (keyword, pattern) pair, so each
    modality alone pins the label down only to ``len(patterns)`` resp.
    ``len(keywords)`` candidates.  ``text``/``image`` modes make one modality
    carry the label alone; ``both`` makes them redundant.
    """

    num_samples: int = 200
    keywords: tuple[str, ...] = ("invoice", "letter")
    patterns: tuple[str, ...] = ("stripes", "checker")
    mode: str = "joint"
    image_size: int = 32
    doc_length: tuple[int, int] = (10, 30)
    keyword_repeats: tuple[int, int] = (2, 4)
    misspell_rate: float = 0.05
    pixel_noise: float = 0.15
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.keywords, self.patterns = tuple(self.keywords), tuple(self.patterns)
        self.doc_length, self.keyword_repeats = tuple(self.doc_length), tuple(self.keyword_repeats)
        if self.mode not in SYNTH_MODES:
            raise ConfigError(f"unknown synth mode {self.mode!r}; expected one of {SYNTH_MODES}")
        bad = [p for p in self.patterns if p not in PATTERNS]
        if bad:
            raise ConfigError(f"unknown patterns {bad}; expected a subset of {PATTERNS}")
        if len(set(self.keywords)) != len(self.keywords) or len(set(self.patterns)) != len(self.patterns):
            raise ConfigError("keywords and patterns must be distinct")
        if self.mode in ("both",) and len(self.keywords) != len(self.patterns):
            raise ConfigError("'both' mode pairs keywords with patterns one to one")
        if self.num_samples < self.num_classes:
            raise ConfigError(f"{self.num_samples} samples cannot cover {self.num_classes} classes")
        if self.image_size < 8 or not 0 <= self.test_fraction < 1:
            raise ConfigError("image_size must be >= 8 and test_fraction in [0, 1)")
        if not (1 <= self.doc_length[0] <= self.doc_length[1]):
            raise ConfigError(f"invalid doc_length {self.doc_length}")

    @property
    def num_classes(self) -> int:
        if self.mode == "joint":
            return len(self.keywords) * len(self.patterns)
        return len(self.patterns) if self.mode == "image" else len(self.keywords)

    def label_table(self) -> list[tuple[int | None, int | None]]:
        """Class index -> (keyword index, pattern index); ``None`` means drawn at random."""
        if self.mode == "joint":
            return [(k, p) for k in range(len(self.keywords)) for p in range(len(self.patterns))]
        if self.mode == "text":
            return [(k, None) for k in range(len(self.keywords))]
        if self.mode == "image":
            return [(None, p) for p in range(len(self.patterns))]
        return [(k, k) for k in range(len(self.keywords))]

    def label_names(self) -> list[str]:
        names = []
        for k, p in self.label_table():
            parts = [self.keywords[k] if k is not None else None, self.patterns[p] if p is not None else None]
            names.append("+".join(x for x in parts if x))
        return names


def misspell(word: str, rng: np.random.Generator) -> str:
    """One random character edit: swap, duplicate, drop or substitute."""
    if len(word) < 2:
        return word
    i = int(rng.integers(len(word) - 1))
    op = int(rng.integers(4))
    if op == 0:
        return word[:i] + word[i + 1] + word[i] + word[i + 2:]
    if op == 1:
        return word[:i] + word[i] + word[i:]
    if op == 2:
        return word[:i] + word[i + 1:]
    return word[:i] + chr(ord("a") + int(rng.integers(26))) + word[i + 1:]


def synth_text(keyword: str, cfg: SynthConfig, words: list[str], rng: np.random.Generator) -> str:
    n = int(rng.integers(cfg.doc_length[0], cfg.doc_length[1] + 1))
    tokens = [words[i] for i in rng.integers(len(words), size=n)]
    for _ in range(int(rng.integers(cfg.keyword_repeats[0], cfg.keyword_repeats[1] + 1))):
        tokens.insert(int(rng.integers(len(tokens) + 1)), keyword)
    tokens = [misspell(t, rng) if rng.random() < cfg.misspell_rate else t for t in tokens]
    return " ".join(tokens) + "\n"


def synth_image(pattern: str, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Grayscale uint8 raster showing ``pattern`` with random phase, scale and contrast."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(size / 8, size / 4)
    phase_y, phase_x = rng.uniform(0, period, size=2)
    if pattern == "stripes":
        base = (np.floor((yy + phase_y) / (period / 2)) % 2).astype(np.float64)
    elif pattern == "checker":
        base = ((np.floor((yy + phase_y) / (period / 2)) + np.floor((xx + phase_x) / (period / 2))) % 2)
    elif pattern == "blobs":
        base = np.zeros((size, size))
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 10, size / 5)
            base = np.maximum(base, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    else:
        raise ConfigError(f"unknown pattern {pattern!r}")
    lo, hi = sorted(rng.uniform(0.1, 0.9, size=2))
    hi = max(hi, lo + 0.3)
    img = lo + (hi - lo) * base + rng.normal(0, noise, size=base.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    config: SynthConfig
    keyword_of: list[int]
    pattern_of: list[int]


def generate_synthetic(cfg: SynthConfig, out_dir) -> SyntheticDataset:
    """Write ``images/*.pgm``, ``texts/*.txt`` and ``manifest.csv`` under ``out_dir``.

    Classes are balanced (largest remainder) and each class is split into
    train/test by ``test_fraction``.  Output is byte-identical for a seed.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "texts").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc.strerror}") from None
    rng = make_rng(cfg.seed)
    words = filler_words()
    table, names = cfg.label_table(), cfg.label_names()
    k = cfg.num_classes
    per_class = stratified_quota(np.ones(k, dtype=np.int64) * cfg.num_samples, cfg.num_samples)
    labels = np.repeat(np.arange(k), per_class)
    splits = np.empty(cfg.num_samples, dtype=object)
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        n_test = int(round(len(idx) * cfg.test_fraction))
        splits[idx] = ["train"] * (len(idx) - n_test) + ["test"] * n_test
    order = rng.permutation(cfg.num_samples)
    labels, splits = labels[order], splits[order]

    records, keyword_of, pattern_of = [], [], []
    width = max(5, len(str(cfg.num_samples - 1)))
    for i, (label, split) in enumerate(zip(labels, splits)):
        kw, pat = table[label]
        kw = int(rng.integers(len(cfg.keywords))) if kw is None else kw
        pat = int(rng.integers(len(cfg.patterns))) if pat is None else pat
        sid = f"s{i:0{width}d}"
        text = synth_text(cfg.keywords[kw], cfg, words, rng)
        raster = synth_image(cfg.patterns[pat], cfg.image_size, cfg.pixel_noise, rng)
        try:
            (out / "texts" / f"{sid}.txt").write_text(text, encoding="utf-8")
            (out / "images" / f"{sid}.pgm").write_bytes(encode_pgm(raster))
        except OSError as exc:
            raise DataError(f"cannot write sample {sid} under {out}: {exc.strerror}") from None
        records.append(Record(sid, f"images/{sid}.pgm", f"texts/{sid}.txt", names[label], str(split)))
        keyword_of.append(kw)
        pattern_of.append(pat)
    # sorted names so a reloaded manifest assigns the same class indices
    manifest = DatasetManifest(records, sorted(names), out)
    write_manifest(manifest, out / "manifest.csv")
    return SyntheticDataset(manifest, cfg, keyword_of, pattern_of)
