"""Tokenization and OOV-robust word and document embeddings.

Words are embedded as the mean of hashed character n-gram vectors, so any
string, including OCR garbage never seen before, gets a vector, and
misspellings land close to their source word because they share most n-grams.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .nn.init import make_rng
from .nn.layers import Layer

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# Letters and digits of any script; everything else (whitespace, punctuation,
# symbols, underscore) is a boundary.
_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str | bytes) -> list[str]:
    """Split on whitespace and punctuation, dropping punctuation; case is kept.

    >>> tokenize("Dear Sir,")
    ['Dear', 'Sir']
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"invalid UTF-8 at byte offset {exc.start}: {exc.reason}") from None
    return _TOKEN_RE.findall(text)


def fnv1a_64(data: bytes, seed: int = 0) -> int:
    """64-bit FNV-1a over the seed's 8 little-endian bytes followed by ``data``."""
    h = FNV_OFFSET
    for byte in (seed & _MASK64).to_bytes(8, "little") + data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def char_ngrams(token: str, n_min: int = 3, n_max: int = 6) -> list[str]:
    """N-grams of ``"<" + token + ">"`` ordered by n then position, plus the full form.

    An n-gram identical to the full boundary-marked form is emitted only once,
    as the final element.
    """
    if n_min > n_max or n_min < 1:
        raise ConfigError(f"need 1 <= n_min <= n_max, got [{n_min}, {n_max}]")
    marked = f"<{token}>"
    grams = [
        marked[i:i + n]
        for n in range(n_min, n_max + 1)
        for i in range(len(marked) - n + 1)
        if n != len(marked)
    ]
    grams.append(marked)
    return grams


class SubwordEmbedder:
    """Hashed character-n-gram bucket table.

    ``table`` has shape ``(num_buckets, dim)``.  The n-gram bucket ids of every
    token are memoized; the table itself may be updated in place by training.
    """

    def __init__(self, table: np.ndarray, n_min: int = 3, n_max: int = 6, hash_seed: int = 0):
        if table.ndim != 2 or table.shape[0] < 1 or table.shape[1] < 1:
            raise DimensionError(f"bucket table must be (num_buckets, dim), got {table.shape}")
        if not 1 <= n_min <= n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got [{n_min}, {n_max}]")
        self.table = table
        self.n_min, self.n_max, self.hash_seed = n_min, n_max, hash_seed
        self._ids: dict[str, np.ndarray] = {}

    @classmethod
    def random(cls, dim: int = 32, num_buckets: int = 50_000, seed: int = 0, n_min: int = 3,
               n_max: int = 6, hash_seed: int = 0, dtype=np.float32) -> "SubwordEmbedder":
        """Table drawn from ``normal(0, 1/sqrt(dim))`` so a single n-gram has ~unit norm."""
        rng = make_rng(seed)
        table = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_buckets, dim)).astype(dtype)
        return cls(table, n_min, n_max, hash_seed)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def num_buckets(self) -> int:
        return self.table.shape[0]

    def settings(self) -> dict:
        return {"dim": self.dim, "num_buckets": self.num_buckets, "n_min": self.n_min,
                "n_max": self.n_max, "hash_seed": self.hash_seed}

    def ngram_ids(self, token: str) -> np.ndarray:
        ids = self._ids.get(token)
        if ids is None:
            if not token:
                raise DataError("cannot embed an empty token")
            ids = np.array(
                [fnv1a_64(g.encode("utf-8"), self.hash_seed) % self.num_buckets
                 for g in char_ngrams(token, self.n_min, self.n_max)],
                dtype=np.int64,
            )
            self._ids[token] = ids
        return ids

    def embed(self, token: str) -> np.ndarray:
        return self.table[self.ngram_ids(token)].mean(axis=0)


def embed_word(embedder: SubwordEmbedder, token: str) -> np.ndarray:
    return embedder.embed(token)


def deterministic_oov_vector(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit-norm Gaussian vector whose generator is seeded by ``fnv1a(token, seed)``."""
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    v = make_rng(fnv1a_64(token.encode("utf-8"), seed)).standard_normal(dim)
    return v / np.linalg.norm(v)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


# -- corpus statistics -------------------------------------------------------

class FrequencyTable:
    """Token counts over a corpus; ``probability`` is 0 for unseen tokens."""

    def __init__(self, counts: Counter | None = None):
        self.counts: Counter = Counter(counts or {})

    @classmethod
    def from_documents(cls, docs: Iterable[Sequence[str]]) -> "FrequencyTable":
        table = cls()
        for doc in docs:
            table.counts.update(doc)
        return table

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def probability(self, token: str) -> float:
        total = self.total
        return self.counts.get(token, 0) / total if total else 0.0

    def merge(self, other: "FrequencyTable") -> "FrequencyTable":
        return FrequencyTable(self.counts + other.counts)

    def to_tsv(self, path) -> None:
        lines = [f"{tok}\t{n}\n" for tok, n in sorted(self.counts.items())]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def from_tsv(cls, path) -> "FrequencyTable":
        counts = Counter()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, sep, n = line.rpartition("\t")
            if not sep or not n.isdigit():
                raise DataError(f"{path}:{lineno}: expected 'token<TAB>count'")
            counts[tok] = int(n)
        return cls(counts)


def load_dictionary(path) -> set[str]:
    """One token per line, UTF-8."""
    return {line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()}


def oov_rate(tokens: Iterable[str], dictionary: set[str], min_chars: int = 4) -> float:
    """Fraction of tokens with at least ``min_chars`` characters missing from ``dictionary``."""
    eligible = [t for t in tokens if len(t) >= min_chars]
    if not eligible:
        return 0.0
    return sum(t not in dictionary for t in eligible) / len(eligible)


# -- document embeddings -----------------------------------------------------

@dataclass
class DocumentEmbedding:
    vector: np.ndarray
    empty: bool = False


def first_principal_component(X: np.ndarray, tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Leading right singular vector of ``X`` (uncentered) by power iteration."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if not np.any(norms > 0):
        raise DataError("cannot compute a principal component of an all-zero matrix")
    u = X[int(norms.argmax())] / norms.max()
    for _ in range(max_iter):
        nxt = X.T @ (X @ u)
        n = np.linalg.norm(nxt)
        if n == 0:
            break
        nxt /= n
        done = np.linalg.norm(nxt - u) < tol
        u = nxt
        if done:
            break
    u /= np.linalg.norm(u)
    # sign convention: largest-magnitude coordinate positive
    return u if u[np.abs(u).argmax()] >= 0 else -u


class SifEncoder:
    """Smooth-inverse-frequency averaging followed by first-PC removal.

    ``fit`` estimates the principal component on a corpus (usually the
    training split); ``transform`` reuses it for any documents.
    """

    def __init__(self, embedder: SubwordEmbedder, freqs: FrequencyTable, a: float = 1e-3):
        if a <= 0:
            raise ConfigError(f"SIF parameter a must be > 0, got {a}")
        self.embedder, self.freqs, self.a = embedder, freqs, a
        self.component: np.ndarray | None = None

    def weight(self, token: str) -> float:
        return self.a / (self.a + self.freqs.probability(token))

    def average(self, tokens: Sequence[str]) -> np.ndarray | None:
        if not tokens:
            return None
        acc = np.zeros(self.embedder.dim)
        for tok in tokens:
            acc += self.weight(tok) * self.embedder.embed(tok)
        return acc / len(tokens)

    def fit(self, docs: Sequence[Sequence[str]]) -> "SifEncoder":
        rows = [v for v in map(self.average, docs) if v is not None]
        if not rows:
            raise DataError("SIF needs at least one non-empty document")
        self.component = first_principal_component(np.stack(rows))
        return self

    def transform(self, docs: Sequence[Sequence[str]]) -> list[DocumentEmbedding]:
        if self.component is None:
            raise ConfigError("SifEncoder.transform called before fit")
        u = self.component
        out = []
        for doc in docs:
            v = self.average(doc)
            if v is None:
                warnings.warn("empty document embedded as the zero vector", stacklevel=2)
                out.append(DocumentEmbedding(np.zeros(self.embedder.dim), empty=True))
            else:
                out.append(DocumentEmbedding(v - (u @ v) * u))
        return out


def sif_embed(docs: Sequence[Sequence[str]], embedder: SubwordEmbedder, freqs: FrequencyTable,
              a: float = 1e-3) -> list[DocumentEmbedding]:
    enc = SifEncoder(embedder, freqs, a).fit(docs)
    return enc.transform(docs)


# -- word sequences ----------------------------------------------------------

@dataclass
class WordSequence:
    """Column-wise word vectors, zero beyond ``true_length``."""

    matrix: np.ndarray
    true_length: int
    empty: bool = field(default=False)


def sequence_embed(tokens: Sequence[str], embedder: SubwordEmbedder, max_len: int = 500) -> WordSequence:
    n = min(len(tokens), max_len)
    matrix = np.zeros((embedder.dim, max_len), dtype=embedder.table.dtype)
    for t in range(n):
        matrix[:, t] = embedder.embed(tokens[t])
    return WordSequence(matrix, n, empty=n == 0)


@dataclass
class TokenBatch:
    """A batch of documents encoded for :class:`SubwordEmbedding`.

    ``word_index[b, t]`` points into the batch's distinct words (``-1`` for
    padding).  ``gram_ids``/``gram_rows``/``gram_weights`` list every
    (bucket, word, 1/n_grams) triple of those words.
    """

    word_index: np.ndarray
    gram_ids: np.ndarray
    gram_rows: np.ndarray
    gram_weights: np.ndarray
    num_words: int
    lengths: np.ndarray

    def __len__(self):
        return self.word_index.shape[0]


def encode_batch(docs: Sequence[Sequence[str]], embedder: SubwordEmbedder, max_len: int = 500) -> TokenBatch:
    vocab: dict[str, int] = {}
    word_index = np.full((len(docs), max_len), -1, dtype=np.int64)
    lengths = np.zeros(len(docs), dtype=np.int64)
    for b, doc in enumerate(docs):
        doc = doc[:max_len]
        lengths[b] = len(doc)
        for t, tok in enumerate(doc):
            word_index[b, t] = vocab.setdefault(tok, len(vocab))
    ids, rows, weights = [], [], []
    for tok, row in vocab.items():
        g = embedder.ngram_ids(tok)
        ids.append(g)
        rows.append(np.full(len(g), row, dtype=np.int64))
        weights.append(np.full(len(g), 1.0 / len(g)))
    cat = (lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dtype=dt))
    return TokenBatch(word_index, cat(ids, np.int64), cat(rows, np.int64),
                      cat(weights, np.float64).astype(embedder.table.dtype), len(vocab), lengths)


class SubwordEmbedding(Layer):
    """Trainable front end mapping a :class:`TokenBatch` to ``(B, dim, max_len)``.

    The bucket table is shared with the embedder, so optimizer updates are
    visible to every later ``embedder.embed`` call.
    """

    kind = "subwordembedding"

    def __init__(self, embedder: SubwordEmbedder, max_len: int = 500):
        super().__init__()
        self.embedder = embedder
        self.max_len = max_len
        self.params["table"] = embedder.table
        self.grads["table"] = np.zeros_like(embedder.table)

    @property
    def trainable(self) -> bool:
        return "table" in self.params

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        # a frozen table is reported as a buffer so optimizers skip it
        table = self.embedder.table
        self.params.pop("table", None)
        self.grads.pop("table", None)
        self.buffers.pop("table", None)
        if flag:
            self.params["table"] = table
            self.grads["table"] = np.zeros_like(table)
        else:
            self.buffers["table"] = table

    def build(self, in_shape=None, rng=None, dtype=np.float32):
        return (self.embedder.dim, self.max_len)

    def forward(self, batch: TokenBatch, training=False, rng=None):
        table = self.embedder.table
        words = np.zeros((batch.num_words + 1, table.shape[1]), dtype=table.dtype)
        np.add.at(words, batch.gram_rows, table[batch.gram_ids] * batch.gram_weights[:, None])
        # row num_words stays zero and serves the padding index -1
        out = words[batch.word_index]
        self._cache = batch
        return np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(self, dout):
        batch = self._cache
        table = self.embedder.table
        dwords = np.zeros((batch.num_words + 1, table.shape[1]), dtype=dout.dtype)
        np.add.at(dwords, batch.word_index.reshape(-1), dout.transpose(0, 2, 1).reshape(-1, table.shape[1]))
        grad = np.zeros_like(table)
        np.add.at(grad, batch.gram_ids, dwords[batch.gram_rows] * batch.gram_weights[:, None])
        self.grads["table"] = grad
        return None
