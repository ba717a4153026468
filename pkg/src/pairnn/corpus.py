"""Tokenization, vocabularies and skip-gram word2vec with negative sampling.

The word vectors serve two purposes: they initialise the keyword / word
embedding tables of both towers, and they are the embedding source of the
keyword-similarity baseline retriever.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor

logger = logging.getLogger(__name__)

OOV_TOKEN = "<oov>"
VECTORS_FORMAT = "pairnn.wordvectors"
VECTORS_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id mapping. Id 0 is reserved for out-of-vocabulary tokens."""

    def __init__(self, tokens: Sequence[str], counts: Sequence[int], min_count: int = 1):
        if len(tokens) != len(counts):
            raise ValueError("tokens and counts must have equal length")
        self.id_to_token = [OOV_TOKEN, *tokens]
        self.counts = [0, *(int(c) for c in counts)]
        self.min_count = min_count
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token) if i > 0}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        """Number of ids, including the OOV id."""
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.counts == other.counts
        )

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, 0)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, 0) for t in tokens]

    @property
    def tokens(self) -> list[str]:
        return self.id_to_token[1:]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for token, count in zip(self.id_to_token, self.counts):
            h.update(f"{token}\t{count}\n".encode())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        lines = [f"{t}\t{c}\n" for t, c in zip(self.tokens, self.counts[1:])]
        Path(path).write_text(f"# min_count={self.min_count}\n" + "".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts, min_count = [], [], 1
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("# min_count="):
                min_count = int(line.split("=", 1)[1])
                continue
            token, count = line.split("\t")
            tokens.append(token)
            counts.append(int(count))
        return cls(tokens, counts, min_count)


def _as_tokens(doc) -> list[str]:
    return tokenize(doc) if isinstance(doc, str) else list(doc)


def build_vocabulary(corpus: Iterable, min_count: int = 1) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    Documents may be raw strings or pre-tokenized lists.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq = Counter()
    for doc in corpus:
        freq.update(_as_tokens(doc))
    kept = sorted((t for t, c in freq.items() if c >= min_count), key=lambda t: (-freq[t], t))
    return Vocabulary(kept, [freq[t] for t in kept], min_count)


@dataclass
class WordVectors:
    vocab: Vocabulary
    matrix: np.ndarray  # [len(vocab), dim], float32, row 0 is zero
    losses: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype="<f4")
        if self.matrix.shape[0] != len(self.vocab):
            raise ValueError(f"{self.matrix.shape[0]} vector rows for a vocabulary of {len(self.vocab)}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self.vocab.id(token)]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, WordVectors)
            and self.vocab == other.vocab
            and np.array_equal(self.matrix, other.matrix)
        )

    def to_bytes(self) -> bytes:
        manifest = {
            "format": VECTORS_FORMAT,
            "version": VECTORS_VERSION,
            "vocab_size": len(self.vocab),
            "dim": self.dim,
            "min_count": self.vocab.min_count,
        }
        out = [json.dumps(manifest, sort_keys=True).encode() + b"\n"]
        for i, token in enumerate(self.vocab.id_to_token):
            raw = token.encode("utf-8")
            out.append(struct.pack("<HQ", len(raw), self.vocab.counts[i]))
            out.append(raw)
            out.append(self.matrix[i].tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WordVectors":
        head, _, body = blob.partition(b"\n")
        manifest = json.loads(head)
        if manifest.get("format") != VECTORS_FORMAT or manifest.get("version") != VECTORS_VERSION:
            raise ValueError(f"not a word-vectors file: {manifest}")
        n, dim = manifest["vocab_size"], manifest["dim"]
        tokens, counts, rows = [], [], np.empty((n, dim), dtype="<f4")
        pos = 0
        for i in range(n):
            length, count = struct.unpack_from("<HQ", body, pos)
            pos += 10
            tokens.append(body[pos : pos + length].decode("utf-8"))
            pos += length
            rows[i] = np.frombuffer(body, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
            counts.append(count)
        if pos != len(body):
            raise ValueError("trailing bytes in word-vectors file")
        if tokens[0] != OOV_TOKEN:
            raise ValueError("first record must be the OOV token")
        vocab = Vocabulary(tokens[1:], counts[1:], manifest.get("min_count", 1))
        return cls(vocab, rows)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WordVectors":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class Word2VecConfig:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    seed: int = 0
    min_count: int = 1
    learning_rate: float = 0.025
    batch_size: int = 256


def _skipgram_pairs(docs: list[np.ndarray], window: int, rng: np.random.Generator) -> np.ndarray:
    """(center, context) id pairs with word2vec's randomly shrunk windows."""
    flat = np.concatenate(docs) if docs else np.empty(0, np.int64)
    doc_of = np.repeat(np.arange(len(docs)), [len(d) for d in docs])
    reach = rng.integers(1, window + 1, size=flat.size)
    pairs = []
    for offset in range(1, window + 1):
        left = np.arange(flat.size - offset)
        right = left + offset
        same = doc_of[left] == doc_of[right]
        fwd = same & (reach[left] >= offset)
        bwd = same & (reach[right] >= offset)
        pairs.append(np.stack([flat[left[fwd]], flat[right[fwd]]], axis=1))
        pairs.append(np.stack([flat[right[bwd]], flat[left[bwd]]], axis=1))
    return np.concatenate(pairs) if pairs else np.empty((0, 2), np.int64)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0, -x)


def train_word2vec(corpus: Iterable, config: Word2VecConfig = Word2VecConfig(), vocab: Vocabulary | None = None) -> WordVectors:
    """Skip-gram with negative sampling, trained by minibatch SGD.

    Deterministic given ``config.seed``. Negatives are drawn from the
    unigram distribution raised to the 0.75 power. The learning rate decays
    linearly to 1e-4 of its initial value. Per-epoch mean loss is kept in
    ``WordVectors.losses``.
    """
    docs_tokens = [_as_tokens(d) for d in corpus]
    if vocab is None:
        vocab = build_vocabulary(docs_tokens, config.min_count)
    V = len(vocab)
    if V <= 1:
        raise ValueError("cannot train word2vec on an empty vocabulary")
    rng = np.random.default_rng(config.seed)
    d = config.dim
    w_in = ((rng.random((V, d)) - 0.5) / d).astype(np.float32)
    w_in[0] = 0
    w_out = np.zeros((V, d), dtype=np.float32)

    docs = [np.asarray([i for i in vocab.encode(toks) if i > 0], dtype=np.int64) for toks in docs_tokens]
    docs = [doc for doc in docs if doc.size]
    noise = np.asarray(vocab.counts[1:], dtype=np.float64) ** 0.75
    noise /= noise.sum()

    epoch_pairs = [_skipgram_pairs(docs, config.window, rng) for _ in range(config.epochs)]
    total_steps = max(1, sum(-(-len(p) // config.batch_size) for p in epoch_pairs))
    lr0, step = config.learning_rate, 0
    losses = []
    for pairs in epoch_pairs:
        pairs = pairs[rng.permutation(len(pairs))]
        negs = rng.choice(V - 1, size=(len(pairs), config.negatives), p=noise) + 1
        epoch_loss = 0.0
        for start in range(0, len(pairs), config.batch_size):
            lr = np.float32(lr0 * max(1e-4, 1 - step / total_steps))
            step += 1
            c = pairs[start : start + config.batch_size, 0]
            o = pairs[start : start + config.batch_size, 1]
            n = negs[start : start + config.batch_size]
            h = w_in[c]
            u_pos = w_out[o]
            u_neg = w_out[n]
            s_pos = (h * u_pos).sum(-1)
            s_neg = np.einsum("bd,bkd->bk", h, u_neg)
            epoch_loss -= float(_log_sigmoid(s_pos).sum() + _log_sigmoid(-s_neg).sum())
            g_pos = (1 / (1 + np.exp(-s_pos)) - 1).astype(np.float32)
            g_neg = (1 / (1 + np.exp(-s_neg))).astype(np.float32)
            grad_h = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
            np.add.at(w_out, o, -lr * g_pos[:, None] * h)
            np.add.at(w_out, n, -lr * g_neg[..., None] * h[:, None, :])
            np.add.at(w_in, c, -lr * grad_h)
        losses.append(epoch_loss / max(1, len(pairs)))
        logger.info("word2vec epoch %d: loss %.4f over %d pairs", len(losses), losses[-1], len(pairs))
    w_in[0] = 0
    return WordVectors(vocab, w_in, losses)


def mean_embedding(tokens: Sequence[str], vectors: WordVectors) -> Tensor:
    """Mean vector of the in-vocabulary tokens; zeros when there are none."""
    ids = [i for i in vectors.vocab.encode(tokens) if i > 0]
    if not ids:
        return Tensor(np.zeros(vectors.dim, dtype=np.float32))
    return Tensor(vectors.matrix[ids].mean(axis=0))
