"""Serving path: geo-radius filter, recency window, top-N scoring.

For a user, the candidate set is every indexed product within the user's
radius, newest first (ties by product id), truncated to the ``M`` most
recent. Strategies then pick ``N`` of them:

* ``pairnn``   -- dot product of unit user / product embeddings
* ``word2vec`` -- cosine of mean keyword vector vs mean title-word vector
* ``time``     -- the first ``N`` candidates, no scoring

Ties in any ranking are broken by ascending product id. Search is exact:
the recency window bounds how many candidates are scored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .catalog import Catalog, UserProfile, haversine_km_many
from .corpus import WordVectors, tokenize
from .metrics import EvalSet
from .towers import ModelCheckpoint, PairNN

INDEX_FORMAT = "pairnn.index"
INDEX_VERSION = 1
ID_BYTES = 32
STRATEGIES = ("pairnn", "word2vec", "time")
DEFAULT_M = 500
DEFAULT_N = 50


class RetrievalError(ValueError):
    pass


class Hit(NamedTuple):
    product_id: str
    score: float


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [("id", f"S{ID_BYTES}"), ("embedding", "<f4", (dim,)), ("lat", "<f8"), ("lon", "<f8"), ("created_at", "<f8")]
    )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class ProductTable:
    """Geo and recency metadata for a product set, sorted by product id."""

    def __init__(self, ids: Sequence[str], lat, lon, created_at):
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.ids = tuple(ids[i] for i in order)
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("duplicate product ids")
        self.lat = _frozen(np.asarray(lat, dtype=np.float64)[order] if len(ids) else np.zeros(0))
        self.lon = _frozen(np.asarray(lon, dtype=np.float64)[order] if len(ids) else np.zeros(0))
        self.created_at = _frozen(np.asarray(created_at, dtype=np.float64)[order] if len(ids) else np.zeros(0))
        self.position = {pid: i for i, pid in enumerate(self.ids)}
        self._order = order

    @classmethod
    def from_catalog(cls, catalog: Catalog) -> "ProductTable":
        ps = list(catalog.products.values())
        return cls(
            [p.product_id for p in ps], [p.location[0] for p in ps], [p.location[1] for p in ps], [p.created_at for p in ps]
        )

    def __len__(self) -> int:
        return len(self.ids)


class EmbeddingIndex(ProductTable):
    """Immutable snapshot of unit product embeddings plus geo / recency metadata.

    File layout: one JSON manifest line (format, version, dim, count,
    checkpoint fingerprint), then ``count`` fixed-width little-endian
    records ``(id: 32 bytes NUL-padded UTF-8, embedding: dim x f4, lat: f8,
    lon: f8, created_at: f8)`` in ascending id order.
    """

    def __init__(self, ids, embeddings, lat, lon, created_at, checkpoint_fingerprint: str = ""):
        super().__init__(ids, lat, lon, created_at)
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] != len(self.ids):
            raise RetrievalError(f"embeddings shape {emb.shape} does not match {len(self.ids)} ids")
        self.embeddings = _frozen(emb[self._order] if len(self.ids) else emb)
        self.dim = emb.shape[1]
        self.checkpoint_fingerprint = checkpoint_fingerprint
        self._emb64 = _frozen(self.embeddings.astype(np.float64))

    def norm_error(self) -> float:
        if not len(self):
            return 0.0
        return float(np.abs(np.linalg.norm(self._emb64, axis=1) - 1).max())

    def to_bytes(self) -> bytes:
        manifest = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "dim": self.dim,
            "count": len(self),
            "checkpoint_fingerprint": self.checkpoint_fingerprint,
        }
        rec = np.zeros(len(self), dtype=_record_dtype(self.dim))
        for i, pid in enumerate(self.ids):
            raw = pid.encode("utf-8")
            if len(raw) > ID_BYTES:
                raise RetrievalError(f"product id {pid!r} longer than {ID_BYTES} bytes")
            rec["id"][i] = raw
        rec["embedding"] = self.embeddings
        rec["lat"], rec["lon"], rec["created_at"] = self.lat, self.lon, self.created_at
        return json.dumps(manifest, sort_keys=True).encode() + b"\n" + rec.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingIndex":
        head, _, body = blob.partition(b"\n")
        m = json.loads(head)
        if m.get("format") != INDEX_FORMAT or m.get("version") != INDEX_VERSION:
            raise RetrievalError(f"not an index file (format={m.get('format')!r})")
        dt = _record_dtype(m["dim"])
        if len(body) != dt.itemsize * m["count"]:
            raise RetrievalError("index payload size does not match its manifest")
        rec = np.frombuffer(body, dtype=dt, count=m["count"])
        ids = [r.decode("utf-8") for r in rec["id"]]
        return cls(ids, rec["embedding"], rec["lat"], rec["lon"], rec["created_at"], m["checkpoint_fingerprint"])

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build_index(catalog: Catalog, model: PairNN, checkpoint: ModelCheckpoint | None = None) -> EmbeddingIndex:
    """Embed every catalog product with the frozen product tower."""
    products = list(catalog.products.values())
    emb = model.embed_products(products)
    fp = (checkpoint or model.to_checkpoint()).fingerprint()
    return EmbeddingIndex(
        [p.product_id for p in products],
        emb,
        [p.location[0] for p in products],
        [p.location[1] for p in products],
        [p.created_at for p in products],
        fp,
    )


# -- candidate generation --------------------------------------------------------


def candidate_positions(table: ProductTable, user: UserProfile, M: int, before: float | None = None) -> np.ndarray:
    """Positions (into ``table``) of the M most recent in-radius products."""
    if M < 1:
        raise RetrievalError("M must be >= 1")
    if not len(table):
        return np.zeros(0, dtype=np.int64)
    dist = haversine_km_many(user.location[0], user.location[1], table.lat, table.lon)
    mask = dist <= user.radius_km
    if before is not None:
        mask &= table.created_at < before
    pos = np.flatnonzero(mask)
    order = np.lexsort((pos, -table.created_at[pos]))
    return pos[order[:M]]


def candidate_set(table: ProductTable, user: UserProfile, M: int, before: float | None = None) -> list[str]:
    """Product ids within the user's radius, newest first, at most ``M``.

    ``before`` restricts to products created strictly earlier than it.
    """
    return [table.ids[i] for i in candidate_positions(table, user, M, before)]


def _row_dots(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # elementwise product + row sum reduces every row the same way; a BLAS
    # matvec may not, which would split exact ties between equal rows
    return (rows * u).sum(axis=1)


def _top_n(table: ProductTable, pos: np.ndarray, scores: np.ndarray, N: int) -> list[Hit]:
    order = np.lexsort((pos, -scores))[:N]
    return [Hit(table.ids[pos[i]], float(scores[i])) for i in order]


@dataclass(frozen=True)
class RetrievalRequest:
    user_id: str | None = None
    M: int = DEFAULT_M
    N: int = DEFAULT_N
    strategy: str = "pairnn"
    user_embedding: tuple[float, ...] | None = None
    before: float | None = None

    def __post_init__(self):
        if isinstance(self.N, bool) or not isinstance(self.N, int) or self.N < 1:
            raise RetrievalError(f"N must be an integer >= 1, got {self.N!r}")
        if isinstance(self.M, bool) or not isinstance(self.M, int) or self.M < self.N:
            raise RetrievalError(f"M must be an integer >= N, got M={self.M!r}, N={self.N}")
        if self.strategy not in STRATEGIES:
            raise RetrievalError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.user_id is None and self.user_embedding is None:
            raise RetrievalError("request needs a user_id or a user_embedding")


def rank_passthrough(hits: list[Hit], request: RetrievalRequest | None = None) -> list[Hit]:
    """Attachment point for a downstream ranking stage; returns hits unchanged."""
    return hits


class Retriever:
    """Answers retrieval requests against an immutable index snapshot.

    User embeddings and word2vec mean vectors are computed once at
    construction, so the query path only reads shared arrays.
    """

    def __init__(
        self,
        catalog: Catalog,
        index: EmbeddingIndex | None = None,
        model: PairNN | None = None,
        vectors: WordVectors | None = None,
    ):
        self.catalog = catalog
        self.index = index
        self.table: ProductTable = index if index is not None else ProductTable.from_catalog(catalog)
        self.model = model
        self.vectors = vectors
        users = list(catalog.users.values())
        self._user_pos = {u.user_id: i for i, u in enumerate(users)}
        self._user_emb = None
        if model is not None and index is not None:
            self._user_emb = _frozen(model.embed_users(users).astype(np.float64))
        self._kw_unit = self._title_unit = None
        if vectors is not None:
            self._kw_unit = _frozen(_unit_rows(np.stack([_mean_vec(u.keywords, vectors) for u in users]) if users else np.zeros((0, vectors.dim))))
            titles = [self.catalog.products[pid].title for pid in self.table.ids]
            self._title_unit = _frozen(
                _unit_rows(np.stack([_mean_vec(tokenize(t), vectors) for t in titles]) if titles else np.zeros((0, vectors.dim)))
            )

    def user(self, user_id: str) -> UserProfile:
        try:
            return self.catalog.users[user_id]
        except KeyError:
            raise RetrievalError(f"unknown user id {user_id!r}") from None

    def available(self, strategy: str) -> bool:
        if strategy == "pairnn":
            return self._user_emb is not None
        if strategy == "word2vec":
            return self._kw_unit is not None
        return True

    def retrieve(self, request: RetrievalRequest) -> list[Hit]:
        if request.user_id is None:
            raise RetrievalError("geo filtering needs a user_id")
        user = self.user(request.user_id)
        pos = candidate_positions(self.table, user, request.M, request.before)
        if request.strategy == "time":
            hits = [Hit(self.table.ids[i], float(self.table.created_at[i])) for i in pos[: request.N]]
        elif request.strategy == "pairnn":
            if self.index is None or (self._user_emb is None and request.user_embedding is None):
                raise RetrievalError("pairnn strategy needs an index and a model checkpoint")
            if request.user_embedding is not None:
                u = np.asarray(request.user_embedding, dtype=np.float64)
            else:
                u = self._user_emb[self._user_pos[user.user_id]]
            hits = _top_n(self.table, pos, _row_dots(self.index._emb64[pos], u), request.N)
        else:
            if self._kw_unit is None:
                raise RetrievalError("word2vec strategy needs word vectors")
            u = self._kw_unit[self._user_pos[user.user_id]]
            hits = _top_n(self.table, pos, _row_dots(self._title_unit[pos], u), request.N)
        return rank_passthrough(hits, request)

    def strategy_fn(self, strategy: str):
        """Replay adapter: (user_id, timestamp, M, N) -> ranked ids."""
        if not self.available(strategy):
            return None

        def run(user_id: str, timestamp: float, M: int, N: int) -> list[str]:
            req = RetrievalRequest(user_id=user_id, M=M, N=N, strategy=strategy, before=timestamp)
            return [h.product_id for h in self.retrieve(req)]

        return run


def _mean_vec(tokens: Sequence[str], vectors: WordVectors) -> np.ndarray:
    ids = [i for i in vectors.vocab.encode(tokens) if i > 0]
    if not ids:
        return np.zeros(vectors.dim)
    return vectors.matrix[ids].astype(np.float64).mean(axis=0)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return np.where(n > 1e-12, a / np.where(n > 1e-12, n, 1), 0.0)


def retrieve(index: EmbeddingIndex, request: RetrievalRequest, catalog: Catalog, model: PairNN | None = None) -> list[Hit]:
    """Top-N by embedding dot product over the candidate set."""
    if request.strategy != "pairnn":
        request = RetrievalRequest(request.user_id, request.M, request.N, "pairnn", request.user_embedding, request.before)
    return Retriever(catalog, index, model).retrieve(request)


def retrieve_time_based(table: ProductTable, request: RetrievalRequest, catalog: Catalog) -> list[Hit]:
    """The first N products of the candidate set."""
    req = RetrievalRequest(request.user_id, request.M, request.N, "time", None, request.before)
    return Retriever(catalog, table if isinstance(table, EmbeddingIndex) else None).retrieve(req)


def retrieve_word2vec(vectors: WordVectors, catalog: Catalog, request: RetrievalRequest, table: ProductTable | None = None) -> list[Hit]:
    """Top-N by cosine between mean keyword and mean title-word vectors."""
    req = RetrievalRequest(request.user_id, request.M, request.N, "word2vec", None, request.before)
    index = table if isinstance(table, EmbeddingIndex) else None
    return Retriever(catalog, index, vectors=vectors).retrieve(req)


def word2vec_eval_set(vectors: WordVectors, catalog: Catalog, triples) -> EvalSet:
    """Baseline scores for (user, positive, negative) triples.

    The same cosine the word2vec retriever ranks by, so its rows in the
    offline table and the replay table describe one model.
    """
    users = sorted({t.user_id for t in triples})
    products = sorted({t.positive for t in triples} | {t.negative for t in triples})
    U = _unit_rows(np.stack([_mean_vec(catalog.users[u].keywords, vectors) for u in users])) if users else None
    P = _unit_rows(np.stack([_mean_vec(tokenize(catalog.products[p].title), vectors) for p in products])) if products else None
    upos = {u: i for i, u in enumerate(users)}
    ppos = {p: i for i, p in enumerate(products)}
    r_pos = [float(U[upos[t.user_id]] @ P[ppos[t.positive]]) for t in triples]
    r_neg = [float(U[upos[t.user_id]] @ P[ppos[t.negative]]) for t in triples]
    return EvalSet(r_pos, r_neg)
