"""Triple construction from event logs and pairwise hinge-loss training.

A training triple (user, positive, negative) pairs a product the user
messaged the seller about with a product the user was shown but never
messaged. Training minimises the mean of ``max(0, r_neg - r_pos + margin)``
over minibatches of triples with Adam.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .catalog import Catalog, EventRecord
from .corpus import WordVectors
from .metrics import EvalSet, accuracy, average_loss
from .towers import ModelCheckpoint, PairNN, TowerConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class TrainingTriple:
    user_id: str
    positive: str
    negative: str

    def __post_init__(self):
        if self.positive == self.negative:
            raise ValueError(f"triple for {self.user_id}: positive and negative are both {self.positive}")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    epochs: int = 3
    batch_size: int = 256
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    negatives_per_positive: int = 14
    seed: int = 0
    modality: str = "both"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.negatives_per_positive < 1:
            raise ValueError("epochs must be >= 0; batch_size and negatives_per_positive >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, checkpoint: ModelCheckpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def label_events(events: Iterable[EventRecord]) -> dict[str, tuple[list[str], list[str]]]:
    """Per user: (sorted positives, sorted negatives).

    A message makes a product positive for that user; a product that was
    only impressed is negative. Messages take precedence.
    """
    messaged: dict[str, set[str]] = defaultdict(set)
    impressed: dict[str, set[str]] = defaultdict(set)
    for e in events:
        (messaged if e.type == "message" else impressed)[e.user_id].add(e.product_id)
    out = {}
    for user in sorted(set(messaged) | set(impressed)):
        pos = messaged.get(user, set())
        out[user] = (sorted(pos), sorted(impressed.get(user, set()) - pos))
    return out


def build_triples(
    events: Iterable[EventRecord],
    negatives_per_positive: int = 14,
    seed: int = 0,
    catalog: Catalog | None = None,
) -> list[TrainingTriple]:
    """Pair every positive with ``negatives_per_positive`` sampled negatives.

    Negatives are drawn without replacement while enough exist, then with
    replacement for the remainder. Users with positives but no negatives
    are skipped (logged). The result does not depend on event order.
    """
    if negatives_per_positive < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    events = list(events)
    if catalog is not None:
        for e in events:
            if e.user_id not in catalog.users:
                raise ValueError(f"event references unknown user {e.user_id!r}")
            if e.product_id not in catalog.products:
                raise ValueError(f"event references unknown product {e.product_id!r}")
    rng = np.random.default_rng(seed)
    triples, skipped = [], 0
    for user, (positives, negatives) in label_events(events).items():
        if not positives:
            continue
        if not negatives:
            skipped += 1
            continue
        k = negatives_per_positive
        for pos in positives:
            if len(negatives) >= k:
                picks = rng.choice(len(negatives), size=k, replace=False)
            else:
                extra = rng.choice(len(negatives), size=k - len(negatives), replace=True)
                picks = np.concatenate([np.arange(len(negatives)), extra])
            triples.extend(TrainingTriple(user, pos, negatives[j]) for j in picks)
    if skipped:
        logger.warning("skipped %d user(s) with positives but no negatives", skipped)
    return triples


def is_validation_user(user_id: str, fraction: float = 0.1) -> bool:
    bucket = int(hashlib.sha256(user_id.encode()).hexdigest()[:8], 16) % 10_000
    return bucket < fraction * 10_000


def split_by_user(triples: Sequence[TrainingTriple], fraction: float = 0.1) -> tuple[list, list]:
    """(train, validation) with every user on exactly one side."""
    train, val = [], []
    for t in triples:
        (val if is_validation_user(t.user_id, fraction) else train).append(t)
    return train, val


# -- scoring -------------------------------------------------------------------


class _Encoded:
    """Tower inputs for the users / products that a triple set touches."""

    def __init__(self, model: PairNN, catalog: Catalog, triples: Sequence[TrainingTriple]):
        users = sorted({t.user_id for t in triples})
        products = sorted({t.positive for t in triples} | {t.negative for t in triples})
        self.user_pos = {u: i for i, u in enumerate(users)}
        self.product_pos = {p: i for i, p in enumerate(products)}
        self.users = model.encode_users([catalog.users[u] for u in users])
        self.products = model.encode_products([catalog.products[p] for p in products])

    def index(self, triples: Sequence[TrainingTriple]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = np.fromiter((self.user_pos[t.user_id] for t in triples), np.int64, len(triples))
        p = np.fromiter((self.product_pos[t.positive] for t in triples), np.int64, len(triples))
        n = np.fromiter((self.product_pos[t.negative] for t in triples), np.int64, len(triples))
        return u, p, n


def score_triples(model: PairNN, catalog: Catalog, triples: Sequence[TrainingTriple], encoded: _Encoded | None = None) -> EvalSet:
    """Frozen-model scores r_pos, r_neg for each triple."""
    enc = encoded or _Encoded(model, catalog, triples)
    U = model.embed_users(enc.users)
    P = model.embed_products(enc.products)
    u, p, n = enc.index(triples)
    return EvalSet((U[u] * P[p]).sum(axis=1), (U[u] * P[n]).sum(axis=1))


def evaluate_split(
    model: PairNN | ModelCheckpoint, catalog: Catalog, triples: Sequence[TrainingTriple], margin: float = 1.0, vocab=None
) -> dict[str, float]:
    if not triples:
        raise ValueError("cannot evaluate an empty triple set")
    if isinstance(model, ModelCheckpoint):
        model = model.to_model(vocab)
    s = score_triples(model, catalog, triples)
    return {"accuracy": accuracy(s), "average_loss": average_loss(s, margin)}


# -- optimisation ----------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[ad.Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGD:
    def __init__(self, params: Sequence[ad.Parameter], lr: float):
        self.params, self.lr = list(params), lr

    def step(self) -> None:
        for p in self.params:
            p.data -= (self.lr * p.grad).astype(p.data.dtype)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float | None
    val_average_loss: float | None
    seconds: float

    def to_json(self) -> str:
        """Deterministic record; wall-clock ``seconds`` is left out so reruns match byte for byte."""
        record = asdict(self)
        del record["seconds"]
        return json.dumps(record, sort_keys=True)


@dataclass
class TrainResult:
    model: PairNN
    checkpoint: ModelCheckpoint
    history: list[EpochMetrics] = field(default_factory=list)
    train_triples: int = 0
    val_triples: int = 0


def minibatch_loss(model: PairNN, enc: _Encoded, batch: Sequence[TrainingTriple], margin: float) -> ad.Tensor:
    """Mean hinge loss of a batch; unique users / products are embedded once."""
    u, p, n = enc.index(batch)
    uu, u_inv = np.unique(u, return_inverse=True)
    pp, p_inv = np.unique(np.concatenate([p, n]), return_inverse=True)
    U = model.user_forward(enc.users.rows(uu))
    P = model.product_forward(enc.products.rows(pp))
    ue = ad.take(U, u_inv)
    r_pos = ad.dot(ue, ad.take(P, p_inv[: len(batch)]))
    r_neg = ad.dot(ue, ad.take(P, p_inv[len(batch) :]))
    return ad.mean(ad.hinge_rank_loss(r_pos, r_neg, margin))


def train(
    catalog: Catalog,
    triples: Sequence[TrainingTriple],
    vectors: WordVectors,
    config: TrainConfig = TrainConfig(),
    tower_config: TowerConfig | None = None,
    val_triples: Sequence[TrainingTriple] | None = None,
    on_epoch=None,
) -> TrainResult:
    """Minimise the mean hinge loss by minibatch gradient descent.

    When ``val_triples`` is not given, the triples are split by user hash
    into train / validation. Deterministic given ``config.seed``.
    """
    if not triples:
        raise ValueError("no training triples")
    if val_triples is None:
        train_set, val_set = split_by_user(triples, config.val_fraction)
    else:
        train_set, val_set = list(triples), list(val_triples)
    if not train_set:
        raise ValueError("no training triples after the validation split")
    tower_config = replace(tower_config or TowerConfig(), modality=config.modality, seed=config.seed)
    model = PairNN.from_vectors(tower_config, vectors)
    enc = _Encoded(model, catalog, train_set)
    val_enc = _Encoded(model, catalog, val_set) if val_set else None
    params = model.parameters()
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    echo = asdict(config)
    result = TrainResult(model, model.to_checkpoint(echo), [], len(train_set), len(val_set))

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[s : s + config.batch_size]]
            model.zero_grad()
            with ad.Tape() as tape:
                loss = minibatch_loss(model, enc, batch, config.margin)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} in epoch {epoch}", result.checkpoint)
            ad.backward(tape, loss)
            opt.step()
            total += value * len(batch)
        model.zero_grad()
        val_acc = val_loss = None
        if val_enc is not None:
            s_val = score_triples(model, catalog, val_set, val_enc)
            val_acc, val_loss = accuracy(s_val), average_loss(s_val, config.margin)
        m = EpochMetrics(epoch, total / len(train_set), val_acc, val_loss, time.perf_counter() - start)
        result.history.append(m)
        result.checkpoint = model.to_checkpoint(echo)
        logger.info(
            "epoch %d: train loss %.4f, val accuracy %s, %.1fs",
            epoch, m.train_loss, "n/a" if val_acc is None else f"{val_acc:.4f}", m.seconds,
        )
        if on_epoch is not None:
            on_epoch(m)
    return result
