"""User and product towers, the dot-product scorer, and checkpoint files.

User tower: keyword ids -> embedding table -> mean pool, concatenated with
the demographic vector -> MLP -> unit vector.

Product tower: title + description tokens -> embedding table -> one conv
bank per filter width -> max over time -> ReLU (text branch); the fixed
image feature vector (image branch); active branches concatenated -> MLP
-> unit vector.

Both MLPs are ``in -> 100 -> 100 -> 50`` with ReLU on the hidden layers.
Because both towers emit unit vectors, the plain dot product used for
scoring is the cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .catalog import ProductRecord, UserProfile
from .corpus import Vocabulary, WordVectors, tokenize

CHECKPOINT_FORMAT = "pairnn.checkpoint"
CHECKPOINT_VERSION = 1
MODALITIES = ("text", "image", "both")


class DataError(ValueError):
    pass


def modality_flags(modality: str) -> dict[str, bool]:
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    return {"text": modality in ("text", "both"), "image": modality in ("image", "both")}


@dataclass(frozen=True)
class TowerConfig:
    modality: str = "both"
    word_dim: int = 64
    demo_dim: int = 8
    image_dim: int = 64
    hidden: tuple[int, ...] = (100, 100)
    out_dim: int = 50
    conv_widths: tuple[int, ...] = (2, 3)
    conv_channels: int = 32
    max_tokens: int = 128
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        modality_flags(self.modality)
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))

    @property
    def text(self) -> bool:
        return modality_flags(self.modality)["text"]

    @property
    def image(self) -> bool:
        return modality_flags(self.modality)["image"]


# -- encoded inputs ------------------------------------------------------------


@dataclass
class UserInputs:
    keyword_ids: np.ndarray  # [n, K] int64, 0 = OOV / padding
    demographics: np.ndarray  # [n, demo_dim] float32

    def rows(self, idx) -> "UserInputs":
        kw = self.keyword_ids[idx]  # rows are left-packed by encode_users
        width = max(1, int((kw > 0).sum(axis=1).max(initial=0)))
        return UserInputs(kw[:, :width], self.demographics[idx])


@dataclass
class ProductInputs:
    token_ids: np.ndarray  # [n, L] int64; OOV tokens still occupy positions
    lengths: np.ndarray  # [n] int64
    image: np.ndarray  # [n, image_dim] float32 (zeros when the branch is off)

    def rows(self, idx) -> "ProductInputs":
        lengths = self.lengths[idx]
        width = max(1, int(lengths.max(initial=0)))
        return ProductInputs(self.token_ids[idx][:, :width], lengths, self.image[idx])


def product_tokens(record: ProductRecord, max_tokens: int = 128) -> list[str]:
    return (tokenize(record.title) + tokenize(record.description))[:max_tokens]


def encode_users(users: Sequence[UserProfile], vocab: Vocabulary, demo_dim: int) -> UserInputs:
    ids = [[i for i in vocab.encode(u.keywords) if i > 0] for u in users]
    width = max([len(r) for r in ids] + [1])
    kw = np.zeros((len(users), width), dtype=np.int64)
    demo = np.zeros((len(users), demo_dim), dtype=np.float32)
    for n, (u, r) in enumerate(zip(users, ids)):
        if len(u.demographics) != demo_dim:
            raise ad.ShapeError(
                f"user {u.user_id}: demographics shape ({len(u.demographics)},) does not match configured ({demo_dim},)"
            )
        kw[n, : len(r)] = r
        demo[n] = u.demographics
    return UserInputs(kw, demo)


def encode_products(products: Sequence[ProductRecord], vocab: Vocabulary, config: TowerConfig) -> ProductInputs:
    toks = [vocab.encode(product_tokens(p, config.max_tokens)) if config.text else [] for p in products]
    width = max([len(t) for t in toks] + [1])
    ids = np.zeros((len(products), width), dtype=np.int64)
    lengths = np.zeros(len(products), dtype=np.int64)
    image = np.zeros((len(products), config.image_dim), dtype=np.float32)
    missing = []
    for n, (p, t) in enumerate(zip(products, toks)):
        ids[n, : len(t)] = t
        lengths[n] = len(t)
        if config.image:
            if p.image_features is None:
                missing.append(p.product_id)
                continue
            if len(p.image_features) != config.image_dim:
                raise DataError(
                    f"product {p.product_id}: image features have dimension {len(p.image_features)}, "
                    f"expected {config.image_dim}"
                )
            image[n] = p.image_features
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise DataError(f"missing image features for {len(missing)} product(s): {shown}")
    return ProductInputs(ids, lengths, image)


# -- model ---------------------------------------------------------------------


class PairNN:
    """The two towers and their parameters."""

    def __init__(self, config: TowerConfig, vocab: Vocabulary, params: dict[str, Parameter] | None = None):
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else self._init_params()

    @classmethod
    def from_vectors(cls, config: TowerConfig, vectors: WordVectors) -> "PairNN":
        """Initialise both embedding tables from pre-trained word vectors."""
        config = replace(config, word_dim=vectors.dim)
        model = cls(config, vectors.vocab)
        for side in ("user", "product"):
            key = f"{side}.embedding"
            if key in model.params:
                model.params[key].data[...] = vectors.matrix
        return model

    def _init_params(self) -> dict[str, Parameter]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        params: dict[str, Parameter] = {}

        def uniform(*shape):
            return rng.uniform(-c.init_scale, c.init_scale, shape)

        def mlp(prefix: str, width: int):
            sizes = [width, *c.hidden, c.out_dim]
            for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                params[f"{prefix}.mlp.{k}.weight"] = Parameter(f"{prefix}.mlp.{k}.weight", uniform(n_out, n_in))
                params[f"{prefix}.mlp.{k}.bias"] = Parameter(f"{prefix}.mlp.{k}.bias", np.zeros(n_out))

        V = len(self.vocab)
        params["user.embedding"] = Parameter("user.embedding", np.vstack([np.zeros((1, c.word_dim)), uniform(V - 1, c.word_dim)]))
        mlp("user", c.word_dim + c.demo_dim)
        width = 0
        if c.text:
            params["product.embedding"] = Parameter(
                "product.embedding", np.vstack([np.zeros((1, c.word_dim)), uniform(V - 1, c.word_dim)])
            )
            for w in c.conv_widths:
                params[f"product.conv{w}.weight"] = Parameter(f"product.conv{w}.weight", uniform(c.conv_channels, w, c.word_dim))
                params[f"product.conv{w}.bias"] = Parameter(f"product.conv{w}.bias", np.zeros(c.conv_channels))
            width += c.conv_channels * len(c.conv_widths)
        if c.image:
            width += c.image_dim
        mlp("product", width)
        return params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        n_layers = len(self.config.hidden) + 1
        for k in range(n_layers):
            x = ad.affine(x, self.params[f"{prefix}.mlp.{k}.weight"], self.params[f"{prefix}.mlp.{k}.bias"])
            if k < n_layers - 1:
                x = ad.relu(x)
        return x

    # raw (pre-normalization) outputs are exposed for tests of the scorer
    def user_raw(self, inputs: UserInputs) -> Tensor:
        pooled = ad.embedding_mean(self.params["user.embedding"], inputs.keyword_ids)
        x = ad.concat([pooled, Tensor(inputs.demographics)])
        return self._mlp("user", x)

    def product_raw(self, inputs: ProductInputs) -> Tensor:
        parts = []
        if self.config.text:
            emb = ad.embedding_lookup(self.params["product.embedding"], inputs.token_ids)
            for w in self.config.conv_widths:
                pooled = ad.conv1d_max(emb, inputs.lengths, self.params[f"product.conv{w}.weight"], self.params[f"product.conv{w}.bias"])
                parts.append(ad.relu(pooled))
        if self.config.image:
            parts.append(Tensor(inputs.image))
        x = parts[0] if len(parts) == 1 else ad.concat(parts)
        return self._mlp("product", x)

    def user_forward(self, inputs: UserInputs) -> Tensor:
        return ad.l2_normalize(self.user_raw(inputs), fallback=True)

    def product_forward(self, inputs: ProductInputs) -> Tensor:
        return ad.l2_normalize(self.product_raw(inputs), fallback=True)

    # -- convenience, forward-only ---------------------------------------------

    def encode_users(self, users: Sequence[UserProfile]) -> UserInputs:
        return encode_users(users, self.vocab, self.config.demo_dim)

    def encode_products(self, products: Sequence[ProductRecord]) -> ProductInputs:
        return encode_products(products, self.vocab, self.config)

    def embed_users(self, users: Sequence[UserProfile] | UserInputs, chunk: int = 2048) -> np.ndarray:
        inputs = users if isinstance(users, UserInputs) else self.encode_users(users)
        n = len(inputs.demographics)
        out = [self.user_forward(inputs.rows(np.arange(s, min(n, s + chunk)))).data for s in range(0, n, chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.out_dim), np.float32)

    def embed_products(self, products: Sequence[ProductRecord] | ProductInputs, chunk: int = 1024) -> np.ndarray:
        inputs = products if isinstance(products, ProductInputs) else self.encode_products(products)
        n = len(inputs.lengths)
        out = [self.product_forward(inputs.rows(np.arange(s, min(n, s + chunk)))).data for s in range(0, n, chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.out_dim), np.float32)

    # -- checkpoints -----------------------------------------------------------

    def to_checkpoint(self, train_config: dict | None = None) -> "ModelCheckpoint":
        return ModelCheckpoint(
            config=self.config,
            vocab_fingerprint=self.vocab.fingerprint(),
            arrays={k: p.data.astype("<f4") for k, p in self.params.items()},
            train_config=dict(train_config or {}),
        )


def embed_user(profile: UserProfile, model: PairNN) -> np.ndarray:
    return model.embed_users([profile])[0]


def embed_product(record: ProductRecord, model: PairNN) -> np.ndarray:
    return model.embed_products([record])[0]


def score(user_emb, product_emb) -> float:
    """Dot product of two unit embeddings (equal to their cosine)."""
    return float(np.dot(np.asarray(user_emb, np.float32), np.asarray(product_emb, np.float32)))


@dataclass
class ModelCheckpoint:
    """Serialized parameters of both towers.

    File layout: one JSON manifest line, then every array's little-endian
    float32 bytes concatenated in manifest order.
    """

    config: TowerConfig
    vocab_fingerprint: str
    arrays: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)

    @property
    def modality(self) -> dict[str, bool]:
        return modality_flags(self.config.modality)

    def manifest(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "modality": self.modality,
            "parameters": [[k, list(v.shape)] for k, v in self.arrays.items()],
            "config": asdict(self.config),
            "train_config": self.train_config,
            "vocab_fingerprint": self.vocab_fingerprint,
        }

    def payload(self) -> bytes:
        return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.arrays.values())

    def to_bytes(self) -> bytes:
        return json.dumps(self.manifest(), sort_keys=True).encode() + b"\n" + self.payload()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        head, _, body = blob.partition(b"\n")
        m = json.loads(head)
        if m.get("format") != CHECKPOINT_FORMAT or m.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"not a checkpoint file (format={m.get('format')!r}, version={m.get('version')!r})")
        arrays, pos = {}, 0
        for name, shape in m["parameters"]:
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
        if pos != len(body):
            raise ValueError("checkpoint payload size does not match its manifest")
        cfg = m["config"]
        config = TowerConfig(**cfg)
        if modality_flags(config.modality) != m["modality"]:
            raise ValueError("checkpoint modality flags disagree with its config")
        return cls(config, m["vocab_fingerprint"], arrays, m.get("train_config", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def to_model(self, vocab: Vocabulary) -> PairNN:
        if vocab.fingerprint() != self.vocab_fingerprint:
            raise ValueError(
                f"vocabulary fingerprint {vocab.fingerprint()} does not match checkpoint's {self.vocab_fingerprint}"
            )
        params = {k: Parameter(k, v) for k, v in self.arrays.items()}
        model = PairNN(self.config, vocab, params)
        expected = PairNN(self.config, vocab)
        shapes = {k: p.shape for k, p in expected.params.items()}
        if shapes != {k: p.shape for k, p in params.items()}:
            raise ValueError("checkpoint parameters do not match the tower architecture")
        return model
