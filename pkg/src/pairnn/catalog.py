"""Users, products and events: data model, JSON-lines I/O, synthetic marketplace.

All three files are UTF-8 JSON lines, one record per line, with the field
names of the dataclasses below. See ``docs/formats.md`` for a worked sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

EARTH_RADIUS_KM = 6371.0


class CatalogError(ValueError):
    pass


def _check_point(lat: float, lon: float, what: str = "location") -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise CatalogError(f"{what} out of bounds: lat={lat}, lon={lon}")


@dataclass
class UserProfile:
    user_id: str
    keywords: list[str]
    demographics: list[float]
    location: tuple[float, float]
    radius_km: float

    def __post_init__(self):
        self.location = (float(self.location[0]), float(self.location[1]))
        _check_point(*self.location, what=f"user {self.user_id} location")
        if not self.radius_km > 0:
            raise CatalogError(f"user {self.user_id}: radius_km must be positive, got {self.radius_km}")


@dataclass
class ProductRecord:
    product_id: str
    title: str
    description: str
    image_features: list[float] | None
    location: tuple[float, float]
    created_at: float

    def __post_init__(self):
        self.location = (float(self.location[0]), float(self.location[1]))
        _check_point(*self.location, what=f"product {self.product_id} location")
        if not math.isfinite(self.created_at):
            raise CatalogError(f"product {self.product_id}: created_at must be finite")


@dataclass(frozen=True)
class EventRecord:
    type: str  # "impression" | "message"
    user_id: str
    product_id: str
    timestamp: float

    def __post_init__(self):
        if self.type not in ("impression", "message"):
            raise CatalogError(f"unknown event type {self.type!r}")


@dataclass
class Catalog:
    users: dict[str, UserProfile] = field(default_factory=dict)
    products: dict[str, ProductRecord] = field(default_factory=dict)

    @classmethod
    def from_records(cls, users: Iterable[UserProfile], products: Iterable[ProductRecord]) -> "Catalog":
        cat = cls()
        for u in users:
            if u.user_id in cat.users:
                raise CatalogError(f"duplicate user id {u.user_id!r}")
            cat.users[u.user_id] = u
        for p in products:
            if p.product_id in cat.products:
                raise CatalogError(f"duplicate product id {p.product_id!r}")
            cat.products[p.product_id] = p
        return cat

    def save(self, users_path, products_path) -> None:
        _write_jsonl(users_path, (_user_json(u) for u in self.users.values()))
        _write_jsonl(products_path, (_product_json(p) for p in self.products.values()))


def _user_json(u: UserProfile) -> dict:
    d = asdict(u)
    d["location"] = list(u.location)
    return d


def _product_json(p: ProductRecord) -> dict:
    d = asdict(p)
    d["location"] = list(p.location)
    return d


def _write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def _read_jsonl(path, build) -> Iterator:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield build(json.loads(line))
            except CatalogError as exc:
                raise CatalogError(f"{path}:{lineno}: {exc}") from None
            except (ValueError, TypeError, KeyError) as exc:
                raise CatalogError(f"{path}:{lineno}: malformed record ({exc})") from None


def _user_from(d: dict) -> UserProfile:
    return UserProfile(
        user_id=str(d["user_id"]),
        keywords=[str(k) for k in d["keywords"]],
        demographics=[float(x) for x in d["demographics"]],
        location=tuple(d["location"]),
        radius_km=float(d["radius_km"]),
    )


def _product_from(d: dict) -> ProductRecord:
    feats = d.get("image_features")
    return ProductRecord(
        product_id=str(d["product_id"]),
        title=str(d["title"]),
        description=str(d["description"]),
        image_features=None if feats is None else [float(x) for x in feats],
        location=tuple(d["location"]),
        created_at=float(d["created_at"]),
    )


def _event_from(d: dict) -> EventRecord:
    return EventRecord(str(d["type"]), str(d["user_id"]), str(d["product_id"]), float(d["timestamp"]))


def load_catalog(users_path, products_path) -> Catalog:
    """Load and validate both record files; duplicate ids are rejected."""
    users = list(_read_jsonl(users_path, _user_from))
    products = list(_read_jsonl(products_path, _product_from))
    return Catalog.from_records(users, products)


def load_products(products_path) -> Catalog:
    """Catalog with products only (enough for building an index)."""
    return Catalog.from_records([], _read_jsonl(products_path, _product_from))


def load_events(path) -> list[EventRecord]:
    return list(_read_jsonl(path, _event_from))


def save_events(path, events: Iterable[EventRecord]) -> None:
    _write_jsonl(path, (asdict(e) for e in events))


def time_split(events: list[EventRecord], fraction: float = 0.8) -> tuple[float, list[EventRecord], list[EventRecord]]:
    """Split at the ``fraction`` quantile of timestamps: (cutoff, before, at-or-after)."""
    if not events:
        return 0.0, [], []
    stamps = sorted(e.timestamp for e in events)
    cutoff = stamps[min(len(stamps) - 1, int(fraction * len(stamps)))]
    return (
        cutoff,
        [e for e in events if e.timestamp < cutoff],
        [e for e in events if e.timestamp >= cutoff],
    )


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees."""
    _check_point(*a)
    _check_point(*b)
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_km_many(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized distances from one point to arrays of points."""
    lat1, lon1 = np.radians(lat), np.radians(lon)
    lat2, lon2 = np.radians(lats), np.radians(lons)
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


# -- synthetic marketplace -----------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    n_users: int = 2000
    n_products: int = 40000
    n_topics: int = 6
    vocab_size: int = 1000
    text_signal: float = 0.7
    image_signal: float = 0.5
    keyword_signal: float = 0.8
    modality_aliasing: float = 1.0
    p_hi: float = 0.3
    p_lo: float = 0.01
    geo_spread_km: float = 15.0
    n_cities: int = 5
    d_img: int = 64
    d_demo: int = 8
    demo_mixing: float = 0.3
    impressions_per_user: int = 50
    impression_pool: int = 500
    horizon_days: float = 30.0
    start_time: int = 1_700_000_000

    def __post_init__(self):
        if not 0 <= self.p_lo <= self.p_hi <= 1:
            raise ValueError(f"need 0 <= p_lo <= p_hi <= 1, got p_lo={self.p_lo}, p_hi={self.p_hi}")
        for name in ("text_signal", "image_signal", "keyword_signal", "modality_aliasing", "demo_mixing"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("n_users", "n_products", "n_topics", "vocab_size", "n_cities", "d_img", "d_demo"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2 * self.n_topics:
            raise ValueError("vocab_size must be at least twice n_topics")


# Fully separable: every message is topic-matched and every topic-matched
# impression is messaged.
PLANTED = SyntheticConfig(text_signal=1.0, image_signal=1.0, keyword_signal=1.0, modality_aliasing=0.0, p_hi=1.0, p_lo=0.0)


def text_partner(t: int, n_topics: int) -> int:
    """Topic whose text a topic shares under aliasing: pairs (0,1), (2,3), ..."""
    p = t + 1 if t % 2 == 0 else t - 1
    return p if p < n_topics else t


def image_partner(t: int, n_topics: int) -> int:
    """Topic whose image centroid a topic shares: pairs (1,2), (3,4), ..., (T-1, 0) for even T."""
    p = t + 1 if t % 2 == 1 else t - 1
    if p == n_topics:
        p = 0 if n_topics % 2 == 0 else t
    if p < 0:
        p = n_topics - 1 if n_topics % 2 == 0 else t
    return p if n_topics > 2 else t


@dataclass
class SyntheticData:
    catalog: Catalog
    events: list[EventRecord]
    user_topics: dict[str, int]
    product_topics: dict[str, int]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.catalog.save(out / "users.jsonl", out / "products.jsonl")
        save_events(out / "events.jsonl", self.events)
        topics = {"users": self.user_topics, "products": self.product_topics}
        (out / "topics.json").write_text(json.dumps(topics, sort_keys=True) + "\n", encoding="utf-8")


_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def _word(i: int) -> str:
    n = len(_SYLLABLES)
    parts = [_SYLLABLES[i % n], _SYLLABLES[(i // n) % n]]
    if i >= n * n:
        parts.append(_SYLLABLES[(i // (n * n)) % n])
    return "".join(parts)


def _offset_km(rng, lat, lon, spread_km, size):
    dlat = rng.normal(0, spread_km, size) / 111.195
    dlon = rng.normal(0, spread_km, size) / (111.195 * max(0.1, math.cos(math.radians(lat))))
    return np.clip(lat + dlat, -90, 90), np.clip(lon + dlon, -180, 180)


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> SyntheticData:
    """Seeded marketplace with planted topic structure.

    Every user and product has a latent topic. Words come from the topic's
    word list with probability equal to the relevant signal strength and
    from a shared background list otherwise. Image features are
    ``image_signal * centroid + N(0, I)``.

    ``modality_aliasing`` makes the two product modalities complementary.
    A product's topic words come from its text partner's list with
    probability ``aliasing / 2``, and its centroid blends in its image
    partner's centroid with weight ``aliasing / 2``. The two pairings
    differ, so at aliasing 1 text alone narrows a product to two topics,
    image alone to two other topics, and only both identify it. User
    keywords are never aliased. Demographics blend a
    topic pattern with uniform noise. Users impress recent products from
    within their radius and message each with probability ``p_hi`` on a
    topic match and ``p_lo`` otherwise.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    T = cfg.n_topics

    words = [_word(i) for i in rng.permutation(cfg.vocab_size)]
    per_topic = max(1, int(0.6 * cfg.vocab_size) // T)
    topic_words = [words[t * per_topic : (t + 1) * per_topic] for t in range(T)]
    background = words[T * per_topic :]
    topic_w = 1.0 / np.arange(1, per_topic + 1) ** 0.7
    topic_w /= topic_w.sum()
    bg_w = 1.0 / np.arange(1, len(background) + 1) ** 0.7
    bg_w /= bg_w.sum()

    def draw_words(topic: int, n: int, signal: float, partner: int | None = None) -> list[str]:
        from_topic = rng.random(n) < signal
        t_idx = rng.choice(per_topic, size=n, p=topic_w)
        b_idx = rng.choice(len(background), size=n, p=bg_w)
        source = [topic] * n
        if partner is not None:
            source = [partner if a else topic for a in rng.random(n) < cfg.modality_aliasing / 2]
        return [topic_words[s][i] if m else background[j] for m, s, i, j in zip(from_topic, source, t_idx, b_idx)]

    raw_centroids = rng.normal(0, 1, (T, cfg.d_img))
    half = cfg.modality_aliasing / 2
    centroids = np.stack([(1 - half) * raw_centroids[t] + half * raw_centroids[image_partner(t, T)] for t in range(T)])
    demo_pattern = rng.random((T, cfg.d_demo))
    cities = np.stack([rng.uniform(30, 48, cfg.n_cities), rng.uniform(-120, -75, cfg.n_cities)], axis=1)

    horizon = cfg.horizon_days * 86400.0
    user_topic = rng.integers(0, T, cfg.n_users)
    user_city = rng.integers(0, cfg.n_cities, cfg.n_users)
    users, user_topics = [], {}
    width_u = len(str(cfg.n_users - 1))
    for k in range(cfg.n_users):
        uid = f"u{k:0{width_u}d}"
        t = int(user_topic[k])
        c = cities[user_city[k]]
        lat, lon = _offset_km(rng, c[0], c[1], cfg.geo_spread_km, 1)
        demo = cfg.demo_mixing * demo_pattern[t] + (1 - cfg.demo_mixing) * rng.random(cfg.d_demo)
        users.append(
            UserProfile(
                user_id=uid,
                keywords=draw_words(t, int(rng.integers(5, 16)), cfg.keyword_signal),
                demographics=[round(float(x), 6) for x in demo],
                location=(round(float(lat[0]), 6), round(float(lon[0]), 6)),
                radius_km=round(float(rng.uniform(25, 60)), 3),
            )
        )
        user_topics[uid] = t

    prod_topic = rng.integers(0, T, cfg.n_products)
    prod_city = rng.integers(0, cfg.n_cities, cfg.n_products)
    created = np.floor(rng.uniform(0, horizon, cfg.n_products)) + cfg.start_time
    products, product_topics = [], {}
    width_p = len(str(cfg.n_products - 1))
    for k in range(cfg.n_products):
        pid = f"p{k:0{width_p}d}"
        t = int(prod_topic[k])
        c = cities[prod_city[k]]
        lat, lon = _offset_km(rng, c[0], c[1], cfg.geo_spread_km, 1)
        img = cfg.image_signal * centroids[t] + rng.normal(0, 1, cfg.d_img)
        products.append(
            ProductRecord(
                product_id=pid,
                title=" ".join(draw_words(t, int(rng.integers(3, 7)), cfg.text_signal, text_partner(t, T))),
                description=" ".join(draw_words(t, int(rng.integers(8, 17)), cfg.text_signal, text_partner(t, T))),
                image_features=[round(float(x), 5) for x in img],
                location=(round(float(lat[0]), 6), round(float(lon[0]), 6)),
                created_at=float(created[k]),
            )
        )
        product_topics[pid] = t

    plat = np.array([p.location[0] for p in products])
    plon = np.array([p.location[1] for p in products])
    order = np.lexsort((np.arange(cfg.n_products), created))
    events: list[EventRecord] = []
    t0 = cfg.start_time + 0.25 * horizon
    for k, u in enumerate(users):
        dist = haversine_km_many(u.location[0], u.location[1], plat[order], plon[order])
        eligible = order[dist <= u.radius_km]  # sorted by creation time
        e_created = created[eligible]
        seen: set[int] = set()
        times = np.sort(np.floor(rng.uniform(t0, cfg.start_time + horizon, cfg.impressions_per_user)))
        for ts in times:
            hi = int(np.searchsorted(e_created, ts, side="left"))
            lo = max(0, hi - cfg.impression_pool)
            if hi == lo:
                continue
            # a user sees each product at most once; give up after a few redraws
            for _ in range(8):
                j = int(eligible[rng.integers(lo, hi)])
                if j not in seen:
                    break
            else:
                continue
            seen.add(j)
            pid = products[j].product_id
            events.append(EventRecord("impression", u.user_id, pid, float(ts)))
            p_msg = cfg.p_hi if prod_topic[j] == user_topic[k] else cfg.p_lo
            if rng.random() < p_msg:
                events.append(EventRecord("message", u.user_id, pid, float(ts + rng.integers(60, 3600))))
    events.sort(key=lambda e: (e.timestamp, e.type, e.user_id, e.product_id))
    return SyntheticData(Catalog.from_records(users, products), events, user_topics, product_topics)
