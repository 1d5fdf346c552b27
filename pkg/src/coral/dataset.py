"""Review ingestion, k-core filtering, head/tail splitting and synthetic worlds."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

LIKE_THRESHOLD = 4
HEAD_FRACTION = 0.2
TAIL_TRAIN, TAIL_VAL = 0.70, 0.15


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: int
    timestamp: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    description: str


@dataclass(frozen=True)
class ReviewFields:
    user: str = "reviewerID"
    item: str = "asin"
    rating: str = "overall"
    timestamp: str = "unixReviewTime"
    meta_item: str = "asin"
    title: str = "title"
    description: str = "description"


@dataclass
class ParseStats:
    n_reviews: int = 0
    n_malformed_reviews: int = 0
    n_meta: int = 0
    n_malformed_meta: int = 0
    n_duplicates: int = 0


def binarize(rating):
    """1 iff the rating is strictly above 3."""
    if isinstance(rating, bool) or int(rating) != rating or not 1 <= rating <= 5:
        raise DatasetError(f"rating out of range: {rating!r}")
    return int(rating >= LIKE_THRESHOLD)


def _normalize_ws(text):
    return " ".join(str(text).split())


def _text_field(value):
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return _normalize_ws(" ".join(str(v) for v in value))
    return _normalize_ws(value)


def _parse_rating(value):
    r = float(value)
    if not r.is_integer() or not 1 <= r <= 5:
        raise ValueError(f"bad rating {value!r}")
    return int(r)


def _iter_lines(stream, what):
    try:
        for line in stream:
            yield line
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot read {what} stream: {exc}") from exc


def _check_malformed(n_bad, n_total, what):
    if n_total and n_bad / n_total > 0.5:
        raise DatasetError(
            f"{n_bad}/{n_total} {what} lines malformed; check field names or file format"
        )


def parse_records(review_stream, meta_stream=(), fields=ReviewFields()):
    """Parse line-delimited JSON reviews and item metadata.

    Returns ``(interactions, metas, stats)``. Duplicate (user, item) reviews keep the
    latest timestamp; malformed lines are skipped and counted.
    """
    stats = ParseStats()
    latest = {}
    for line in _iter_lines(review_stream, "review"):
        if not line.strip():
            continue
        stats.n_reviews += 1
        try:
            rec = json.loads(line)
            inter = Interaction(
                str(rec[fields.user]),
                str(rec[fields.item]),
                _parse_rating(rec[fields.rating]),
                int(rec[fields.timestamp]),
            )
        except (ValueError, KeyError, TypeError):
            stats.n_malformed_reviews += 1
            continue
        key = (inter.user_id, inter.item_id)
        prev = latest.get(key)
        if prev is not None:
            stats.n_duplicates += 1
            if inter.timestamp < prev.timestamp:
                continue
        latest[key] = inter
    _check_malformed(stats.n_malformed_reviews, stats.n_reviews, "review")

    metas = {}
    for line in _iter_lines(meta_stream, "metadata"):
        if not line.strip():
            continue
        stats.n_meta += 1
        try:
            rec = json.loads(line)
            item_id = str(rec[fields.meta_item])
        except (ValueError, KeyError, TypeError):
            stats.n_malformed_meta += 1
            continue
        desc = _text_field(rec.get(fields.description)) or _text_field(rec.get(fields.title))
        if not desc:
            stats.n_malformed_meta += 1
            continue
        metas[item_id] = ItemMeta(item_id, desc)
    _check_malformed(stats.n_malformed_meta, stats.n_meta, "metadata")

    if stats.n_malformed_reviews:
        logger.info("skipped %d malformed review lines", stats.n_malformed_reviews)
    interactions = sorted(latest.values(), key=lambda x: (x.user_id, x.item_id))
    return interactions, sorted(metas.values(), key=lambda m: m.item_id), stats


def kcore_filter(interactions, k=5):
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(interactions)
    while True:
        u_deg = Counter(x.user_id for x in current)
        i_deg = Counter(x.item_id for x in current)
        kept = [x for x in current if u_deg[x.user_id] >= k and i_deg[x.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def item_popularity(interactions):
    """Items ordered by interaction count descending, ties by item id."""
    counts = Counter(x.item_id for x in interactions)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def head_tail_split(interactions):
    ranked = item_popularity(interactions)
    if not ranked:
        raise DatasetError("no interactions to split")
    n_head = math.ceil(HEAD_FRACTION * len(ranked))
    head = frozenset(item for item, _ in ranked[:n_head])
    tail = frozenset(item for item, _ in ranked[n_head:])
    return head, tail


@dataclass
class DatasetSplit:
    head_items: frozenset
    tail_items: frozenset
    train: list
    val: list
    test: list
    seed: int
    n_dropped_val: int = 0
    n_dropped_test: int = 0

    def train_head(self):
        return [x for x in self.train if x.item_id in self.head_items]

    def tagged(self):
        for tag, rows in (("train", self.train), ("val", self.val), ("test", self.test)):
            for x in rows:
                yield tag, x


def make_splits(interactions, head_items, tail_items, seed):
    """Head interactions plus 70% of tail go to train; the rest of the tail halves into val/test.

    Val/test pairs whose user has no training interactions are dropped.
    """
    if not tail_items:
        raise DatasetError("tail item set is empty; nothing to evaluate on")
    if head_items & tail_items:
        raise DatasetError("head and tail item sets overlap")
    ordered = sorted(interactions, key=lambda x: (x.user_id, x.item_id))
    head_rows = [x for x in ordered if x.item_id in head_items]
    tail_rows = [x for x in ordered if x.item_id in tail_items]

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(tail_rows))
    n_val = round(TAIL_VAL * len(tail_rows))
    n_test = n_val
    n_train = len(tail_rows) - n_val - n_test
    shuffled = [tail_rows[j] for j in perm]
    train = head_rows + shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    test = shuffled[n_train + n_val :]

    train_users = {x.user_id for x in train}
    val_kept = [x for x in val if x.user_id in train_users]
    test_kept = [x for x in test if x.user_id in train_users]
    key = lambda x: (x.user_id, x.item_id)
    return DatasetSplit(
        head_items=frozenset(head_items),
        tail_items=frozenset(tail_items),
        train=sorted(train, key=key),
        val=sorted(val_kept, key=key),
        test=sorted(test_kept, key=key),
        seed=seed,
        n_dropped_val=len(val) - len(val_kept),
        n_dropped_test=len(test) - len(test_kept),
    )


class RatingMatrix:
    """Sparse user x item ratings over a dense integer index.

    The index may cover more entities than have stored ratings (e.g. users and items
    that only occur in evaluation pairs). ``rating`` returns None for unrated pairs.
    """

    def __init__(self, interactions, user_ids=None, item_ids=None):
        interactions = list(interactions)
        if user_ids is None:
            user_ids = sorted({x.user_id for x in interactions})
        if item_ids is None:
            item_ids = sorted({x.item_id for x in interactions})
        self.user_ids = list(user_ids)
        self.item_ids = list(item_ids)
        self.user_index = {u: k for k, u in enumerate(self.user_ids)}
        self.item_index = {i: k for k, i in enumerate(self.item_ids)}
        self.by_user = defaultdict(dict)
        self.by_item = defaultdict(dict)
        self.timestamps = {}
        for x in interactions:
            binarize(x.rating)
            try:
                u = self.user_index[x.user_id]
                i = self.item_index[x.item_id]
            except KeyError as exc:
                raise DatasetError(f"interaction outside the index: {exc}") from None
            self.by_user[u][i] = x.rating
            self.by_item[i][u] = x.rating
            self.timestamps[u, i] = x.timestamp

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.timestamps)

    def rating(self, user_idx, item_idx):
        return self.by_user.get(user_idx, {}).get(item_idx)

    def label(self, user_idx, item_idx):
        r = self.rating(user_idx, item_idx)
        return None if r is None else binarize(r)

    def triples(self):
        """(user_idx, item_idx, label) arrays in sorted order."""
        keys = sorted(self.timestamps)
        u = np.array([k[0] for k in keys], dtype=np.int64)
        i = np.array([k[1] for k in keys], dtype=np.int64)
        y = np.array([binarize(self.by_user[a][b]) for a, b in keys], dtype=np.float64)
        return u, i, y


def index_pairs(matrix, interactions):
    """Map interactions to (user_idx, item_idx, label) arrays on ``matrix``'s index."""
    u = np.array([matrix.user_index[x.user_id] for x in interactions], dtype=np.int64)
    i = np.array([matrix.item_index[x.item_id] for x in interactions], dtype=np.int64)
    y = np.array([binarize(x.rating) for x in interactions], dtype=np.int64)
    return u, i, y


@dataclass
class Dataset:
    """A split plus the train rating matrix and item descriptions on one shared index."""

    split: DatasetSplit
    matrix: RatingMatrix
    descriptions: dict
    all_interactions: list = field(default_factory=list)

    @classmethod
    def build(cls, interactions, metas, seed, k=5):
        filtered = kcore_filter(interactions, k)
        if not filtered:
            raise DatasetError(f"nothing left after {k}-core filtering")
        head, tail = head_tail_split(filtered)
        split = make_splits(filtered, head, tail, seed)
        return cls.from_split(split, metas, filtered)

    @classmethod
    def from_split(cls, split, metas, all_interactions=()):
        everything = list(split.train) + list(split.val) + list(split.test)
        users = sorted({x.user_id for x in everything})
        items = sorted(split.head_items | split.tail_items)
        matrix = RatingMatrix(split.train, users, items)
        by_id = {m.item_id: m.description for m in metas}
        descriptions = {matrix.item_index[i]: by_id[i] for i in items if i in by_id}
        return cls(split, matrix, descriptions, list(all_interactions))

    def head_matrix_triples(self):
        head_idx = {self.matrix.item_index[i] for i in self.split.head_items}
        u, i, y = self.matrix.triples()
        keep = np.array([b in head_idx for b in i], dtype=bool)
        return u[keep], i[keep], y[keep]

    def pairs(self, which):
        return index_pairs(self.matrix, getattr(self.split, which))

    def tail_train_pairs(self):
        tail = [x for x in self.split.train if x.item_id in self.split.tail_items]
        return index_pairs(self.matrix, tail)


def write_manifest(split, path):
    with open(path, "w", encoding="utf-8") as fh:
        for tag, x in split.tagged():
            row = {
                "user_id": x.user_id,
                "item_id": x.item_id,
                "rating": x.rating,
                "split": tag,
                "timestamp": x.timestamp,
                "head": x.item_id in split.head_items,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path, seed=0):
    rows = defaultdict(list)
    head, tail = set(), set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            x = Interaction(rec["user_id"], rec["item_id"], int(rec["rating"]), int(rec["timestamp"]))
            rows[rec["split"]].append(x)
            (head if rec["head"] else tail).add(x.item_id)
    return DatasetSplit(frozenset(head), frozenset(tail), rows["train"], rows["val"], rows["test"], seed)


def write_metas(metas, path):
    with open(path, "w", encoding="utf-8") as fh:
        for m in metas:
            fh.write(json.dumps({"item_id": m.item_id, "description": m.description}) + "\n")


def read_metas(path):
    with open(path, encoding="utf-8") as fh:
        return [ItemMeta(r["item_id"], r["description"]) for r in map(json.loads, fh)]


# --- synthetic worlds -------------------------------------------------------------

CATEGORY_NAMES = (
    "kitchen", "garden", "audio", "toys", "books", "office", "outdoor", "beauty",
    "tools", "pets", "games", "music",
)


@dataclass
class SyntheticWorld:
    """Hidden factors behind a generated dataset. Labels are sign(user . item)."""

    user_ids: list
    item_ids: list
    user_factors: np.ndarray
    item_factors: np.ndarray
    item_category: np.ndarray
    user_group: np.ndarray

    def category_of(self, item_id):
        return int(self.item_category[self._item_pos[item_id]])

    def true_label(self, user_id, item_id):
        u = self.user_factors[self._user_pos[user_id]]
        i = self.item_factors[self._item_pos[item_id]]
        return int(float(u @ i) >= 0.0)

    def __post_init__(self):
        self._user_pos = {u: k for k, u in enumerate(self.user_ids)}
        self._item_pos = {i: k for k, i in enumerate(self.item_ids)}


def zipf_counts(n_items, total, zipf_s, min_count, max_count):
    """Per-rank exposure counts; non-increasing in rank by construction."""
    w = (np.arange(1, n_items + 1, dtype=np.float64)) ** (-zipf_s)
    counts = np.round(total * w / w.sum()).astype(np.int64)
    return np.clip(counts, min_count, max_count)


def generate_synthetic(
    seed,
    n_users,
    n_items,
    latent_dim=8,
    zipf_s=1.0,
    n_categories=4,
    per_user=20,
    min_count=6,
    locality=4.0,
    category_noise=0.0,
):
    """Seeded synthetic review world.

    Item ``k`` has popularity rank ``k``. An item's category is the argmax of the first
    ``n_categories`` coordinates of its hidden factor plus ``category_noise`` Gaussian
    jitter. Raters of an item are drawn with
    weight exp(locality * |cos(user, item)|), so users mostly rate items whose factors are
    nearly parallel or anti-parallel to their own (both likes and dislikes stay common).
    Ratings are 5 when the hidden dot product is >= 0 and 1 otherwise.
    """
    if min(n_users, n_items, latent_dim, n_categories) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    user_f = rng.standard_normal((n_users, latent_dim))
    item_f = rng.standard_normal((n_items, latent_dim))
    n_cat = min(n_categories, latent_dim)
    jitter = category_noise * rng.standard_normal((n_items, n_cat))
    item_cat = np.argmax(item_f[:, :n_cat] + jitter, axis=1)
    user_group = np.argmax(user_f[:, :n_cat], axis=1)

    width_u = len(str(n_users))
    width_i = len(str(n_items))
    user_ids = [f"U{k:0{width_u}d}" for k in range(n_users)]
    item_ids = [f"I{k:0{width_i}d}" for k in range(n_items)]

    counts = zipf_counts(n_items, per_user * n_users, zipf_s, min(min_count, n_users), n_users)
    interactions = []
    unit_u = user_f / np.linalg.norm(user_f, axis=1, keepdims=True)
    unit_i = item_f / np.linalg.norm(item_f, axis=1, keepdims=True)
    for i in range(n_items):
        w = np.exp(locality * np.abs(unit_u @ unit_i[i]))
        raters = rng.choice(n_users, size=int(counts[i]), replace=False, p=w / w.sum())
        stamps = rng.integers(1_500_000_000, 1_600_000_000, size=raters.size)
        for u, ts in zip(np.sort(raters), stamps):
            rating = 5 if float(user_f[u] @ item_f[i]) >= 0.0 else 1
            interactions.append(Interaction(user_ids[u], item_ids[i], rating, int(ts)))
    interactions.sort(key=lambda x: (x.user_id, x.item_id))

    metas = []
    for i in range(n_items):
        name = CATEGORY_NAMES[item_cat[i] % len(CATEGORY_NAMES)]
        metas.append(ItemMeta(item_ids[i], f"{name} product {item_ids[i]}"))
    world = SyntheticWorld(user_ids, item_ids, user_f, item_f, item_cat, user_group)
    return interactions, metas, world


def save_world(world, path):
    np.savez(
        path,
        user_ids=np.array(world.user_ids),
        item_ids=np.array(world.item_ids),
        user_factors=world.user_factors,
        item_factors=world.item_factors,
        item_category=world.item_category,
        user_group=world.user_group,
    )


def load_world(path):
    with np.load(path, allow_pickle=False) as z:
        return SyntheticWorld(
            [str(u) for u in z["user_ids"]],
            [str(i) for i in z["item_ids"]],
            z["user_factors"],
            z["item_factors"],
            z["item_category"],
            z["user_group"],
        )


def write_review_jsonl(interactions, metas, review_path, meta_path, fields=ReviewFields()):
    """Write interactions and metadata in the review-dump layout ``parse_records`` reads."""
    with open(review_path, "w", encoding="utf-8") as fh:
        for x in interactions:
            rec = {fields.user: x.user_id, fields.item: x.item_id, fields.rating: float(x.rating), fields.timestamp: x.timestamp}
            fh.write(json.dumps(rec) + "\n")
    with open(meta_path, "w", encoding="utf-8") as fh:
        for m in metas:
            fh.write(json.dumps({fields.meta_item: m.item_id, fields.title: m.description}) + "\n")
