"""User/item embedding tables and the collaborative-filtering backbones that warm-start them."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_X_y

from .nn import FeedForwardNet, adam_step, AdamState, sigmoid

MAGIC = b"CRLE"
VERSION = 1


class EmbeddingFormatError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EmbeddingTable:
    user: np.ndarray
    item: np.ndarray
    user_bias: np.ndarray = None
    item_bias: np.ndarray = None
    global_bias: float = 0.0
    provenance: str = "random"
    # wide+deep tower; kept in memory only, never serialized
    deep: FeedForwardNet = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.user = np.ascontiguousarray(self.user, dtype=np.float32)
        self.item = np.ascontiguousarray(self.item, dtype=np.float32)
        if self.user.ndim != 2 or self.item.ndim != 2 or self.user.shape[1] != self.item.shape[1]:
            raise ValueError("user and item matrices must be 2-D with equal width")
        if self.user_bias is None:
            self.user_bias = np.zeros(self.n_users, dtype=np.float32)
        if self.item_bias is None:
            self.item_bias = np.zeros(self.n_items, dtype=np.float32)
        self.user_bias = np.ascontiguousarray(self.user_bias, dtype=np.float32)
        self.item_bias = np.ascontiguousarray(self.item_bias, dtype=np.float32)
        self.global_bias = float(np.float32(self.global_bias))
        for arr in (self.user, self.item, self.user_bias, self.item_bias):
            if not np.all(np.isfinite(arr)):
                raise ValueError("embedding table contains non-finite values")

    @property
    def dim(self):
        return self.user.shape[1]

    @property
    def n_users(self):
        return self.user.shape[0]

    @property
    def n_items(self):
        return self.item.shape[0]

    def max_abs(self):
        return float(max(np.abs(self.user).max(), np.abs(self.item).max()))


def init_random(seed, n_users, n_items, d=128):
    """Standard-normal user and item vectors, zero biases."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    user = rng.standard_normal((n_users, d))
    item = rng.standard_normal((n_items, d))
    return EmbeddingTable(user, item, provenance="random")


def predict_affinity(table, user_idx, item_idx):
    """sigmoid of the table's score for one or many (user, item) pairs."""
    u = np.asarray(user_idx)
    i = np.asarray(item_idx)
    if np.any(u < 0) or np.any(u >= table.n_users) or np.any(i < 0) or np.any(i >= table.n_items):
        raise IndexError("user or item index outside the table")
    U = table.user[u].astype(np.float64)
    V = table.item[i].astype(np.float64)
    score = (U * V).sum(axis=-1) + table.user_bias[u] + table.item_bias[i] + table.global_bias
    if table.deep is not None:
        deep = table.deep.forward(np.concatenate([U, V], axis=-1))
        score = score + deep[..., 0]
    p = sigmoid(np.atleast_1d(np.asarray(score, dtype=np.float64)))
    return float(p[0]) if np.ndim(score) == 0 else p


# --- backbones ---------------------------------------------------------------------


class LogisticMF(BaseEstimator):
    """Logistic matrix factorization trained with Adam on binary cross-entropy.

    X holds (user_idx, item_idx) rows, y the binary labels. The score is
    ``u . i + b_u + b_i + b_0``.
    """

    def __init__(
        self,
        n_users,
        n_items,
        d=128,
        epochs=30,
        lr=0.001,
        batch_size=256,
        seed=0,
        trainable=None,
        init_table=None,
    ):
        self.n_users = n_users
        self.n_items = n_items
        self.d = d
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.trainable = trainable
        self.init_table = init_table

    provenance = "mf"

    def _init_params(self):
        table = self.init_table
        if table is None:
            table = init_random(self.seed, self.n_users, self.n_items, self.d)
        params = {
            "user": table.user.astype(np.float64),
            "item": table.item.astype(np.float64),
            "user_bias": table.user_bias.astype(np.float64),
            "item_bias": table.item_bias.astype(np.float64),
            "global_bias": np.array([table.global_bias], dtype=np.float64),
        }
        return params, None

    def _deep_forward(self, deep, UV, with_cache=False):
        return None

    def loss_and_grads(self, params, deep, u, i, y):
        """Mean BCE and its gradient for every parameter (dict, plus deep-net list)."""
        U, V = params["user"][u], params["item"][i]
        score = (U * V).sum(axis=1) + params["user_bias"][u] + params["item_bias"][i]
        score = score + params["global_bias"][0]
        acts = None
        if deep is not None:
            out, acts = deep.forward(np.concatenate([U, V], axis=1), return_cache=True)
            score = score + out[:, 0]
        n = len(y)
        loss = float(np.mean(np.logaddexp(0.0, score) - y * score))
        g = (sigmoid(score) - y) / n
        gU = g[:, None] * V
        gV = g[:, None] * U
        deep_grads = None
        if deep is not None:
            deep_grads, g_in = deep.backward(acts, g[:, None])
            gU = gU + g_in[:, : self.d]
            gV = gV + g_in[:, self.d :]
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        np.add.at(grads["user"], u, gU)
        np.add.at(grads["item"], i, gV)
        np.add.at(grads["user_bias"], u, g)
        np.add.at(grads["item_bias"], i, g)
        grads["global_bias"][0] = g.sum()
        return loss, grads, deep_grads

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        if X.shape[1] != 2:
            raise ValueError("X must have two columns: user_idx, item_idx")
        if len(y) == 0:
            raise ValueError("empty training set")
        u, i = X[:, 0], X[:, 1]
        y = y.astype(np.float64)
        params, deep = self._init_params()
        trainable = set(self.trainable) if self.trainable is not None else set(params) | {"deep"}
        names = [k for k in params if k in trainable]
        opt = AdamState()
        rng = np.random.default_rng(self.seed + 1)
        batch = len(y) if not self.batch_size else int(self.batch_size)

        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), batch):
                idx = order[start : start + batch]
                loss, grads, deep_grads = self.loss_and_grads(params, deep, u[idx], i[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"BCE became {loss} in epoch {epoch}; lower lr")
                plist = [params[k] for k in names]
                glist = [grads[k] for k in names]
                if deep is not None and "deep" in trainable:
                    plist += deep.params
                    glist += deep_grads
                adam_step(plist, glist, opt, self.lr)
            self.loss_curve_.append(self._full_loss(params, deep, u, i, y))

        self.params_ = params
        self.deep_ = deep
        self.table_ = EmbeddingTable(
            params["user"],
            params["item"],
            params["user_bias"],
            params["item_bias"],
            params["global_bias"][0],
            provenance=self.provenance if self.epochs else "random",
            deep=deep,
        )
        return self

    def _full_loss(self, params, deep, u, i, y):
        return self.loss_and_grads(params, deep, u, i, y)[0]

    def predict_proba(self, X):
        check_is_fitted(self, "table_")
        X = np.asarray(X, dtype=np.int64)
        p = predict_affinity(self.table_, X[:, 0], X[:, 1])
        return np.column_stack([1.0 - p, p])


class WideAndDeep(LogisticMF):
    """Wide part (biases plus the u . i cross term) with a ReLU tower over [u; i].

    With ``hidden_sizes=()`` there is no tower and the score equals LogisticMF's.
    """

    def __init__(
        self,
        n_users,
        n_items,
        d=128,
        hidden_sizes=(64,),
        epochs=30,
        lr=0.001,
        batch_size=256,
        seed=0,
        trainable=None,
        init_table=None,
    ):
        super().__init__(n_users, n_items, d, epochs, lr, batch_size, seed, trainable, init_table)
        self.hidden_sizes = hidden_sizes

    provenance = "widedeep"

    def _init_params(self):
        params, _ = super()._init_params()
        deep = None
        if self.hidden_sizes:
            sizes = [2 * self.d, *self.hidden_sizes, 1]
            deep = FeedForwardNet(sizes, seed=self.seed + 7)
        return params, deep


def _table_from(est, X, y):
    return est.fit(X, y).table_


def pretrain_mf(u, i, y, n_users, n_items, d=128, epochs=30, lr=0.001, seed=0, batch_size=256):
    X = np.column_stack([u, i])
    return _table_from(LogisticMF(n_users, n_items, d, epochs, lr, batch_size, seed), X, y)


def pretrain_widedeep(
    u, i, y, n_users, n_items, d=128, hidden_sizes=(64,), epochs=30, lr=0.001, seed=0, batch_size=256
):
    X = np.column_stack([u, i])
    est = WideAndDeep(n_users, n_items, d, hidden_sizes, epochs, lr, batch_size, seed)
    return _table_from(est, X, y)


# --- binary format -----------------------------------------------------------------

_HEADER = struct.Struct("<4sBIII")


def dumps_table(table):
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, table.dim, table.n_users, table.n_items))
    for arr in (table.user, table.item, table.user_bias, table.item_bias):
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(np.array([table.global_bias], dtype="<f4").tobytes())
    tag = table.provenance.encode("utf-8")
    buf.write(struct.pack("<H", len(tag)) + tag)
    return buf.getvalue()


def loads_table(data):
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError("truncated embedding file header")
    magic, version, d, n_users, n_items = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported embedding file version {version} (expected {VERSION})")
    n_floats = (n_users + n_items) * d + n_users + n_items + 1
    pos = _HEADER.size
    end = pos + 4 * n_floats
    if len(data) < end + 2:
        raise EmbeddingFormatError("truncated embedding file body")
    floats = np.frombuffer(data, dtype="<f4", count=n_floats, offset=pos).astype(np.float32)
    (tag_len,) = struct.unpack_from("<H", data, end)
    if len(data) != end + 2 + tag_len:
        raise EmbeddingFormatError("embedding file length does not match its header")
    tag = data[end + 2 :].decode("utf-8")
    a = 0
    user = floats[a : a + n_users * d].reshape(n_users, d); a += n_users * d
    item = floats[a : a + n_items * d].reshape(n_items, d); a += n_items * d
    ub = floats[a : a + n_users]; a += n_users
    ib = floats[a : a + n_items]; a += n_items
    return EmbeddingTable(user, item, ub, ib, floats[a], provenance=tag)


def save_table(table, path):
    with open(path, "wb") as fh:
        fh.write(dumps_table(table))


def load_table(path):
    with open(path, "rb") as fh:
        return loads_table(fh.read())
