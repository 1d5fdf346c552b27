"""Frozen yes/no oracles with a persistent append-only cache.

``Oracle.query`` never raises on backend trouble: after the retries are exhausted it
returns p=0.5 flagged as degraded, which yields zero marginal reward for that step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass

import numpy as np

from .prompting import Y_THRESH

logger = logging.getLogger(__name__)

YES_VARIANTS = ("Yes", "yes", "YES")
NO_VARIANTS = ("No", "no", "NO")
API_KEY_ENV = "CORAL_API_KEY"


class OracleError(RuntimeError):
    pass


class OracleConfigError(OracleError):
    pass


@dataclass(frozen=True)
class OracleResponse:
    p_yes: float
    source: str
    degraded: bool = False


def cache_key(oracle_id, prompt):
    h = hashlib.sha256()
    h.update(oracle_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


class OracleCache:
    """In-memory map mirrored to an append-only JSON-lines file (when a path is given)."""

    def __init__(self, path=None):
        self.path = path
        self._data = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._data[rec["key_hex"]] = float(rec["p_yes"])

    def __len__(self):
        return len(self._data)

    def get(self, key):
        return self._data.get(key)

    def put(self, key, p_yes, oracle_id):
        with self._lock:
            if key in self._data:
                return
            self._data[key] = p_yes
            if self.path:
                rec = {"key_hex": key, "p_yes": p_yes, "oracle_id": oracle_id, "unix_time": int(time.time())}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")


class Oracle:
    """Base class: subclasses implement ``identity`` and ``_backend(prompt, ctx)``."""

    identity = "oracle"
    source = "remote"

    def __init__(self, cache=None, retries=3):
        self.cache = cache if cache is not None else OracleCache()
        self.retries = retries
        self.backend_calls = 0
        self._inflight = {}
        self._inflight_lock = threading.Lock()

    def _backend(self, prompt, ctx):
        raise NotImplementedError

    def __deepcopy__(self, memo):
        # a handle on a frozen service and its cache; copies share both
        return self

    def query(self, prompt, ctx=None):
        if not prompt:
            raise OracleError("empty prompt")
        key = cache_key(self.identity, prompt)
        hit = self.cache.get(key)
        if hit is not None:
            return OracleResponse(hit, "cache")

        with self._inflight_lock:
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = self._inflight[key] = Future()
        if not owner:
            return fut.result()

        try:
            resp = self._dispatch(key, prompt, ctx)
            fut.set_result(resp)
            return resp
        finally:
            with self._inflight_lock:
                self._inflight.pop(key, None)

    def _dispatch(self, key, prompt, ctx):
        last = None
        for attempt in range(self.retries):
            self.backend_calls += 1
            try:
                p = float(self._backend(prompt, ctx))
            except Exception as exc:  # any backend failure degrades, never aborts an episode
                last = exc
                logger.warning("oracle attempt %d failed: %s", attempt + 1, exc)
                continue
            if not 0.0 <= p <= 1.0 or math.isnan(p):
                last = OracleError(f"backend returned p={p}")
                continue
            self.cache.put(key, p, self.identity)
            return OracleResponse(p, self.source)
        logger.warning("oracle degraded after %d attempts: %s", self.retries, last)
        return OracleResponse(0.5, self.source, degraded=True)


# --- simulated backend ------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def simulated_query(ctx, item_category, w_sem=1.0, w_coll=3.0, y_thresh=Y_THRESH):
    """Yes-probability computed only from the evidence inside ``ctx``.

    ``item_category`` maps item_idx to a category id. The semantic term counts liked
    minus disliked supporting items in the target's category; the collaborative term is a
    similarity-weighted vote of retrieved users who visibly rated the target item.
    """
    n_items = len(item_category)
    for j in (ctx.target.item, *ctx.supp_item_ids, *ctx.coll_items):
        if not 0 <= j < n_items:
            raise OracleError(f"item {j} is outside the simulated world")

    target_cat = item_category[ctx.target.item]
    supp = dict(ctx.supp_items)
    sem = 0
    for i, r in ctx.supp_items:
        if item_category[i] == target_cat:
            sem += 1 if r >= y_thresh else -1
    sem /= 1 + len(supp)

    target_visible = ctx.target.item in ctx.coll_items
    num = 0.0
    den = 0.0
    for v in ctx.coll_users:
        agree = disagree = 0
        for j in ctx.coll_items:
            if j not in supp:
                continue
            rv = ctx.evidence.get((v, j))
            if rv is None:
                continue
            if (supp[j] >= y_thresh) == (rv >= y_thresh):
                agree += 1
            else:
                disagree += 1
        s = (agree - disagree) / max(1, agree + disagree)
        den += abs(s)
        if target_visible:
            rt = ctx.evidence.get((v, ctx.target.item))
            if rt is not None:
                num += s * (1 if rt >= y_thresh else -1)
    coll = num / (0.01 + den)
    return _sigmoid(w_sem * sem + w_coll * coll)


class SimulatedOracle(Oracle):
    source = "simulated"

    def __init__(self, item_category, w_sem=1.0, w_coll=3.0, y_thresh=Y_THRESH, world_tag="world", cache=None):
        super().__init__(cache=cache, retries=1)
        self.item_category = np.asarray(item_category)
        self.w_sem = w_sem
        self.w_coll = w_coll
        self.y_thresh = y_thresh
        self.identity = f"simulated:{world_tag}:w_sem={w_sem}:w_coll={w_coll}:y={y_thresh}"

    def query(self, prompt, ctx=None):
        if ctx is None:
            raise OracleError("the simulated oracle needs the structured context")
        return super().query(prompt, ctx)

    def _dispatch(self, key, prompt, ctx):
        # simulated failures are bugs, not transient outages: let them raise
        self.backend_calls += 1
        p = simulated_query(ctx, self.item_category, self.w_sem, self.w_coll, self.y_thresh)
        self.cache.put(key, p, self.identity)
        return OracleResponse(p, self.source)


class ConstantOracle(Oracle):
    """Always answers ``p``; handy for ablations and tests."""

    source = "simulated"

    def __init__(self, p=0.5, cache=None):
        super().__init__(cache=cache, retries=1)
        self.p = p
        self.identity = f"constant:{p}"

    def _backend(self, prompt, ctx):
        return self.p


class FactorOracle(Oracle):
    """Diagnostic oracle that sees the hidden factors: p = sigmoid(scale * u . i)."""

    source = "simulated"

    def __init__(self, user_factors, item_factors, scale=4.0, cache=None):
        super().__init__(cache=cache, retries=1)
        self.user_factors = np.asarray(user_factors, dtype=np.float64)
        self.item_factors = np.asarray(item_factors, dtype=np.float64)
        self.scale = scale
        self.identity = f"factors:{scale}"

    def _backend(self, prompt, ctx):
        u, i = ctx.target
        return _sigmoid(self.scale * float(self.user_factors[u] @ self.item_factors[i]))


# --- remote backend ----------------------------------------------------------------


def _entries(token_logprobs):
    for entry in token_logprobs:
        if isinstance(entry, dict):
            yield entry["token"], float(entry["logprob"])
        else:
            tok, lp = entry
            yield tok, float(lp)


def remote_extract_p(token_logprobs):
    """P(Yes) renormalized over {Yes, No}, summing case variants of each answer."""
    p_yes = p_no = 0.0
    seen_yes = seen_no = False
    for tok, lp in _entries(token_logprobs):
        t = tok.strip()
        if t in YES_VARIANTS:
            p_yes += math.exp(lp)
            seen_yes = True
        elif t in NO_VARIANTS:
            p_no += math.exp(lp)
            seen_no = True
    if not (seen_yes and seen_no):
        raise OracleError("top logprobs lack a Yes or a No variant")
    return p_yes / (p_yes + p_no)


class RemoteChatOracle(Oracle):
    """Chat-completion endpoint asked for one token with top-k log-probabilities."""

    source = "remote"

    def __init__(self, url, model, api_key=None, top_logprobs=10, timeout=60.0, retries=3, cache=None, client=None):
        super().__init__(cache=cache, retries=retries)
        self.url = url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise OracleConfigError(f"no API key; set {API_KEY_ENV}")
        self.top_logprobs = top_logprobs
        self.timeout = timeout
        self.identity = f"remote:{model}"
        self._client = client

    def request_body(self, prompt):
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": 1,
            "logprobs": True,
            "top_logprobs": self.top_logprobs,
        }

    def _backend(self, prompt, ctx):
        import httpx

        client = self._client or httpx
        resp = client.post(
            self.url,
            json=self.request_body(prompt),
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        first = resp.json()["choices"][0]["logprobs"]["content"][0]
        return remote_extract_p(first["top_logprobs"])
