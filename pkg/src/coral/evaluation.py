"""Pointwise metrics, fixed-round policy evaluation and arm comparisons."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .ddpg import actor_forward

logger = logging.getLogger(__name__)

ARMS = ("no_retrieval", "random_retrieval", "trained_warm", "trained_random_init")
REPORT_COLUMNS = ("arm", "seed", "round", "auc", "f1", "n_pairs", "degraded_count")


class MetricError(ValueError):
    pass


def auc(scores, labels):
    """Mann-Whitney AUC; tied pos/neg pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(scores, labels, threshold=0.5, return_flag=False):
    """F1 of ``score >= threshold``; 0 (flagged) when precision or recall is undefined."""
    pred = np.asarray(scores) >= threshold
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    # tp == 0 covers every zero-division case (P, R or the harmonic mean)
    if tp == 0:
        value, flag = 0.0, True
    else:
        # equal to 2PR/(P+R) but with a single rounding step
        value, flag = 2 * tp / (2 * tp + fp + fn), False
    return (value, flag) if return_flag else value


@dataclass
class EvalRecord:
    target: tuple
    y: int
    probs: list
    retrieved: list
    degraded: int = 0


@dataclass
class EvalResult:
    per_round: list = field(default_factory=list)  # (round, auc, f1)
    records: list = field(default_factory=list)

    def probs(self):
        return np.array([r.probs for r in self.records])

    def labels(self):
        return np.array([r.y for r in self.records])


def actor_policy(actor, clip, squash=False):
    return lambda state: actor_forward(actor, state.s, clip, squash)


def random_policy(dim, clip, seed):
    rng = np.random.default_rng(seed)
    return lambda state: rng.uniform(-clip, clip, size=dim)


def _safe_auc(scores, labels):
    try:
        return auc(scores, labels)
    except MetricError:
        return float("nan")


def evaluate_policy(policy, env, pairs, labels, rounds=5):
    """Run exactly ``rounds`` retrieval steps per pair without early stopping.

    ``policy`` maps an EpisodeState to an action, or is None for the no-retrieval arm
    (then p_0 is repeated for every round index).
    """
    records = []
    for (u, i), y in zip(np.asarray(pairs), np.asarray(labels)):
        state = env.reset((int(u), int(i)), int(y))
        retrieved = []
        probs = [state.p_current]
        for _ in range(rounds):
            if policy is None:
                probs.append(probs[0])
                continue
            state, _, _ = env.step(state, policy(state), early_stop=False)
            probs.append(state.p_current)
            retrieved.append((state.ctx.coll_users[-1], state.ctx.coll_items[-1]))
        records.append(EvalRecord((int(u), int(i)), int(y), probs, retrieved, state.degraded))
    result = EvalResult(records=records)
    if records:
        P = result.probs()
        Y = result.labels()
        for k in range(rounds + 1):
            result.per_round.append((k, _safe_auc(P[:, k], Y), f1(P[:, k], Y)))
    return result


def report_rows(arm, seed, result):
    degraded = sum(1 for r in result.records if r.degraded)
    return [
        {"arm": arm, "seed": seed, "round": k, "auc": a, "f1": f, "n_pairs": len(result.records), "degraded_count": degraded}
        for k, a, f in result.per_round
    ]


def write_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in REPORT_COLUMNS})


def median_by(rows, arm, round_idx, key="auc"):
    vals = [r[key] for r in rows if r["arm"] == arm and r["round"] == round_idx]
    return float(np.median(vals)) if vals else float("nan")


def episodes_to_fraction(returns, fraction=0.8, window=50):
    """First episode at which the moving-average return reaches ``fraction`` of its final value."""
    r = np.asarray(returns, dtype=np.float64)
    if len(r) == 0:
        return 0
    w = min(window, len(r))
    smooth = np.convolve(r, np.ones(w) / w, mode="valid")
    final = smooth[-1]
    if final <= 0:
        return len(r)
    hits = np.nonzero(smooth >= fraction * final)[0]
    return int(hits[0] + w - 1)
