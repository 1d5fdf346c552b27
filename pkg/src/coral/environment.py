"""Retrieval MDP: nearest-neighbour retrieval from continuous queries, oracle reward, episodes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .prompting import M_MAX, Y_THRESH, build_context, render_prompt


class RetrievalError(RuntimeError):
    pass


def compute_reward(p_prev, p_cur, y_gt):
    """Marginal information gain: drop in |p - y| from the previous step."""
    return abs(p_prev - y_gt) - abs(p_cur - y_gt)


def nearest(matrix, query, excluded=()):
    """Row index minimising Euclidean distance to ``query``; ties go to the smaller index."""
    d2 = np.sum((matrix - query) ** 2, axis=1)
    if excluded:
        d2[list(excluded)] = np.inf
    k = int(np.argmin(d2))
    if not np.isfinite(d2[k]):
        raise RetrievalError("no eligible candidates left")
    return k


def retrieve(action, table, retrieved_users, retrieved_items, target, user_matrix=None, item_matrix=None):
    """Nearest eligible user to the first half of ``action`` and item to the second half.

    The target user and already-retrieved entities are ineligible; the target item is not.
    """
    action = np.asarray(action, dtype=np.float64)
    d = table.dim
    if action.shape != (2 * d,):
        raise ValueError(f"action must have length {2 * d}")
    U = user_matrix if user_matrix is not None else table.user.astype(np.float64)
    V = item_matrix if item_matrix is not None else table.item.astype(np.float64)
    u = nearest(U, action[:d], set(retrieved_users) | {target[0]})
    i = nearest(V, action[d:], set(retrieved_items))
    return u, i


class TransitionEncoder:
    """Frozen random affine map + tanh from [s; u'; i'] (4d) to the next state (2d).

    ``anchor`` set: the block acting on s becomes ``anchor * I`` and only the
    retrieved-entity blocks are random, so the state keeps a trace of the target.
    """

    def __init__(self, d, seed=0, gain=1.0, anchor=None):
        rng = np.random.default_rng(seed)
        self.d = d
        self.seed = seed
        self.anchor = anchor
        if anchor is None:
            self.W = rng.standard_normal((2 * d, 4 * d)) * (gain / np.sqrt(4 * d))
        else:
            self.W = np.zeros((2 * d, 4 * d))
            self.W[:, : 2 * d] = anchor * np.eye(2 * d)
            self.W[:, 2 * d :] = rng.standard_normal((2 * d, 2 * d)) * (gain / np.sqrt(2 * d))
        self.b = rng.standard_normal(2 * d) * 0.1
        self.W.setflags(write=False)
        self.b.setflags(write=False)

    def encode(self, s, u_emb, i_emb):
        x = np.concatenate([np.asarray(s, np.float64), np.asarray(u_emb, np.float64), np.asarray(i_emb, np.float64)])
        if x.shape != (4 * self.d,):
            raise ValueError(f"transition input must have length {4 * self.d}, got {x.shape}")
        return np.tanh(self.W @ x + self.b)


@dataclass(frozen=True)
class EpisodeState:
    s: np.ndarray
    ctx: object
    p_current: float
    y: int
    t: int = 0
    done: bool = False
    p_history: tuple = ()
    degraded: int = 0


@dataclass
class EnvConfig:
    max_steps: int = 10
    early_stop: float | None = 0.1
    y_thresh: int = Y_THRESH
    m_max: int = M_MAX


@dataclass
class RetrievalEnv:
    """One environment per (table, matrix, oracle). Episodes are independent values."""

    table: object
    matrix: object
    descriptions: dict
    oracle: object
    encoder: TransitionEncoder
    config: EnvConfig = field(default_factory=EnvConfig)
    trace: list | None = None

    def __post_init__(self):
        self._U = self.table.user.astype(np.float64)
        self._V = self.table.item.astype(np.float64)
        self.clip = self.table.max_abs()
        if self.encoder.d != self.table.dim:
            raise ValueError("encoder and embedding table disagree on d")

    @property
    def state_dim(self):
        return 2 * self.table.dim

    def _ask(self, ctx):
        prompt = render_prompt(ctx, self.descriptions, self.config.y_thresh)
        return self.oracle.query(prompt, ctx)

    def reset(self, target, y):
        """Start an episode at s_0 = [u; i] with only the user's own ratings in the prompt."""
        u, i = int(target[0]), int(target[1])
        ctx = build_context((u, i), self.matrix, self.config.m_max)
        resp = self._ask(ctx)
        s0 = np.concatenate([self._U[u], self._V[i]])
        return EpisodeState(s0, ctx, resp.p_yes, int(y), 0, False, (resp.p_yes,), int(resp.degraded))

    def step(self, state, action, early_stop=True):
        if state.done:
            raise RuntimeError("episode already finished")
        a = np.clip(np.asarray(action, dtype=np.float64), -self.clip, self.clip)
        ctx = state.ctx
        u, i = retrieve(a, self.table, ctx.coll_users, ctx.coll_items, ctx.target, self._U, self._V)
        ctx = ctx.with_retrieved(u, i, self.matrix)
        resp = self._ask(ctx)
        r = compute_reward(state.p_current, resp.p_yes, state.y)
        s_next = self.encoder.encode(state.s, self._U[u], self._V[i])
        t = state.t + 1
        done = t >= self.config.max_steps
        if early_stop and self.config.early_stop is not None:
            done = done or abs(resp.p_yes - state.y) < self.config.early_stop
        if self.trace is not None:
            self.trace.append(
                {"target": list(ctx.target), "step": t, "retrieved_user": u, "retrieved_item": i, "p": resp.p_yes, "r": r}
            )
        new = replace(
            state,
            s=s_next,
            ctx=ctx,
            p_current=resp.p_yes,
            t=t,
            done=done,
            p_history=state.p_history + (resp.p_yes,),
            degraded=state.degraded + int(resp.degraded),
        )
        return new, r, done


def init_episode(env, target, y):
    return env.reset(target, y)


def write_trace(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
