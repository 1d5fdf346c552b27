import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import brute
from coral.embeddings import EmbeddingTable
from coral.environment import (
    EnvConfig,
    RetrievalEnv,
    RetrievalError,
    TransitionEncoder,
    compute_reward,
    nearest,
    retrieve,
    write_trace,
)
from coral.oracle import ConstantOracle, Oracle


def _table(users, items):
    return EmbeddingTable(np.array(users, dtype=float), np.array(items, dtype=float))


def test_retrieve_examples():
    t = _table([[5, 5], [0, 0], [1, 0]], [[0, 0], [3, 3]])
    q = [0.9, 0.1, 2.9, 3.1]
    assert retrieve(q, t, (), (), (0, 0)) == (2, 1)
    assert retrieve(q, t, (2,), (1,), (0, 0)) == (1, 0)


def test_retrieve_ties_and_target_item():
    t = _table([[9, 9], [-1, 0], [1, 0]], [[-1, 0], [1, 0]])
    # users 1 and 2 are equidistant from the origin; so are items 0 and 1
    assert retrieve([0, 0, 0, 0], t, (), (), (0, 1)) == (1, 0)
    # the target item stays eligible, the target user does not
    assert retrieve([9, 9, 1, 0], t, (), (), (0, 1)) == (2, 1)


def test_retrieve_exhausted_and_shape():
    t = _table([[0, 0], [1, 1]], [[0, 0]])
    with pytest.raises(RetrievalError):
        retrieve([0, 0, 0, 0], t, (1,), (), (0, 0))
    with pytest.raises(ValueError):
        retrieve([0, 0, 0], t, (), (), (0, 0))


@given(st.integers(0, 2**32 - 1))
def test_nearest_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    rows = rng.integers(-3, 4, size=(30, 3)).astype(float)  # small grid -> frequent ties
    q = rng.integers(-3, 4, size=3).astype(float)
    excluded = set(rng.choice(30, size=int(rng.integers(0, 10)), replace=False).tolist())
    assert nearest(rows, q, excluded) == brute.nearest(rows, q, excluded)


@pytest.mark.parametrize("prev,cur,y,r", [(0.5, 0.9, 1, 0.4), (0.3, 0.3, 1, 0.0), (0.2, 0.6, 0, -0.4)])
def test_reward_examples(prev, cur, y, r):
    assert compute_reward(prev, cur, y) == pytest.approx(r, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from([0, 1]))
def test_reward_bounded(prev, cur, y):
    assert -1.0 <= compute_reward(prev, cur, y) <= 1.0


def test_encoder_frozen_bounded_and_seeded():
    d = 4
    rng = np.random.default_rng(0)
    s, u, i = rng.standard_normal(2 * d) * 10, rng.standard_normal(d), rng.standard_normal(d)
    enc = TransitionEncoder(d, seed=1)
    a, b = enc.encode(s, u, i), enc.encode(s, u, i)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) < 1) and np.linalg.norm(a) <= np.sqrt(2 * d)
    assert not np.array_equal(a, TransitionEncoder(d, seed=2).encode(s, u, i))
    with pytest.raises(ValueError):
        enc.W[0, 0] = 1.0
    with pytest.raises(ValueError):
        enc.encode(s[:-1], u, i)


def test_anchored_encoder_layout():
    enc = TransitionEncoder(3, seed=0, anchor=0.5)
    np.testing.assert_array_equal(enc.W[:, :6], 0.5 * np.eye(6))


class _ScriptedOracle(Oracle):
    """Returns a fixed sequence of probabilities, one per distinct prompt."""

    identity = "scripted"
    source = "simulated"

    def __init__(self, ps):
        super().__init__(retries=1)
        self.ps = list(ps)

    def _backend(self, prompt, ctx):
        return self.ps[min(len(ctx.coll_users), len(self.ps) - 1)]


def _env(small_dataset, small_table, oracle, **cfg):
    enc = TransitionEncoder(small_table.dim, seed=0)
    return RetrievalEnv(small_table, small_dataset.matrix, small_dataset.descriptions, oracle, enc, EnvConfig(**cfg))


def _target(ds):
    u, i, y = ds.pairs("test")
    return (int(u[0]), int(i[0])), int(y[0])


def test_reset_state(small_dataset, small_table, small_oracle):
    env = _env(small_dataset, small_table, small_oracle)
    (u, i), y = _target(small_dataset)
    st0 = env.reset((u, i), y)
    assert st0.s.shape == (2 * small_table.dim,)
    assert np.array_equal(st0.s, np.concatenate([small_table.user[u], small_table.item[i]]).astype(np.float64))
    assert st0.ctx.coll_users == () and st0.ctx.coll_items == () and st0.t == 0


def test_default_state_dim_is_256(small_dataset, small_oracle):
    rng = np.random.default_rng(0)
    table = EmbeddingTable(rng.standard_normal((small_dataset.matrix.n_users, 128)), rng.standard_normal((small_dataset.matrix.n_items, 128)))
    env = _env(small_dataset, table, small_oracle)
    (u, i), y = _target(small_dataset)
    assert env.reset((u, i), y).s.shape == (256,)


def test_episode_invariants_and_telescoping(small_dataset, small_table, small_oracle):
    env = _env(small_dataset, small_table, small_oracle)
    rng = np.random.default_rng(5)
    u_arr, i_arr, y_arr = small_dataset.pairs("test")
    for k in range(min(20, len(u_arr))):
        state = env.reset((u_arr[k], i_arr[k]), y_arr[k])
        p0, total = state.p_current, 0.0
        while not state.done:
            state, r, done = env.step(state, rng.standard_normal(env.state_dim) * 3)
            total += r
            ctx = state.ctx
            assert len(ctx.coll_users) == len(ctx.coll_items) == state.t
            assert len(set(ctx.coll_users)) == state.t and ctx.target.user not in ctx.coll_users
        assert state.t <= 10
        assert total == pytest.approx(abs(p0 - state.y) - abs(state.p_current - state.y), abs=1e-9)


def test_early_stop_rule(small_dataset, small_table):
    (u, i), _ = _target(small_dataset)
    env = _env(small_dataset, small_table, _ScriptedOracle([0.5, 0.95]))
    state, r, done = env.step(env.reset((u, i), 1), np.zeros(env.state_dim))
    assert done and r == pytest.approx(0.45)
    # no early stop: runs the full horizon
    env = _env(small_dataset, small_table, _ScriptedOracle([0.5, 0.95]))
    state = env.reset((u, i), 1)
    while not state.done:
        state, _, _ = env.step(state, np.zeros(env.state_dim), early_stop=False)
    assert state.t == 10
    with pytest.raises(RuntimeError):
        env.step(state, np.zeros(env.state_dim))


def test_actions_are_clipped(small_dataset, small_table):
    env = _env(small_dataset, small_table, ConstantOracle(0.5))
    (u, i), y = _target(small_dataset)
    state = env.reset((u, i), y)
    big = np.full(env.state_dim, 1e6)
    a, _, _ = env.step(state, big)
    b, _, _ = env.step(state, np.full(env.state_dim, env.clip))
    assert a.ctx.coll_users == b.ctx.coll_users and a.ctx.coll_items == b.ctx.coll_items


def test_step_is_deterministic(small_dataset, small_table, small_oracle):
    env = _env(small_dataset, small_table, small_oracle)
    (u, i), y = _target(small_dataset)
    a = np.linspace(-1, 1, env.state_dim)
    s1, r1, _ = env.step(env.reset((u, i), y), a)
    s2, r2, _ = env.step(env.reset((u, i), y), a)
    assert np.array_equal(s1.s, s2.s) and r1 == r2 and s1.ctx == s2.ctx


def test_trace_records(tmp_path, small_dataset, small_table, small_oracle):
    env = _env(small_dataset, small_table, small_oracle)
    env.trace = []
    (u, i), y = _target(small_dataset)
    env.step(env.reset((u, i), y), np.zeros(env.state_dim))
    assert set(env.trace[0]) == {"target", "step", "retrieved_user", "retrieved_item", "p", "r"}
    write_trace(env.trace, tmp_path / "t.jsonl")
    assert (tmp_path / "t.jsonl").read_text().count("\n") == 1
