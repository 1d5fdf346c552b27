"""Glue between the modules: build environments, pretrain warm starts, run arm comparisons."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .ddpg import Agent, TrainConfig, train
from .embeddings import LogisticMF, WideAndDeep, init_random
from .environment import EnvConfig, RetrievalEnv, TransitionEncoder
from .evaluation import ARMS, actor_policy, evaluate_policy, random_policy, report_rows

logger = logging.getLogger(__name__)


def make_env(dataset, table, oracle, config, encoder_seed=0, trace=None):
    env_cfg = EnvConfig(max_steps=config.max_steps, early_stop=config.early_stop)
    encoder = TransitionEncoder(table.dim, seed=encoder_seed, gain=config.encoder_gain, anchor=config.encoder_anchor)
    return RetrievalEnv(table, dataset.matrix, dataset.descriptions, oracle, encoder, env_cfg, trace)


def pretrain_table(dataset, backbone="mf", d=128, epochs=30, lr=0.001, seed=0, hidden_sizes=(64,), batch_size=256):
    """Warm-start table fitted on head-item training ratings only; ``backbone='none'`` is random."""
    n_users, n_items = dataset.matrix.n_users, dataset.matrix.n_items
    if backbone == "none":
        return init_random(seed, n_users, n_items, d), []
    u, i, y = dataset.head_matrix_triples()
    X = np.column_stack([u, i])
    if backbone == "mf":
        est = LogisticMF(n_users, n_items, d, epochs, lr, batch_size, seed)
    elif backbone == "widedeep":
        est = WideAndDeep(n_users, n_items, d, tuple(hidden_sizes), epochs, lr, batch_size, seed)
    else:
        raise ValueError(f"unknown backbone {backbone!r}")
    est.fit(X, y)
    return est.table_, est.loss_curve_


def train_pairs(dataset):
    """Tail-item training pairs (evaluation is on tail items); all training pairs if none."""
    u, i, y = dataset.tail_train_pairs()
    if len(y) == 0:
        u, i, y = dataset.pairs("train")
    return np.column_stack([u, i]), y


def eval_pairs(dataset, which="test", limit=None, seed=0):
    u, i, y = dataset.pairs(which)
    pairs = np.column_stack([u, i])
    if limit is not None and limit < len(y):
        keep = np.sort(np.random.default_rng(seed).choice(len(y), size=limit, replace=False))
        pairs, y = pairs[keep], y[keep]
    return pairs, y


@dataclass
class ArmOutcome:
    rows: list
    eval_result: object
    train_result: object = None


def run_arm(arm, seed, dataset, oracle, config, warm_table, random_table, test_pairs, test_labels):
    cfg = replace(config, seed=seed)
    if arm in ("no_retrieval", "random_retrieval"):
        env = make_env(dataset, warm_table, oracle, cfg, encoder_seed=seed)
        policy = None if arm == "no_retrieval" else random_policy(env.state_dim, env.clip, seed=[seed, 99])
        res = evaluate_policy(policy, env, test_pairs, test_labels, cfg.eval_rounds)
        return ArmOutcome(report_rows(arm, seed, res), res)
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    table = warm_table if arm == "trained_warm" else random_table
    env = make_env(dataset, table, oracle, cfg, encoder_seed=seed)
    pairs, labels = train_pairs(dataset)
    tres = train(cfg, env, pairs, labels)
    res = evaluate_policy(actor_policy(tres.agent.actor, env.clip, cfg.action_squash), env, test_pairs, test_labels, cfg.eval_rounds)
    return ArmOutcome(report_rows(arm, seed, res), res, tres)


def run_comparison(arms, dataset, seeds, oracle, config, warm_table, random_table=None, test_limit=None):
    """Per-arm, per-seed, per-round metrics. Returns (rows, outcomes keyed by (arm, seed))."""
    if random_table is None:
        random_table = init_random(0, dataset.matrix.n_users, dataset.matrix.n_items, warm_table.dim)
    test_pairs, test_labels = eval_pairs(dataset, "test", test_limit)
    rows, outcomes = [], {}
    for arm in arms:
        for seed in seeds:
            out = run_arm(arm, seed, dataset, oracle, config, warm_table, random_table, test_pairs, test_labels)
            outcomes[arm, seed] = out
            rows.extend(out.rows)
            logger.info("%s seed %s final auc %.4f", arm, seed, out.rows[-1]["auc"])
    return rows, outcomes
