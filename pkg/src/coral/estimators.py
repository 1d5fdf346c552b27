"""Scikit-learn style front end: fit a retrieval policy on (user, item) pairs, score pairs."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .ddpg import TrainConfig, train
from .embeddings import LogisticMF, WideAndDeep
from .environment import EnvConfig, RetrievalEnv, TransitionEncoder
from .evaluation import actor_policy, auc, evaluate_policy

__all__ = ["CoralRecommender", "LogisticMF", "WideAndDeep"]


def _check_pairs(X, n_users, n_items):
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if X.shape[1] != 2:
        raise ValueError(f"X must have two columns (user_idx, item_idx), got {X.shape[1]}")
    if X.min() < 0 or X[:, 0].max() >= n_users or X[:, 1].max() >= n_items:
        raise ValueError("pair indices fall outside the embedding table")
    return X


class CoralRecommender(ClassifierMixin, BaseEstimator):
    """Collaborative retrieval policy wrapped as a binary classifier.

    ``fit`` trains the actor-critic on (user_idx, item_idx) pairs with binary labels;
    ``predict_proba`` runs the fixed-round evaluation protocol and returns the oracle's
    probability after the last round. ``predict_rounds`` exposes p_0..p_R per pair.

    The embedding table, rating matrix, descriptions and oracle are collaborators,
    not learned state, so they are passed in at construction.
    """

    def __init__(self, table, matrix, descriptions, oracle, config=None, rounds=5, encoder_seed=0):
        self.table = table
        self.matrix = matrix
        self.descriptions = descriptions
        self.oracle = oracle
        self.config = config
        self.rounds = rounds
        self.encoder_seed = encoder_seed

    def _config(self):
        cfg = self.config if self.config is not None else TrainConfig(d=self.table.dim)
        if cfg.d != self.table.dim:
            cfg = replace(cfg, d=self.table.dim)
        return replace(cfg, eval_rounds=self.rounds).validate()

    def _env(self, cfg):
        encoder = TransitionEncoder(self.table.dim, self.encoder_seed, cfg.encoder_gain, cfg.encoder_anchor)
        env_cfg = EnvConfig(max_steps=cfg.max_steps, early_stop=cfg.early_stop)
        return RetrievalEnv(self.table, self.matrix, self.descriptions, self.oracle, encoder, env_cfg)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        X = _check_pairs(X, self.table.n_users, self.table.n_items)
        self.classes_ = np.array([0, 1])
        if not np.isin(y, self.classes_).all():
            raise ValueError("labels must be 0 or 1")
        cfg = self._config()
        self.env_ = self._env(cfg)
        self.train_result_ = train(cfg, self.env_, X, y)
        self.agent_ = self.train_result_.agent
        self.config_ = cfg
        return self

    def _evaluate(self, X, y=None):
        check_is_fitted(self, "agent_")
        X = _check_pairs(X, self.table.n_users, self.table.n_items)
        labels = np.zeros(len(X), dtype=np.int64) if y is None else np.asarray(y)
        policy = actor_policy(self.agent_.actor, self.env_.clip, self.config_.action_squash)
        return evaluate_policy(policy, self.env_, X, labels, self.rounds)

    def predict_rounds(self, X):
        """Array (n_pairs, rounds + 1) of p_0..p_R under the noise-free actor."""
        return self._evaluate(X).probs()

    def predict_proba(self, X):
        p = self.predict_rounds(X)[:, -1]
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def round_auc(self, X, y):
        """AUC at every round index, p_0 included."""
        P = self.predict_rounds(X)
        return [auc(P[:, k], y) for k in range(P.shape[1])]
