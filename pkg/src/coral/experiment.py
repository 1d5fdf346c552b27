"""Desk-scale synthetic experiment: the arm comparison, per-round curves and learning curves."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, generate_synthetic
from .ddpg import TrainConfig
from .embeddings import init_random
from .evaluation import episodes_to_fraction, median_by, write_report
from .oracle import SimulatedOracle
from .pipeline import pretrain_table, run_comparison

logger = logging.getLogger(__name__)

# world in which collaborative evidence is reachable by nearest-neighbour retrieval
DESK_WORLD = {
    "n_users": 2000,
    "n_items": 500,
    "latent_dim": 2,
    "n_categories": 2,
    "zipf_s": 0.7,
    "per_user": 50,
    "locality": 50.0,
    "category_noise": 2.0,
}

# desk-scale overrides of the TrainConfig defaults (see the decisions ledger)
DESK_TRAIN = {
    "d": 32,
    "hidden": (128, 128),
    "actor_skip": True,
    "actor_out_scale": 1e-3,
    "critic_out_scale": 3e-3,
    "actor_anchor": 0.1,
    "encoder_anchor": 1.0,
    "encoder_gain": 0.3,
}


def desk_config(**overrides):
    return TrainConfig(**{**DESK_TRAIN, **overrides}).validate()


@dataclass
class DeskSetup:
    dataset: Dataset
    world: object
    oracle: SimulatedOracle
    warm_table: object
    random_table: object
    pretrain_curve: list = field(default_factory=list)


def desk_setup(world_seed=0, d=32, pretrain_epochs=30, world=None, cache=None):
    """Generate the world, split it, pretrain the warm-start table and draw the random one."""
    params = {**DESK_WORLD, **(world or {})}
    n_users, n_items = params.pop("n_users"), params.pop("n_items")
    inter, metas, hidden = generate_synthetic(world_seed, n_users, n_items, **params)
    ds = Dataset.build(inter, metas, seed=world_seed)
    categories = np.array([hidden.category_of(i) for i in ds.matrix.item_ids])
    oracle = SimulatedOracle(categories, world_tag=f"desk{world_seed}", cache=cache)
    warm, curve = pretrain_table(ds, "mf", d=d, epochs=pretrain_epochs, lr=0.001, seed=world_seed)
    rand = init_random(world_seed, ds.matrix.n_users, ds.matrix.n_items, d)
    return DeskSetup(ds, hidden, oracle, warm, rand, curve)


@dataclass
class DeskResult:
    rows: list
    outcomes: dict

    def median_auc(self, arm, round_idx=None):
        if round_idx is None:
            round_idx = max(r["round"] for r in self.rows)
        return median_by(self.rows, arm, round_idx)

    def round_medians(self, arm):
        rounds = sorted({r["round"] for r in self.rows if r["arm"] == arm})
        return [median_by(self.rows, arm, k) for k in rounds]

    def returns(self, arm, seed):
        res = self.outcomes[arm, seed].train_result
        return np.array([e[1] for e in res.episodes])

    def episodes_to_80(self, arm, seeds, **kw):
        return [episodes_to_fraction(self.returns(arm, s), 0.8, **kw) for s in seeds]


def run_desk(setup, arms, seeds=(0, 1, 2), config=None, test_limit=300):
    config = config or desk_config()
    rows, outcomes = run_comparison(
        arms, setup.dataset, seeds, setup.oracle, config, setup.warm_table, setup.random_table, test_limit
    )
    return DeskResult(rows, outcomes)


def write_learning_curves(result, path, arms=("trained_warm", "trained_random_init")):
    """Per-episode returns for each trained arm and seed (learning-curve CSV)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seed", "episode", "return", "p0", "p_final", "y"])
        for (arm, seed), out in sorted(result.outcomes.items()):
            if arm not in arms or out.train_result is None:
                continue
            for ep, ret, p0, pf, y in out.train_result.episodes:
                w.writerow([arm, seed, ep, repr(float(ret)), repr(float(p0)), repr(float(pf)), y])


def write_update_curves(result, path):
    """Per-update critic loss and actor objective for each trained arm and seed."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seed", "update_idx", "critic_loss", "actor_objective"])
        for (arm, seed), out in sorted(result.outcomes.items()):
            if out.train_result is None:
                continue
            for idx, loss, obj in out.train_result.updates:
                w.writerow([arm, seed, idx, repr(float(loss)), repr(float(obj))])


def write_desk_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.csv"),
        "learning": os.path.join(out_dir, "learning_curves.csv"),
        "updates": os.path.join(out_dir, "update_curves.csv"),
    }
    write_report(result.rows, paths["report"])
    write_learning_curves(result, paths["learning"])
    write_update_curves(result, paths["updates"])
    return paths
