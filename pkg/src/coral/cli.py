"""Command line: synth -> ingest -> pretrain -> train -> eval, plus prompt-dump for audits.

Exit codes: 0 ok, 2 input error, 3 numeric abort, 4 oracle configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import dataset as dsm
from .config import ConfigError, dump_config, load_config
from .ddpg import TrainingAborted, load_agent, save_agent, train, write_curves
from .embeddings import EmbeddingFormatError, TrainingDiverged, load_table, save_table
from .evaluation import actor_policy, evaluate_policy, random_policy, report_rows, write_report
from .oracle import API_KEY_ENV, OracleCache, OracleConfigError, RemoteChatOracle, SimulatedOracle
from .pipeline import eval_pairs, make_env, pretrain_table, run_comparison, train_pairs
from .prompting import build_context, render_prompt

logger = logging.getLogger("coral")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4


class InputError(Exception):
    pass


# --- stage helpers ----------------------------------------------------------------


def _require(path, what):
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    return path


def load_dataset(cfg):
    split = dsm.read_manifest(_require(cfg.path("manifest", "manifest.jsonl"), "manifest"), cfg.split_seed)
    metas = dsm.read_metas(_require(cfg.path("items", "items.jsonl"), "item descriptions"))
    return dsm.Dataset.from_split(split, metas)


def make_oracle(cfg, dataset):
    cache = OracleCache(cfg.path("cache", "oracle_cache.jsonl"))
    if cfg.oracle == "remote":
        return RemoteChatOracle(cfg.remote_url, cfg.remote_model, timeout=cfg.remote_timeout, cache=cache)
    world_path = cfg.path("world", "world.npz")
    if not os.path.exists(world_path):
        raise OracleConfigError(f"the simulated oracle needs a synthetic world file; {world_path} is missing")
    world = dsm.load_world(world_path)
    try:
        categories = np.array([world.category_of(i) for i in dataset.matrix.item_ids])
    except KeyError as exc:
        raise OracleConfigError(f"item {exc} is not part of the synthetic world") from None
    tag = os.path.basename(world_path)
    return SimulatedOracle(categories, cfg.w_sem, cfg.w_coll, world_tag=tag, cache=cache)


def _arm_for(table):
    return "trained_random_init" if table.provenance == "random" else "trained_warm"


# --- commands ----------------------------------------------------------------------


def cmd_synth(cfg, args):
    inter, metas, world = dsm.generate_synthetic(cfg.synth_seed, cfg.synth_users, cfg.synth_items, **cfg.synth_kwargs())
    os.makedirs(cfg.out_dir, exist_ok=True)
    reviews = cfg.path("reviews", "reviews.jsonl")
    meta = cfg.path("meta", "meta.jsonl")
    dsm.write_review_jsonl(inter, metas, reviews, meta)
    dsm.save_world(world, cfg.path("world", "world.npz"))
    print(f"interactions={len(inter)} users={cfg.synth_users} items={cfg.synth_items}")
    print(f"reviews={reviews} meta={meta}")


def cmd_ingest(cfg, args):
    reviews = _require(cfg.path("reviews", "reviews.jsonl"), "reviews file")
    meta = cfg.path("meta", "meta.jsonl")
    with open(reviews, encoding="utf-8") as rf:
        if os.path.exists(meta):
            with open(meta, encoding="utf-8") as mf:
                inter, metas, stats = dsm.parse_records(rf, mf)
        else:
            inter, metas, stats = dsm.parse_records(rf)
    data = dsm.Dataset.build(inter, metas, cfg.split_seed, cfg.kcore)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dsm.write_manifest(data.split, cfg.path("manifest", "manifest.jsonl"))
    dsm.write_metas(metas, cfg.path("items", "items.jsonl"))
    sp = data.split
    n_items = len(sp.head_items) + len(sp.tail_items)
    summary = {
        "reviews": stats.n_reviews,
        "malformed": stats.n_malformed_reviews,
        "duplicates": stats.n_duplicates,
        "users": data.matrix.n_users,
        "items": n_items,
        "head_items": len(sp.head_items),
        "tail_items": len(sp.tail_items),
        "tail_share": round(len(sp.tail_items) / n_items, 4),
        "train": len(sp.train),
        "val": len(sp.val),
        "test": len(sp.test),
        "dropped_val": sp.n_dropped_val,
        "dropped_test": sp.n_dropped_test,
    }
    for key, value in summary.items():
        print(f"{key}={value}")


def cmd_pretrain(cfg, args):
    data = load_dataset(cfg)
    table, curve = pretrain_table(
        data,
        cfg.backbone,
        d=cfg.d,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        seed=cfg.seed,
        hidden_sizes=cfg.widedeep_hidden,
        batch_size=cfg.pretrain_batch,
    )
    out = cfg.path("embeddings", "embeddings.crle")
    save_table(table, out)
    with open(os.path.join(cfg.out_dir, "pretrain_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "bce"])
        w.writerows((k + 1, repr(float(v))) for k, v in enumerate(curve))
    for k, v in enumerate(curve):
        logger.info("epoch %d bce %.6f", k + 1, v)
    print(f"backbone={cfg.backbone} d={table.dim} provenance={table.provenance} file={out}")


def cmd_train(cfg, args):
    data = load_dataset(cfg)
    table = load_table(_require(cfg.path("embeddings", "embeddings.crle"), "embedding file"))
    oracle = make_oracle(cfg, data)
    tcfg = replace(cfg.train_config(), d=table.dim)
    env = make_env(data, table, oracle, tcfg, encoder_seed=tcfg.seed)
    pairs, labels = train_pairs(data)
    ckpt = cfg.path("checkpoint", "policy.crlp")
    try:
        result = train(tcfg, env, pairs, labels, log_every=args.log_every)
    except TrainingAborted as exc:
        if exc.last_good is not None:
            save_agent(exc.last_good, ckpt)
        raise
    save_agent(result.agent, ckpt)
    write_curves(result, os.path.join(cfg.out_dir, "update_curves.csv"), os.path.join(cfg.out_dir, "episode_curves.csv"))
    returns = [e[1] for e in result.episodes]
    print(f"episodes={len(result.episodes)} updates={len(result.updates)} mean_return={np.mean(returns) if returns else 0.0:.6f}")
    print(f"oracle_backend_calls={oracle.backend_calls} checkpoint={ckpt}")


def cmd_eval(cfg, args):
    data = load_dataset(cfg)
    table = load_table(_require(cfg.path("embeddings", "embeddings.crle"), "embedding file"))
    oracle = make_oracle(cfg, data)
    tcfg = replace(cfg.train_config(), d=table.dim)
    limit = cfg.test_limit or None
    if args.compare:
        rows, _ = run_comparison(cfg.arms, data, cfg.seeds, oracle, tcfg, table, test_limit=limit)
    else:
        tp, tl = eval_pairs(data, "test", limit)
        trained = _arm_for(table)
        rows = []
        for arm in cfg.arms:
            env = make_env(data, table, oracle, tcfg, encoder_seed=tcfg.seed)
            if arm == "no_retrieval":
                policy = None
            elif arm == "random_retrieval":
                policy = random_policy(env.state_dim, env.clip, seed=[tcfg.seed, 99])
            elif arm == trained:
                agent = load_agent(_require(cfg.path("checkpoint", "policy.crlp"), "policy checkpoint"))
                policy = actor_policy(agent.actor, env.clip, tcfg.action_squash)
            else:
                raise InputError(f"arm {arm} needs --compare (the checkpoint belongs to {trained})")
            rows.extend(report_rows(arm, tcfg.seed, evaluate_policy(policy, env, tp, tl, tcfg.eval_rounds)))
    out = cfg.path("report", "report.csv")
    write_report(rows, out)
    for row in rows:
        if row["round"] == tcfg.eval_rounds:
            print(f"{row['arm']} seed={row['seed']} auc={row['auc']:.4f} f1={row['f1']:.4f} pairs={row['n_pairs']}")
    print(f"report={out}")


def _resolve(index, key, kind):
    if key in index:
        return index[key]
    try:
        idx = int(key)
    except ValueError:
        raise InputError(f"unknown {kind} {key!r}") from None
    if not 0 <= idx < len(index):
        raise InputError(f"{kind} index {idx} out of range")
    return idx


def cmd_prompt_dump(cfg, args):
    data = load_dataset(cfg)
    m = data.matrix
    target = (_resolve(m.user_index, args.user, "user"), _resolve(m.item_index, args.item, "item"))
    ctx = build_context(target, m)
    for pair in args.retrieved or []:
        u, _, i = pair.partition(":")
        ctx = ctx.with_retrieved(_resolve(m.user_index, u, "user"), _resolve(m.item_index, i, "item"), m)
    sys.stdout.write(render_prompt(ctx, data.descriptions))


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "prompt-dump": cmd_prompt_dump,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key=value config file")
    common.add_argument("--oracle", choices=("simulated", "remote"), help="oracle backend")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--seed", type=int)
    common.add_argument(
        "-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)"
    )
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coral", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--log-every", type=int, default=0)
        if name == "eval":
            p.add_argument("--compare", action="store_true", help="train and evaluate every arm for every seed")
        if name == "prompt-dump":
            p.add_argument("--user", required=True, help="user id or index")
            p.add_argument("--item", required=True, help="item id or index")
            p.add_argument("--retrieved", action="append", metavar="USER:ITEM", help="retrieved pair (repeatable)")
    return parser


def resolve_config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for key in ("oracle", "out_dir", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if "api_key" in overrides:
        raise ConfigError(f"the API key is read from ${API_KEY_ENV} only")
    return load_config(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        COMMANDS[args.command](cfg, args)
    except OracleConfigError as exc:
        print(f"oracle configuration error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (TrainingAborted, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, dsm.DatasetError, EmbeddingFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
