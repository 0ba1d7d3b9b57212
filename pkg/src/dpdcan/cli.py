"""Command-line entry point: synth, preprocess, train, evaluate, account, calibrate."""
from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dpdcan import _backend, accountant, checkpoint, data, dp_engine, losses, metrics, train
from dpdcan.errors import (CalibrationError, ConfigError, DataError, DegenerateError,
                           DivergenceError, DomainError, EmptyClusterError)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_CALIBRATION = 1, 2, 3, 4
MANIFEST_FORMAT = "dpdcan-manifest-1"

log = logging.getLogger("dpdcan")

DEFAULTS = {
    "data": {"input": None, "labels": None, "format": None, "n_hvg": 2000},
    "model": {"hidden": [256, 64], "latent": 32, "n_clusters": None},
    "privacy": {"epsilon": None, "sigma": None, "delta": 1e-5, "clip_bound": 0.1,
                "entire_network": False, "perturb_scope": None},
    "train": {"t1_epochs": 100, "t2_epochs": 100, "lot_fraction": 0.1, "lot_size": None,
              "rho": 0.5, "beta1": 0.5, "beta2": 0.3, "beta3": 0.2,
              "stage1_optimizer": "adam", "stage1_lr": 1e-3,
              "stage2_optimizer": "adadelta", "stage2_lr": 1.0,
              "target_refresh_epochs": 1, "augment_mask_prob": 0.2,
              "augment_jitter_std": 0.1, "stop_gradient": False,
              "kmeans_restarts": 10, "audit": False},
    "seeds": {"init": 0, "data": 1, "noise": 2, "augment": 3},
}

# flag dest -> (section, key)
TRAIN_FLAGS = {
    "input": ("data", "input"), "format": ("data", "format"), "n_hvg": ("data", "n_hvg"),
    "clusters": ("model", "n_clusters"), "latent": ("model", "latent"),
    "hidden": ("model", "hidden"),
    "epsilon": ("privacy", "epsilon"), "sigma": ("privacy", "sigma"),
    "delta": ("privacy", "delta"), "clip": ("privacy", "clip_bound"),
    "entire_network": ("privacy", "entire_network"),
    "perturb_scope": ("privacy", "perturb_scope"),
    "t1": ("train", "t1_epochs"), "t2": ("train", "t2_epochs"),
    "lot_fraction": ("train", "lot_fraction"), "lot_size": ("train", "lot_size"),
    "rho": ("train", "rho"), "beta1": ("train", "beta1"), "beta2": ("train", "beta2"),
    "beta3": ("train", "beta3"), "refresh": ("train", "target_refresh_epochs"),
    "mask_prob": ("train", "augment_mask_prob"), "jitter": ("train", "augment_jitter_std"),
    "stop_gradient": ("train", "stop_gradient"), "audit": ("train", "audit"),
    "seed_init": ("seeds", "init"), "seed_data": ("seeds", "data"),
    "seed_noise": ("seeds", "noise"), "seed_augment": ("seeds", "augment"),
}


def _num(v):
    """Nine significant digits for tabular output."""
    return float(f"{float(v):.9g}")


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- config

def load_config(path):
    """Read a TOML run config or a JSON manifest written by ``train``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            doc = json.loads(raw)
            if doc.get("format") == MANIFEST_FORMAT:
                doc = doc["config"]
        else:
            doc = tomllib.loads(raw.decode())
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section, body in doc.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        for key in body:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
    return doc


def resolve_config(file_cfg, overrides):
    """Defaults, then the config file, then flags."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in (file_cfg or {}).items():
        cfg[section].update(body)
    for (section, key), value in overrides.items():
        cfg[section][key] = value
    return cfg


def _scope(value):
    if value is None or isinstance(value, list):
        return value
    try:
        return [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"privacy.perturb_scope: expected comma-separated layer indices, got {value!r}") from exc


def build_plan(cfg):
    """Turn a resolved config into a TrainPlan (sigma still unresolved when epsilon is set)."""
    priv, tr, mdl, seeds = cfg["privacy"], cfg["train"], cfg["model"], cfg["seeds"]
    if (priv["epsilon"] is None) == (priv["sigma"] is None):
        raise ConfigError("privacy: give exactly one of epsilon / sigma")
    if mdl["n_clusters"] is None:
        raise ConfigError("model.n_clusters is required")
    sigma = priv["sigma"] if priv["sigma"] is not None else 1.0
    clip = priv["clip_bound"]
    if clip is not None and clip <= 0:
        clip = None
    try:
        dp = dp_engine.DpConfig(
            clip_bound=clip, noise_scale=float(sigma),
            perturb_scope=_scope(priv["perturb_scope"]),
            entire_network=bool(priv["entire_network"]))
        weights = losses.LossWeights(tr["rho"], tr["beta1"], tr["beta2"], tr["beta3"])
        plan = train.TrainPlan(
            n_clusters=int(mdl["n_clusters"]),
            t1_epochs=int(tr["t1_epochs"]), t2_epochs=int(tr["t2_epochs"]),
            lot_size=tr["lot_size"], lot_fraction=float(tr["lot_fraction"]),
            weights=weights, dp=dp, delta=float(priv["delta"]),
            seeds=train.Seeds(**{k: int(v) for k, v in seeds.items()}),
            target_refresh_epochs=int(tr["target_refresh_epochs"]),
            augment_mask_prob=float(tr["augment_mask_prob"]),
            augment_jitter_std=float(tr["augment_jitter_std"]),
            stage1_optimizer=tr["stage1_optimizer"], stage1_lr=float(tr["stage1_lr"]),
            stage2_optimizer=tr["stage2_optimizer"], stage2_lr=float(tr["stage2_lr"]),
            hidden=tuple(int(h) for h in mdl["hidden"]), latent=int(mdl["latent"]),
            stop_gradient=bool(tr["stop_gradient"]),
            kmeans_restarts=int(tr["kmeans_restarts"]), audit=bool(tr["audit"]))
    except (DomainError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return plan.validate()


def _load_input(cfg):
    src = cfg["data"]["input"]
    if src is None:
        raise ConfigError("data.input is required")
    path = Path(src)
    if not path.exists():
        raise DataError(f"data.input: {path} does not exist")
    if path.suffix == ".npz":
        return data.PreprocessedData.load(path)
    return data.preprocess(data.read_counts(path, cfg["data"]["format"]), int(cfg["data"]["n_hvg"]))


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("DPDCAN_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"DPDCAN_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.clusters < 2:
        raise ConfigError("--clusters must be >= 2")
    if args.cells < args.clusters:
        raise ConfigError("--cells must be >= --clusters")
    if args.genes < 1:
        raise ConfigError("--genes must be >= 1")
    cm, labels = data.generate_synthetic(args.cells, args.genes, args.clusters,
                                         separation=args.separation,
                                         dropout_rate=args.dropout, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.write_counts(out / "counts.csv", cm)
    data.write_labels(out / "labels.csv", cm.cell_ids, labels)
    log.info("wrote %s and %s", out / "counts.csv", out / "labels.csv")
    return 0


def cmd_preprocess(args):
    raw = data.read_counts(args.input, args.format)
    pre = data.preprocess(raw, args.n_hvg)
    out = Path(args.output)
    if out.suffix != ".npz":
        raise ConfigError("--output must end in .npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    pre.save(out)
    log.info("kept %d of %d genes for %d cells -> %s", pre.n_genes, raw.shape[1], pre.n_cells, out)
    return 0


def cmd_train(args):
    file_cfg = load_config(args.config) if args.config else {}
    overrides = {}
    for dest, target in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[target] = value
    if args.epsilon is not None:
        overrides[("privacy", "sigma")] = None
    if args.sigma is not None:
        overrides[("privacy", "epsilon")] = None
    if args.non_private:
        overrides[("privacy", "sigma")] = 0.0
        overrides[("privacy", "epsilon")] = None
        overrides[("privacy", "clip_bound")] = 0.0
    cfg = resolve_config(file_cfg, overrides)
    if cfg["data"]["input"] is not None:
        cfg["data"]["input"] = str(Path(cfg["data"]["input"]).resolve())
    plan = build_plan(cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("dpdcan")
    root.addHandler(handler)
    try:
        pre = _load_input(cfg)
        if cfg["privacy"]["epsilon"] is not None:
            sigma = train.noise_for_budget(float(cfg["privacy"]["epsilon"]), pre.n_cells, plan)
            plan = replace(plan, dp=replace(plan.dp, noise_scale=sigma))
            log.info("calibrated sigma %.9g for epsilon %s", sigma, cfg["privacy"]["epsilon"])
        log.info("training on %d cells x %d genes, backend %s", pre.n_cells, pre.n_genes, _backend.NAME)
        result = train.train(pre, plan)
        _write_outputs(out, cfg, plan, pre, result, args.full_checkpoint)
    finally:
        root.removeHandler(handler)
        handler.close()
    return 0


def _write_outputs(out, cfg, plan, pre, result, full_checkpoint):
    checkpoint.save(out / "encoder.json", result.params, encoder_only=True)
    if full_checkpoint:
        checkpoint.save(out / "model.json", result.params)
    data.write_matrix(out / "embeddings.csv", pre.cell_ids, result.embeddings)
    data.write_labels(out / "assignments.csv", pre.cell_ids, result.assignments,
                      header=("cell_id", "cluster"))
    _dump_json(out / "privacy.json", result.privacy.to_dict())
    manifest = {
        "format": MANIFEST_FORMAT,
        "config": cfg,
        "resolved": {
            "sigma": plan.dp.noise_scale,
            "lot_size": plan.resolved_lot_size(pre.n_cells),
            "steps_per_epoch": plan.steps_per_epoch(pre.n_cells),
            "n_cells": pre.n_cells,
            "n_genes": pre.n_genes,
            "backend": _backend.NAME,
        },
        "outputs": ["encoder.json", "embeddings.csv", "assignments.csv", "privacy.json",
                    "run.log"] + (["model.json"] if full_checkpoint else []),
    }
    _dump_json(out / "manifest.json", manifest)
    eps = result.privacy.epsilon
    log.info("done: status %s, epsilon %s, %d SGM steps", result.privacy.status,
             "n/a" if eps is None else f"{eps:.9g}", result.privacy.sgm_steps)


def cmd_evaluate(args):
    ids, labels = data.read_labels(args.labels)
    pids, pred = data.read_labels(args.pred)
    if set(ids) != set(pids):
        missing = sorted(set(ids) ^ set(pids))
        raise DataError(f"{args.pred}: cell ids differ from {args.labels} (e.g. {missing[0]!r})")
    lookup = dict(zip(pids, pred))
    aligned = [lookup[c] for c in ids]
    res = metrics.evaluate(np.array(labels), np.array(aligned), scale=100.0)
    res["nmi"], res["ari"] = _num(res["nmi"]), _num(res["ari"])
    if args.output:
        _dump_json(args.output, res)
    _print_json(res)
    return 0


def cmd_account(args):
    steps = args.steps + (args.steps_stage2 or 0)
    sgm_steps = steps * (2 if args.entire_network else 1)
    try:
        budget = accountant.compute_epsilon(args.q, args.sigma, sgm_steps, args.delta)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    _print_json({"epsilon": budget.epsilon, "delta": args.delta, "best_order": budget.best_order,
                 "q": args.q, "sigma": args.sigma, "sgm_steps": sgm_steps})
    return 0


def cmd_calibrate(args):
    try:
        sigma = accountant.calibrate_sigma(args.epsilon, args.delta, args.q, args.steps)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    budget = accountant.compute_epsilon(args.q, sigma, args.steps, args.delta)
    _print_json({"sigma": sigma, "epsilon": budget.epsilon, "target_epsilon": args.epsilon,
                 "delta": args.delta, "q": args.q, "steps": args.steps,
                 "best_order": budget.best_order})
    return 0


# ---------------------------------------------------------------- parser

def _bool_flag(parser, name, dest, help):
    parser.add_argument(name, dest=dest, action="store_true", default=None, help=help)


def build_parser():
    p = argparse.ArgumentParser(prog="dpdcan", description=__doc__)
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic clustered count matrix and labels")
    s.add_argument("--cells", type=int, default=300)
    s.add_argument("--genes", type=int, default=200)
    s.add_argument("--clusters", type=int, default=3)
    s.add_argument("--separation", type=float, default=2.0)
    s.add_argument("--dropout", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="filter, normalise and select genes")
    s.add_argument("--input", required=True, help="CSV/TSV table or Matrix Market directory")
    s.add_argument("--format", choices=("csv", "tsv", "mtx"))
    s.add_argument("--n-hvg", type=int, default=2000)
    s.add_argument("--output", required=True, help="bundle path (.npz)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="two-stage private training")
    s.add_argument("--config", help="TOML config or a previous run's manifest.json")
    s.add_argument("--input", help="preprocessed bundle (.npz) or raw counts")
    s.add_argument("--format", choices=("csv", "tsv", "mtx"))
    s.add_argument("--n-hvg", type=int)
    s.add_argument("--clusters", type=int)
    s.add_argument("--latent", type=int)
    s.add_argument("--hidden", type=lambda v: [int(x) for x in v.split(",")])
    g = s.add_mutually_exclusive_group()
    g.add_argument("--epsilon", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--non-private", action="store_true", help="no noise and no clipping")
    s.add_argument("--delta", type=float)
    s.add_argument("--clip", type=float, help="clipping bound C (0 disables clipping)")
    _bool_flag(s, "--entire-network", "entire_network", "noise every layer (two releases per step)")
    s.add_argument("--perturb-scope", help="comma-separated layer indices to noise")
    s.add_argument("--t1", type=int, help="instance-stage epochs")
    s.add_argument("--t2", type=int, help="cluster-stage epochs")
    s.add_argument("--lot-fraction", type=float)
    s.add_argument("--lot-size", type=int)
    for name in ("rho", "beta1", "beta2", "beta3"):
        s.add_argument(f"--{name}", type=float)
    s.add_argument("--refresh", type=int, help="epochs between target refreshes")
    s.add_argument("--mask-prob", type=float)
    s.add_argument("--jitter", type=float)
    _bool_flag(s, "--stop-gradient", "stop_gradient", "symmetrised stop-gradient cosine loss")
    _bool_flag(s, "--audit", "audit", "materialise per-sample gradients and check clipped norms")
    for name in ("init", "data", "noise", "augment"):
        s.add_argument(f"--seed-{name}", type=int)
    s.add_argument("--full-checkpoint", action="store_true", help="also write model.json")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="NMI and ARI (x100) of assignments against labels")
    s.add_argument("--labels", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("account", help="epsilon for a sampled Gaussian schedule")
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--steps-stage2", type=int)
    s.add_argument("--delta", type=float, default=1e-5)
    s.add_argument("--entire-network", action="store_true", help="two releases per step")
    s.set_defaults(func=cmd_account)

    s = sub.add_parser("calibrate", help="smallest sigma meeting an epsilon budget")
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--delta", type=float, default=1e-5)
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.quiet:
        for h in logging.getLogger().handlers:
            h.setLevel(logging.WARNING)
    logging.getLogger("dpdcan").setLevel(logging.INFO)
    try:
        with _thread_cap():
            return args.func(args)
    except (ConfigError, DomainError) as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except DataError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (DivergenceError, EmptyClusterError, DegenerateError) as exc:
        code, msg = EXIT_DIVERGENCE, f"numerical failure: {exc}"
    except CalibrationError as exc:
        code, msg = EXIT_CALIBRATION, f"calibration failed: {exc}"
    except OSError as exc:
        code, msg = EXIT_DATA, f"i/o error: {exc}"
    print(f"dpdcan: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
