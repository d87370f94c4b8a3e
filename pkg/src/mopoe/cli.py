"""Command-line orchestration: gen-data, train, eval, sweep, verify.

Configs are strict JSON: every section has a fixed key set and unknown
keys are rejected, so a typo cannot silently fall back to a default.
Every run directory receives the fully resolved config, the dataset
manifest hash, and all seeds; rerunning from the same directory
reproduces every CSV byte for byte.

Exit codes: 0 success, 1 verification or metric failure, 2 usage or
config error. MOPOE_THREADS caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import objectives as OBJ
from . import oracle as ORC
from . import tensor as T
from .distributions import LikelihoodSpec, default_likelihood_weights
from .harness import dataset as DS
from .harness import metrics as MX
from .models import (
    ModalityConfig,
    ModelConfig,
    MultimodalVAE,
    load_checkpoint,
    save_checkpoint,
)

CSV_HEADER = "run_id,variant,beta,seed,epoch,metric,subset,value"

DEFAULT_BETAS = [0.5, 1.0, 2.5, 5.0, 10.0, 20.0]


class ConfigError(ValueError):
    """Config file failed schema validation (exit code 2)."""


_SCHEMA = {
    "dataset": {"dir", "M", "classes", "train", "test", "side", "patterns", "noise", "seed"},
    "model": {"latent_dim", "hidden", "likelihood", "factorized", "style_dim"},
    "objective": {
        "kind",
        "subset_policy",
        "beta",
        "kl_estimator",
        "samples_per_component",
        "include_prior_component",
        "poe_prior_expert",
    },
    "optimizer": {"kind", "learning_rate"},
    "train": {"epochs", "batch_size", "seed", "checkpoint_every"},
    "eval": {"seed", "iwae_samples", "joint_samples", "probe_samples"},
}

_DEFAULTS = {
    "dataset": {
        "dir": "data",
        "M": 3,
        "classes": 10,
        "train": 5000,
        "test": 1000,
        "side": 8,
        "patterns": None,
        "noise": 0.55,
        "seed": 0,
    },
    "model": {
        "latent_dim": 16,
        "hidden": [128, 128],
        "likelihood": "bernoulli_logits",
        "factorized": False,
        "style_dim": 0,
    },
    "objective": {
        "kind": "mopoe",
        "subset_policy": "all_nonempty",
        "beta": 2.5,
        "kl_estimator": "avg_subset_kl",
        "samples_per_component": 1,
        "include_prior_component": False,
        "poe_prior_expert": False,
    },
    "optimizer": {"kind": "adam", "learning_rate": 0.001},
    "train": {"epochs": 30, "batch_size": 64, "seed": 0, "checkpoint_every": 0},
    "eval": {"seed": 1, "iwae_samples": 15, "joint_samples": 1000, "probe_samples": 500},
}


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Resolved config: file values over defaults, CLI overrides on top.

    Unknown sections or keys raise ConfigError naming the offender.
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    resolved = {}
    known_top = set(_SCHEMA) | {"out_dir"}
    for key in raw:
        if key not in known_top:
            raise ConfigError(f"unknown config section {key!r}")
    for section, keys in _SCHEMA.items():
        merged = dict(_DEFAULTS[section])
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for k, v in given.items():
            if k not in keys:
                raise ConfigError(f"unknown key {section}.{k}")
            merged[k] = v
        resolved[section] = merged
    resolved["out_dir"] = raw.get("out_dir", "runs/run")
    if overrides:
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, key = dotted.split(".")
            resolved[section][key] = value
    _validate(resolved)
    return resolved


def _validate(cfg: dict) -> None:
    obj = cfg["objective"]
    if obj["kind"] not in OBJ.OBJECTIVES:
        raise ConfigError(f"objective.kind must be one of {OBJ.OBJECTIVES}")
    if obj["kl_estimator"] not in OBJ.KL_ESTIMATORS:
        raise ConfigError(f"objective.kl_estimator must be one of {OBJ.KL_ESTIMATORS}")
    if not isinstance(obj["subset_policy"], list) and obj["subset_policy"] not in (
        "all_nonempty",
        "full_only",
        "singletons_only",
    ):
        raise ConfigError("objective.subset_policy invalid")
    if obj["beta"] < 0:
        raise ConfigError("objective.beta must be nonnegative")
    if cfg["optimizer"]["kind"] not in ("sgd", "adam"):
        raise ConfigError("optimizer.kind must be sgd or adam")
    if cfg["train"]["epochs"] < 0 or cfg["train"]["batch_size"] < 1:
        raise ConfigError("train.epochs must be >= 0 and batch_size >= 1")
    if cfg["model"]["likelihood"] not in LikelihoodSpec.KINDS:
        raise ConfigError(f"model.likelihood must be one of {LikelihoodSpec.KINDS}")
    if cfg["model"]["factorized"] and cfg["model"]["style_dim"] < 1:
        raise ConfigError("model.style_dim must be positive when factorized")


def run_id_for(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def dataset_config(cfg: dict) -> DS.SyntheticSetConfig:
    d = cfg["dataset"]
    return DS.SyntheticSetConfig(
        d["M"],
        d["train"],
        d["test"],
        classes=d["classes"],
        side=d["side"],
        patterns=d["patterns"],
        noise=d["noise"],
        seed=d["seed"],
    )


def build_model(cfg: dict, ds_config: DS.SyntheticSetConfig, seed: int) -> MultimodalVAE:
    dims = ds_config.dims
    weights = default_likelihood_weights([dims] * ds_config.M)
    mods = [
        ModalityConfig(
            dims,
            LikelihoodSpec(cfg["model"]["likelihood"], dims, weight=weights[j]),
            hidden=cfg["model"]["hidden"],
        )
        for j in range(ds_config.M)
    ]
    mc = ModelConfig(
        cfg["model"]["latent_dim"],
        mods,
        factorized=cfg["model"]["factorized"],
        style_dim=cfg["model"]["style_dim"],
    )
    return MultimodalVAE(mc, seed=seed)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_csv_rows(path: Path, rows: list[tuple], append: bool = False) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode) as f:
        if mode == "w":
            f.write(CSV_HEADER + "\n")
        for run_id, variant, beta, seed, epoch, metric, subset, value in rows:
            f.write(
                f"{run_id},{variant},{_fmt(beta)},{seed},{epoch},{metric},{subset},{_fmt(value)}\n"
            )


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"dataset.seed": args.seed})
    ds_cfg = dataset_config(cfg)
    out = Path(args.out or cfg["dataset"]["dir"])
    train, test = DS.generate_dataset(ds_cfg)
    manifest = DS.save_dataset(out, ds_cfg, train, test)
    print(f"dataset written to {out} ({len(train)} train / {len(test)} test)")
    for name, digest in sorted(manifest["files"].items()):
        print(f"  {name} sha256={digest[:16]}")
    return 0


def _train_run(cfg: dict, out_dir: Path) -> tuple[str, MultimodalVAE, Path]:
    """Train one model per the config; returns (run_id, model, checkpoint)."""
    ds_cfg_expected = dataset_config(cfg)
    data_dir = Path(cfg["dataset"]["dir"])
    if not (data_dir / "manifest.json").exists():
        DS.save_dataset(data_dir, ds_cfg_expected, *DS.generate_dataset(ds_cfg_expected))
    ds_cfg, train_ds, _ = DS.load_dataset(data_dir)

    seed = cfg["train"]["seed"]
    run_id = run_id_for(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    manifest_hash = hashlib.sha256((data_dir / "manifest.json").read_bytes()).hexdigest()
    (out_dir / "provenance.json").write_text(
        json.dumps(
            {"run_id": run_id, "dataset_manifest_sha256": manifest_hash, "seed": seed},
            indent=2,
            sort_keys=True,
        )
    )

    model = build_model(cfg, ds_cfg, seed)
    opt = T.OptimizerState(cfg["optimizer"]["kind"], cfg["optimizer"]["learning_rate"])
    obj_cfg = OBJ.ObjectiveConfig(
        subset_policy=cfg["objective"]["subset_policy"],
        beta=cfg["objective"]["beta"],
        kl_estimator=cfg["objective"]["kl_estimator"],
        samples_per_component=cfg["objective"]["samples_per_component"],
        factorized=cfg["model"]["factorized"],
        include_prior_component=cfg["objective"]["include_prior_component"],
        poe_prior_expert=cfg["objective"]["poe_prior_expert"],
    )
    kind = cfg["objective"]["kind"]
    rng = np.random.default_rng(seed)
    variant = kind
    beta = cfg["objective"]["beta"]
    epochs = cfg["train"]["epochs"]
    every = cfg["train"]["checkpoint_every"]

    csv_path = out_dir / "metrics.csv"
    rows = []
    for epoch in range(1, epochs + 1):
        metrics = OBJ.train_epoch(
            model,
            opt,
            train_ds.xs,
            obj_cfg,
            rng,
            objective=kind,
            batch_size=cfg["train"]["batch_size"],
        )
        for name, value in (
            ("train_elbo", metrics["elbo"]),
            ("train_recon", metrics["recon"]),
            ("train_kl", metrics["kl"]),
        ):
            rows.append((run_id, variant, beta, seed, epoch, name, "", value))
        if every and epoch % every == 0 and epoch < epochs:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch}.ckpt", model, opt, rng, epoch)
    write_csv_rows(csv_path, rows)
    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt, model, opt, rng, epochs)
    return run_id, model, ckpt


def cmd_train(args) -> int:
    overrides = {
        "train.seed": args.seed,
        "objective.kind": args.objective,
        "objective.subset_policy": args.subset_policy,
        "objective.beta": args.beta,
        "objective.kl_estimator": args.kl_estimator,
        "train.epochs": args.epochs,
    }
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out or cfg["out_dir"])
    run_id, _, ckpt = _train_run(cfg, out_dir)
    print(f"run {run_id}: checkpoint {ckpt}, metrics {out_dir / 'metrics.csv'}")
    return 0


def _judges_for(cfg: dict, data_dir: Path, train_ds, test_ds) -> list[MX.CoherenceJudge]:
    path = data_dir / "judges.bin"
    if path.exists():
        return MX.load_judges(path)
    judges = MX.train_coherence_classifiers(
        train_ds, test_ds, np.random.default_rng(cfg["eval"]["seed"] + 1000)
    )
    MX.save_judges(path, judges)
    return judges


def _eval_run(cfg: dict, ckpt_path: Path, out_dir: Path) -> list[tuple]:
    ck = load_checkpoint(ckpt_path)
    model = ck.restore_model()
    data_dir = Path(cfg["dataset"]["dir"])
    _, train_ds, test_ds = DS.load_dataset(data_dir)
    judges = _judges_for(cfg, data_dir, train_ds, test_ds)
    rng = np.random.default_rng(cfg["eval"]["seed"])
    report = MX.evaluate_model(
        model,
        train_ds,
        test_ds,
        judges,
        rng,
        S=cfg["eval"]["iwae_samples"],
        n_joint=cfg["eval"]["joint_samples"],
        probe_n=cfg["eval"]["probe_samples"],
    )
    run_id = run_id_for(cfg)
    variant = cfg["objective"]["kind"]
    beta = cfg["objective"]["beta"]
    seed = cfg["train"]["seed"]
    epoch = ck.step
    return [
        (run_id, variant, beta, seed, epoch, metric, subset, value)
        for metric, subset, value in report.rows()
    ]


def cmd_eval(args) -> int:
    cfg = load_config(args.config, {"train.seed": args.seed})
    out_dir = Path(args.out or cfg["out_dir"])
    ckpt = Path(args.checkpoint or (out_dir / "checkpoint.ckpt"))
    if not ckpt.exists():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    try:
        rows = _eval_run(cfg, ckpt, out_dir)
    except MX.ClassifierTooWeak as e:
        print(f"coherence judges below accuracy gate: {e}", file=sys.stderr)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out_dir / "eval.csv", rows)
    for _, _, _, _, _, metric, subset, value in rows:
        print(f"{metric:24s} {subset:12s} {value:.4f}")
    return 0


def _sweep_cell(payload: tuple) -> list[tuple]:
    cfg, out_root = payload
    out_dir = Path(out_root) / f"beta{cfg['objective']['beta']}_seed{cfg['train']['seed']}"
    _, _, ckpt = _train_run(cfg, out_dir)
    rows = _eval_run(cfg, ckpt, out_dir)
    write_csv_rows(out_dir / "eval.csv", rows)
    # sweep summary keeps the trade-off columns plus the final KL term
    metrics_csv = (out_dir / "metrics.csv").read_text().strip().splitlines()[1:]
    final_kl = None
    for line in metrics_csv:
        parts = line.split(",")
        if parts[5] == "train_kl":
            final_kl = float(parts[7])
    keep = []
    full_label = "+".join(f"m{j}" for j in range(cfg["dataset"]["M"]))
    for row in rows:
        metric, subset = row[5], row[6]
        if metric == "joint_coherence" or (metric == "iwae_loglik" and subset == full_label):
            keep.append(row)
    if final_kl is not None:
        prefix = (
            run_id_for(cfg),
            cfg["objective"]["kind"],
            cfg["objective"]["beta"],
            cfg["train"]["seed"],
            cfg["train"]["epochs"],
        )
        keep.append(prefix + ("train_kl", "", final_kl))
    return keep


def cmd_sweep(args) -> int:
    betas = [float(b) for b in (args.beta_list or DEFAULT_BETAS)]
    seeds = [int(s) for s in (args.seeds or [0])]
    base = load_config(args.config, {})
    out_root = Path(args.out or base["out_dir"])
    cells = []
    for beta in betas:
        for seed in seeds:
            cfg = json.loads(json.dumps(base))
            cfg["objective"]["beta"] = beta
            cfg["train"]["seed"] = seed
            cells.append((cfg, str(out_root)))
    threads = int(os.environ.get("MOPOE_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            all_rows = list(pool.map(_sweep_cell, cells))
    else:
        all_rows = [_sweep_cell(c) for c in cells]
    merged = [row for rows in all_rows for row in rows]
    merged.sort(key=lambda r: (r[2], r[3], r[5], r[6]))
    out_root.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out_root / "sweep.csv", merged)
    print(f"sweep complete: {len(cells)} cells -> {out_root / 'sweep.csv'}")
    return 0


def _reduction_checks(n_cases: int, seed: int) -> ORC.LemmaReport:
    """Bit-identity of the subset-policy special cases on random models."""
    checks = []
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        mseed = int(rng.integers(2**31))
        mods = [
            ModalityConfig(4, LikelihoodSpec("bernoulli_logits", 4), hidden=(5,))
            for _ in range(2)
        ]
        model = MultimodalVAE(ModelConfig(3, mods), seed=mseed)
        xs = [(rng.uniform(size=(3, 4)) < 0.5).astype(float) for _ in range(2)]
        cfg = OBJ.ObjectiveConfig(beta=1.7)
        draws = int(rng.integers(2**31))
        t1, _ = OBJ.elbo_mopoe(
            model, xs, cfg.replaced(subset_policy="full_only"), np.random.default_rng(draws)
        )
        t2, _ = OBJ.elbo_poe(model, xs, cfg, np.random.default_rng(draws))
        t3, _ = OBJ.elbo_mopoe(
            model, xs, cfg.replaced(subset_policy="singletons_only"), np.random.default_rng(draws)
        )
        t4, _ = OBJ.elbo_moe(model, xs, cfg, np.random.default_rng(draws))
        same = (t1.item() == t2.item()) and (t3.item() == t4.item())
        margin = 0.0 if same else -abs(t1.item() - t2.item()) - abs(t3.item() - t4.item())
        checks.append(ORC.LemmaCheck("special_case_reduction", i, margin, same))
    return ORC.LemmaReport(checks)


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    instances = args.instances or 50
    rng = np.random.default_rng(seed)
    mutate = args.mutate
    reports = [
        ORC.verify_lemmas(instances, rng, identity_instances=20, mutate=mutate),
        ORC.poe_grid_check(100, np.random.default_rng(seed + 1)),
        ORC.kl_grid_check(100, np.random.default_rng(seed + 2)),
        _reduction_checks(20, seed + 3),
    ]
    all_ok = True
    for report in reports:
        for line in report.summary_lines():
            print(line)
        all_ok = all_ok and report.all_passed
    print("verification " + ("PASSED" if all_ok else "FAILED"))
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mopoe", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--objective", choices=OBJ.OBJECTIVES)
    t.add_argument("--subset-policy", dest="subset_policy")
    t.add_argument("--beta", type=float)
    t.add_argument("--kl-estimator", dest="kl_estimator", choices=OBJ.KL_ESTIMATORS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train/eval across a beta grid")
    s.add_argument("--config")
    s.add_argument("--beta-list", dest="beta_list", nargs="*", type=float)
    s.add_argument("--seeds", nargs="*", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    v = sub.add_parser("verify", help="numerical verification of the bound family")
    v.add_argument("--instances", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--mutate", choices=["kl_sign"], help="fault injection for self-test")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DS.ConfigInvalid as e:
        print(f"dataset config error: {e}", file=sys.stderr)
        return 2
    except MX.TooFewSamples as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OBJ.NonFiniteLoss as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
