"""Operator surface: train, eval, compare, sweep and oracle-check.

Commands read a declarative YAML config (trainer settings, environment,
sweep matrix), write their artifacts under ``--out``, and exit 0 on
success, 1 on runtime failure, 2 on usage or config errors.  Every file
carries a schema header; metrics CSVs are byte-identical across reruns of
the same seed.

The ``trainer:`` section accepts the union of all methods' settings; the
keys that do not apply to the chosen method (``lam`` for everything but
the single-critic run, ``violation_tolerance`` for everything but the
dual-critic run) are dropped before validation so one config file can
drive a whole sweep.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from pathlib import Path

import jsonschema
import yaml

from . import __version__, agents, baselines, codec, evaluation, nfwpo, nn

log = logging.getLogger("fwalloc")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

MANIFEST_SCHEMA = "fwalloc.manifest.v1"
EVAL_SCHEMA = "fwalloc.eval.v1"
COMPARE_SCHEMA = "fwalloc.compare.v1"
SWEEP_SCHEMA = "fwalloc.sweep.v1"
ORACLE_CHECK_SCHEMA = "fwalloc.oraclecheck.v1"

RD_QP_LEVELS = (22.0, 27.0, 32.0, 37.0)


class ConfigError(ValueError):
    """Bad config file or incompatible command inputs."""


_TRAINER_FIELDS = {f.name for f in dataclass_fields(agents.TrainerConfig)}
_METHOD_EXTRAS = {"nfwpo": set(), "single": {"lam"},
                  "dual": {"violation_tolerance"}}
_ALL_EXTRAS = {"lam", "violation_tolerance"}
_CONFIG_CLASSES = {
    "nfwpo": agents.TrainerConfig,
    "single": baselines.SingleCriticConfig,
    "dual": baselines.DualCriticConfig,
}
_TRAINERS = {
    "nfwpo": nfwpo.train_nfwpo,
    "single": baselines.train_single_critic,
    "dual": baselines.train_dual_critic,
}

_ENV_KEYS = {"profile", "qp_levels", "budget_factors", "pool_size", "n_frames"}
_SWEEP_KEYS = {"seeds", "methods", "profiles", "workers"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _require_mapping(node, where: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{where} section must be a mapping")
    return node


def load_config(path) -> dict:
    """Parse and structurally validate one YAML config file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    doc = _require_mapping(doc, "top-level")
    _check_keys(doc, {"trainer", "environment", "sweep"}, "top-level")
    trainer = _require_mapping(doc.get("trainer"), "trainer")
    _check_keys(trainer, _TRAINER_FIELDS | _ALL_EXTRAS, "trainer")
    env = _require_mapping(doc.get("environment"), "environment")
    _check_keys(env, _ENV_KEYS, "environment")
    sweep = _require_mapping(doc.get("sweep"), "sweep")
    _check_keys(sweep, _SWEEP_KEYS, "sweep")
    for key in ("seeds", "methods", "profiles"):
        if key in sweep and not isinstance(sweep[key], list):
            raise ConfigError(f"sweep.{key} must be a list")
    for method in sweep.get("methods", []):
        if method not in _TRAINERS:
            raise ConfigError(f"sweep.methods entry {method!r} is not one of "
                              f"{sorted(_TRAINERS)}")
    return {"trainer": trainer, "environment": env, "sweep": sweep}


def trainer_config_for(method: str, trainer_section: dict,
                       seed=None, episodes=None):
    """The method's config object, with flag overrides applied."""
    d = {k: v for k, v in trainer_section.items()
         if k not in (_ALL_EXTRAS - _METHOD_EXTRAS[method])}
    if seed is not None:
        d["seed"] = seed
    if episodes is not None:
        d["episodes"] = episodes
    try:
        return _CONFIG_CLASSES[method].from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trainer section invalid for {method}: {exc}") from exc


def build_environment(env_section: dict, seed: int,
                      structure=None) -> codec.GopEnvironment:
    if structure is None and "n_frames" in env_section:
        n = int(env_section["n_frames"])
        if n < 1:
            raise ConfigError("environment.n_frames must be at least 1")
        # anything but the default hierarchical layout trains on a chain
        if n != codec.hierarchical_b_gop16().size:
            structure = codec.chain_gop(n)
    try:
        return codec.make_environment(
            env_section.get("profile", "easy"),
            [float(q) for q in env_section.get("qp_levels", [32.0])],
            seed=seed,
            pool_size=int(env_section.get("pool_size", 4)),
            budget_factors=tuple(
                float(f) for f in env_section.get("budget_factors",
                                                  (0.8, 1.0, 1.2))
            ),
            structure=structure,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"environment section invalid: {exc}") from exc


def _iso_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def write_manifest(path, *, method, config, outputs, summary,
                   started, finished) -> None:
    doc = {
        "schema": MANIFEST_SCHEMA,
        "code_version": __version__,
        "method": method,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": agents.config_hash(config),
        "started": started,
        "finished": finished,
        "outputs": outputs,
        "summary": summary,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"manifest not found: {p}")
    doc = json.loads(p.read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError(f"{p} is not a run manifest")
    return doc


def verify_manifest(doc: dict) -> None:
    """The stored hash must be recomputable from the stored config."""
    method = doc["method"]
    cfg = _CONFIG_CLASSES[method].from_dict(doc["config"])
    if agents.config_hash(cfg) != doc["config_hash"]:
        raise ConfigError("manifest config hash does not match its config")


def _policy_from_checkpoint(path):
    """(policy callable, bundle or None); 'anchor' selects the fixed
    zero-delta policy."""
    if str(path) == "anchor":
        return codec.anchor_policy, None
    bundle = agents.load_checkpoint(path)
    actor = bundle.actor()
    return (lambda s: actor.act(s)), bundle


def _env_from_bundle(bundle, profile=None) -> codec.GopEnvironment:
    info = bundle.env_info
    n = int(info["n_frames"])
    structure = None if n == codec.hierarchical_b_gop16().size else codec.chain_gop(n)
    return codec.make_environment(
        profile or info["profile"],
        [float(q) for q in info["qp_levels"]],
        seed=int(info["seed"]),
        pool_size=int(info["pool_size"]),
        budget_factors=tuple(float(f) for f in info["budget_factors"]),
        structure=structure,
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = trainer_config_for(args.method, cfg["trainer"],
                              seed=args.seed, episodes=args.episodes)
    env_section = dict(cfg["environment"])
    if args.profile is not None:
        env_section["profile"] = args.profile
    env = build_environment(env_section, tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s for %d episodes (seed %d)",
             args.method, tcfg.episodes, tcfg.seed)
    started = _iso_now()
    try:
        result = _TRAINERS[args.method](tcfg, env)
    except nn.NonFiniteError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_RUNTIME
    finished = _iso_now()
    bad = [r for r in result.metrics
           if r["critic_loss"] is not None and not _finite(r["critic_loss"])]
    if bad:
        log.error("training diverged: non-finite critic loss at episode %d",
                  bad[0]["episode"])
        return EXIT_RUNTIME

    config_path = out / "config.json"
    with open(config_path, "w") as fh:
        json.dump({"method": args.method, "trainer": tcfg.to_dict(),
                   "environment": env_section},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    metrics_path = out / "metrics.csv"
    agents.write_metrics_csv(metrics_path, result.metrics)
    checkpoint_path = out / "checkpoint.zip"
    agents.save_checkpoint(checkpoint_path, result)
    write_manifest(
        out / "manifest.json",
        method=args.method,
        config=tcfg,
        outputs={"config": config_path.name, "metrics": metrics_path.name,
                 "checkpoint": checkpoint_path.name},
        summary={
            "mean_abs_deviation": result.final_eval["mean_abs_deviation"],
            "mean_tolerated_deviation":
                result.final_eval["mean_tolerated_deviation"],
            "mean_distortion_gain": result.final_eval["mean_distortion_gain"],
            "counters": result.counters,
        },
        started=started, finished=finished,
    )
    print(f"{args.method} seed {tcfg.seed}: "
          f"mean |dev| {result.final_eval['mean_abs_deviation']:.4f}, "
          f"tolerated {result.final_eval['mean_tolerated_deviation']:.4f}, "
          f"gain {result.final_eval['mean_distortion_gain']:.2f}")
    return EXIT_OK


def _finite(x) -> bool:
    try:
        return x is not None and abs(float(x)) < float("inf") and float(x) == float(x)
    except (TypeError, ValueError):
        return False


def cmd_eval(args) -> int:
    policy, bundle = _policy_from_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if bundle is not None:
        profiles = args.profiles or [bundle.env_info["profile"]]
        envs = [_env_from_bundle(bundle, profile=p) for p in profiles]
    else:
        profiles = args.profiles or ["easy"]
        envs = [codec.make_environment(p, list(RD_QP_LEVELS), seed=args.seed)
                for p in profiles]

    table_rows = []
    for profile, env in zip(profiles, envs):
        if env.n_frames == codec.hierarchical_b_gop16().size:
            curve = evaluation.build_rd_curve(
                policy, profile, seed=env.seed,
                pool_size=len(env.models),
            )
            evaluation.write_rd_curve_csv(out / f"rd_{profile}.csv", curve,
                                          RD_QP_LEVELS)
        for idx, (model, ep) in enumerate(env.eval_instances()):
            _, summary = codec.run_episode(model, policy, ep)
            codec.write_trace_csv(out / f"trace_{profile}_{idx:03d}.csv",
                                  summary)
            table_rows.append({
                "profile": profile,
                "instance": idx,
                "qp_level": summary.qp_level,
                "budget_factor": summary.budget_factor,
                "rate_deviation": summary.rate_deviation,
                "distortion_gain": summary.distortion_gain,
            })

    with open(out / "deviation_table.csv", "w", newline="") as fh:
        fh.write(f"# schema: {EVAL_SCHEMA}\n")
        writer = csv.writer(fh)
        cols = ["profile", "instance", "qp_level", "budget_factor",
                "rate_deviation", "distortion_gain"]
        writer.writerow(cols)
        for row in table_rows:
            writer.writerow([
                row["profile"], row["instance"],
                format(row["qp_level"], ".10g"),
                format(row["budget_factor"], ".10g"),
                format(row["rate_deviation"], ".10g"),
                format(row["distortion_gain"], ".10g"),
            ])
    stats = evaluation.rate_deviation_stats(
        [r["rate_deviation"] for r in table_rows]
    )
    with open(out / "eval_summary.json", "w") as fh:
        json.dump({"schema": EVAL_SCHEMA, "checkpoint": str(args.checkpoint),
                   "profiles": list(profiles), "deviation": stats},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"eval over {len(table_rows)} instances: "
          f"mean |dev| {stats['mean_raw']:.4f}, "
          f"tolerated {stats['mean_tolerated']:.4f}")
    return EXIT_OK


COMPARE_COLUMNS = ["run", "method", "seed", "mean_raw_deviation",
                   "mean_tolerated_deviation", "mean_distortion_gain",
                   "bd_rate_vs_anchor"]


def cmd_compare(args) -> int:
    # the anchor may legitimately reappear in --runs (self-comparison)
    run_dirs = [Path(args.anchor)] + [Path(d) for d in args.runs]
    loaded = []
    for d in run_dirs:
        manifest = read_manifest(d / "manifest.json")
        verify_manifest(manifest)
        bundle = agents.load_checkpoint(d / "checkpoint.zip")
        loaded.append((d, manifest, bundle))
    ref_env = loaded[0][2].env_info
    for d, _, bundle in loaded[1:]:
        for key in ("profile", "qp_levels", "budget_factors", "pool_size",
                    "seed", "n_frames"):
            if bundle.env_info[key] != ref_env[key]:
                raise ConfigError(
                    f"incompatible evaluation sets: {d} differs on {key}"
                )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = ref_env["profile"]
    rows = []
    curves = {}
    for d, manifest, bundle in loaded:
        actor = bundle.actor()
        policy = lambda s, _a=actor: _a.act(s)
        env = _env_from_bundle(bundle)
        devs = []
        gains = []
        for model, ep in env.eval_instances():
            _, summary = codec.run_episode(model, policy, ep)
            devs.append(summary.rate_deviation)
            gains.append(summary.distortion_gain)
        stats = evaluation.rate_deviation_stats(devs)
        curves[d] = evaluation.build_rd_curve(
            policy, profile, seed=int(ref_env["seed"]),
            pool_size=int(ref_env["pool_size"]),
        ) if int(ref_env["n_frames"]) == codec.hierarchical_b_gop16().size else None
        rows.append({
            "run": d.name, "method": manifest["method"],
            "seed": manifest["seed"],
            "mean_raw_deviation": stats["mean_raw"],
            "mean_tolerated_deviation": stats["mean_tolerated"],
            "mean_distortion_gain": float(sum(gains) / len(gains)),
        })
    anchor_curve = curves[loaded[0][0]]
    for (d, _, _), row in zip(loaded, rows):
        if anchor_curve is None or curves[d] is None:
            row["bd_rate_vs_anchor"] = ""
        else:
            row["bd_rate_vs_anchor"] = evaluation.bd_rate(anchor_curve,
                                                          curves[d])

    with open(out / "comparison.csv", "w", newline="") as fh:
        fh.write(f"# schema: {COMPARE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(COMPARE_COLUMNS)
        for row in rows:
            writer.writerow([
                row["run"], row["method"], row["seed"],
                format(row["mean_raw_deviation"], ".10g"),
                format(row["mean_tolerated_deviation"], ".10g"),
                format(row["mean_distortion_gain"], ".10g"),
                row["bd_rate_vs_anchor"] if row["bd_rate_vs_anchor"] == ""
                else format(row["bd_rate_vs_anchor"], ".10g"),
            ])
    lines = [" | ".join(COMPARE_COLUMNS)]
    for row in rows:
        lines.append(" | ".join([
            row["run"], row["method"], str(row["seed"]),
            f"{row['mean_raw_deviation']:.4f}",
            f"{row['mean_tolerated_deviation']:.4f}",
            f"{row['mean_distortion_gain']:.2f}",
            "" if row["bd_rate_vs_anchor"] == ""
            else f"{row['bd_rate_vs_anchor']:+.2f}%",
        ]))
    (out / "table.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


ORACLE_CHECK_JSONSCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema", "profile", "qp_level", "frames", "instances"],
    "properties": {
        "schema": {"const": ORACLE_CHECK_SCHEMA},
        "checkpoint": {"type": "string"},
        "profile": {"type": "string"},
        "qp_level": {"type": "number"},
        "frames": {"type": "integer", "minimum": 1, "maximum": 5},
        "instances": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["model_index", "budget_factor", "r_gop",
                             "oracle", "policy", "anchor_quality",
                             "quality_gap", "gain_ratio"],
                "properties": {
                    "model_index": {"type": "integer"},
                    "budget_factor": {"type": "number"},
                    "r_gop": {"type": "number", "exclusiveMinimum": 0},
                    "oracle": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["qps", "total_bits", "total_quality",
                                     "feasible", "deviation"],
                        "properties": {
                            "qps": {"type": "array",
                                    "items": {"type": "number"}},
                            "total_bits": {"type": "number"},
                            "total_quality": {"type": "number"},
                            "feasible": {"type": "boolean"},
                            "deviation": {"type": "number"},
                        },
                    },
                    "policy": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["qps", "total_bits", "total_quality",
                                     "feasible", "deviation"],
                        "properties": {
                            "qps": {"type": "array",
                                    "items": {"type": "number"}},
                            "total_bits": {"type": "number"},
                            "total_quality": {"type": "number"},
                            "feasible": {"type": "boolean"},
                            "deviation": {"type": "number"},
                        },
                    },
                    "anchor_quality": {"type": "number"},
                    "quality_gap": {"type": "number"},
                    "gain_ratio": {"type": ["number", "null"]},
                },
            },
        },
    },
}


def cmd_oracle_check(args) -> int:
    if not 1 <= args.frames <= 5:
        raise ConfigError("oracle instances support 1 to 5 decision frames")
    policy, bundle = _policy_from_checkpoint(args.checkpoint)
    if bundle is not None and int(bundle.env_info["n_frames"]) != args.frames:
        raise ConfigError(
            f"checkpoint was trained on {bundle.env_info['n_frames']}-frame "
            f"GOPs, not {args.frames}"
        )
    # the checkpoint's own training environment is the default; flags
    # override it piecemeal, and for 'anchor' they define it outright
    info = bundle.env_info if bundle is not None else {}
    profile = args.profile if args.profile is not None else \
        info.get("profile", "easy")
    qp_level = (float(args.qp_level) if args.qp_level is not None
                else float(info["qp_levels"][0]) if "qp_levels" in info
                else 32.0)
    pool_size = (int(args.pool_size) if args.pool_size is not None
                 else int(info.get("pool_size", 2)))
    seed = int(args.seed) if args.seed is not None else int(info.get("seed", 0))
    if args.budget_factors is not None:
        factors = [float(f) for f in args.budget_factors.split(",")]
    else:
        factors = [float(f) for f in info.get("budget_factors", (1.1, 1.2, 1.3))]
    env = codec.make_environment(
        profile, [qp_level], seed=seed,
        pool_size=pool_size, budget_factors=tuple(factors),
        structure=codec.chain_gop(args.frames),
    )
    instances = []
    for model_index, model in enumerate(env.models):
        for factor in factors:
            ep = codec.fresh_episode(model, qp_level, factor)
            oracle = evaluation.brute_force_allocate(
                model, qp_level, ep.r_gop, tolerance=args.tolerance
            )
            _, summary = codec.run_episode(model, policy, ep)
            _, anchor_summary = codec.run_episode(
                model, codec.anchor_policy,
                codec.fresh_episode(model, qp_level, factor),
            )
            anchor_quality = anchor_summary.total_quality
            oracle_gain = oracle.total_quality - anchor_quality
            policy_gain = summary.total_quality - anchor_quality
            instances.append({
                "model_index": model_index,
                "budget_factor": factor,
                "r_gop": ep.r_gop,
                "oracle": oracle.to_dict(),
                "policy": {
                    "qps": [f.qp for f in summary.frames],
                    "total_bits": summary.total_bits,
                    "total_quality": summary.total_quality,
                    "feasible": summary.rate_deviation <= args.tolerance,
                    "deviation": summary.rate_deviation,
                },
                "anchor_quality": anchor_quality,
                "quality_gap": oracle.total_quality - summary.total_quality,
                "gain_ratio": (policy_gain / oracle_gain
                               if abs(oracle_gain) > 1e-12 else None),
            })
    report = {
        "schema": ORACLE_CHECK_SCHEMA,
        "checkpoint": str(args.checkpoint),
        "profile": profile,
        "qp_level": qp_level,
        "frames": args.frames,
        "instances": instances,
    }
    jsonschema.validate(report, ORACLE_CHECK_JSONSCHEMA)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle_check.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for inst in instances:
        ratio = inst["gain_ratio"]
        print(f"model {inst['model_index']} f {inst['budget_factor']:g}: "
              f"policy dev {inst['policy']['deviation']:.4f} "
              f"gap {inst['quality_gap']:.3f}"
              + ("" if ratio is None else f" gain ratio {ratio:.3f}"))
    return EXIT_OK


def _sweep_jobs(cfg: dict, out: Path):
    sweep = cfg["sweep"]
    if not sweep:
        raise ConfigError("config has no sweep section")
    seeds = sweep.get("seeds", [0])
    methods = sweep.get("methods", ["nfwpo"])
    profiles = sweep.get("profiles", [cfg["environment"].get("profile", "easy")])
    jobs = []
    for method in methods:
        for profile in profiles:
            for seed in seeds:
                jobs.append({
                    "method": method, "profile": profile, "seed": int(seed),
                    "dir": out / f"{method}_{profile}_s{seed}",
                })
    return jobs


def _run_sweep_job(job, config_path, episodes):
    """One independent training process, single-threaded linear algebra."""
    cmd = [sys.executable, "-m", "fwalloc.cli", "train",
           "--config", str(config_path), "--method", job["method"],
           "--seed", str(job["seed"]), "--out", str(job["dir"]),
           "--profile", job["profile"]]
    if episodes is not None:
        cmd += ["--episodes", str(episodes)]
    env = dict(os.environ,
               OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1",
               MKL_NUM_THREADS="1")
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
    if proc.returncode != 0:
        log.error("sweep job %s failed:\n%s", job["dir"].name,
                  proc.stderr.strip())
    return job, proc.returncode


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = _sweep_jobs(cfg, out)
    workers = args.workers or int(cfg["sweep"].get("workers", 0)) \
        or min(4, os.cpu_count() or 1)
    log.info("sweep: %d jobs on %d workers", len(jobs), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(
            lambda j: _run_sweep_job(j, args.config, args.episodes), jobs
        ))

    failed = [job for job, code in results if code != 0]
    rows = []
    for job, code in sorted(results, key=lambda r: (r[0]["method"],
                                                    r[0]["profile"],
                                                    r[0]["seed"])):
        row = {"run": job["dir"].name, "method": job["method"],
               "profile": job["profile"], "seed": job["seed"],
               "exit": code}
        if code == 0:
            summary = read_manifest(job["dir"] / "manifest.json")["summary"]
            row.update({
                "mean_raw_deviation": summary["mean_abs_deviation"],
                "mean_tolerated_deviation":
                    summary["mean_tolerated_deviation"],
                "mean_distortion_gain": summary["mean_distortion_gain"],
            })
        rows.append(row)
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        fh.write(f"# schema: {SWEEP_SCHEMA}\n")
        writer = csv.writer(fh)
        cols = ["run", "method", "profile", "seed", "exit",
                "mean_raw_deviation", "mean_tolerated_deviation",
                "mean_distortion_gain"]
        writer.writerow(cols)
        for row in rows:
            writer.writerow([
                row["run"], row["method"], row["profile"], row["seed"],
                row["exit"],
                *(format(row[c], ".10g") if c in row else ""
                  for c in cols[5:]),
            ])
    print(f"sweep finished: {len(jobs) - len(failed)}/{len(jobs)} runs ok")
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fwalloc",
        description="Frame-level bit allocation agents on a synthetic "
                    "GOP encoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True, choices=sorted(_TRAINERS))
    p.add_argument("--seed", type=int, default=None,
                   help="override trainer.seed")
    p.add_argument("--episodes", type=int, default=None,
                   help="override trainer.episodes")
    p.add_argument("--profile", default=None,
                   help="override environment.profile")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or 'anchor')")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--profiles", nargs="+", default=None)
    p.add_argument("--seed", type=int, default=0,
                   help="environment seed when no checkpoint env exists")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="side-by-side deviation and BD-rate")
    p.add_argument("--anchor", required=True,
                   help="run directory the BD-rates are measured against")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="fan out train over seeds x methods x "
                                     "profiles")
    p.add_argument("--config", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check",
                       help="policy vs brute-force optimum on tiny instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--profile", default=None,
                   help="override the checkpoint environment's profile")
    p.add_argument("--qp-level", type=float, default=None,
                   help="override the checkpoint environment's first level")
    p.add_argument("--budget-factors", default=None,
                   help="comma-separated overrides for the budget factors")
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--pool-size", type=int, default=None,
                   help="override the checkpoint environment's pool size")
    p.add_argument("--seed", type=int, default=None,
                   help="override the checkpoint environment's seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FWALLOC_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit 1
        log.exception("command failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
