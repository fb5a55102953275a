"""Command-line pipeline: gen -> train -> eval / adapt / export-graphs / report.

Exit codes: 0 success, 1 usage or validation failure, 2 runtime failure.
All randomness in a run derives from one seed through named stream splits,
so every artifact is reproducible from (config, seed, input files).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import adapt as adapt_mod
from . import evaluation as ev
from .config import ConfigError, ExperimentConfig, load_config
from .diffcore import RngStream
from .formats import (
    FormatError,
    canonical_json,
    file_fingerprint,
    load_model,
    read_dataset,
    save_checkpoint,
    save_model,
    load_checkpoint,
)
from .model import ModelConfig, ModelParams
from .sim.dataset import gen_dataset, generate_episode
from .sim.envs import SEEN_ENVS, CatalogueError, dynamics_for
from .train import (
    LagrangianState,
    TrainingError,
    build_transitions,
    eval_mse,
    train_baseline,
    train_spartan,
    write_metrics_csv,
)
from .diffcore.optim import AdamState

PROTOCOLS = ("shd", "rollout", "robustness", "targets")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we want 1
        raise UsageError(message)


def _load_experiment(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


# -- gen -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_experiment(args)
    sim = cfg.sim
    gen_dataset(
        sim.world,
        episodes_per_env=sim.episodes_per_env,
        T=sim.episode_length,
        seed=cfg.seed,
        path=args.out,
        n_balls=sim.n_balls,
    )
    print(f"wrote {args.out} ({len(SEEN_ENVS) * sim.episodes_per_env} episodes, seed {cfg.seed})")
    return 0


# -- train ---------------------------------------------------------------------


def _resume_paths(out_dir):
    return (
        os.path.join(out_dir, "resume.sptn"),
        os.path.join(out_dir, "resume.opt.sptn"),
        os.path.join(out_dir, "resume.state.json"),
    )


def _save_resume(out_dir, step, params, opt, lagr, gumbel_counter, rows):
    p_path, o_path, s_path = _resume_paths(out_dir)
    save_model(p_path, params, meta={"step": step})
    opt_tensors = {}
    for name, m in opt.m.items():
        opt_tensors[f"m.{name}"] = m
        opt_tensors[f"v.{name}"] = opt.v[name]
    save_checkpoint(o_path, opt_tensors)
    state = {
        "step": step,
        "adam_t": opt.t,
        "lambda": repr(lagr.lam),
        "ma": repr(lagr.ma),
        "lagr_step": lagr.step,
        "gumbel_counter": gumbel_counter,
        "rows": [[r.step, repr(r.batch_mse), repr(r.sum_paths), repr(r.lam), repr(r.temperature)] for r in rows],
    }
    with open(s_path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(state) + "\n")


def _load_resume(out_dir):
    from .train import MetricsRow

    p_path, o_path, s_path = _resume_paths(out_dir)
    params, _ = load_model(p_path)
    opt_tensors, _ = load_checkpoint(o_path)
    opt = AdamState()
    for name, arr in opt_tensors.items():
        kind, pname = name.split(".", 1)
        (opt.m if kind == "m" else opt.v)[pname] = arr.copy()
    with open(s_path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    opt.t = state["adam_t"]
    lagr = LagrangianState(lam=float(state["lambda"]), ma=float(state["ma"]), step=state["lagr_step"])
    rows = [
        MetricsRow(r[0], float(r[1]), float(r[2]), float(r[3]), float(r[4]), 0.0)
        for r in state["rows"]
    ]
    return {
        "params": params,
        "opt": opt,
        "lagr": lagr,
        "rows": rows,
        "step": state["step"],
        "gumbel_counter": state["gumbel_counter"],
    }


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    os.makedirs(args.out, exist_ok=True)
    _, episodes = read_dataset(args.data)
    data = build_transitions(episodes, cfg.train.val_fraction, cfg.seed)
    fp = cfg.fingerprint()

    if args.tau is not None:
        tau = args.tau
        dense_params = None
    else:
        dense_params, tau, base_rows = train_baseline(
            data, cfg.model, cfg.train.baseline_config(cfg.seed)
        )
        save_model(
            os.path.join(args.out, "dense.sptn"), dense_params,
            meta={"tau": repr(tau), "config_fingerprint": fp},
        )
        write_metrics_csv(base_rows, os.path.join(args.out, "metrics_dense.csv"))
    with open(os.path.join(args.out, "tau.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json({"tau": repr(tau)}) + "\n")
    print(f"tau = {tau:.6e}")
    if args.dense_only:
        return 0

    resume = _load_resume(args.out) if args.resume else None
    hook = None
    if args.checkpoint_every:
        def hook(step, params, opt, lagr, counter, rows):
            _save_resume(args.out, step, params, opt, lagr, counter, rows)

    params, rows, lagr, final_val = train_spartan(
        data, tau, cfg.model, cfg.train.spartan_config(cfg.seed), resume=resume, checkpoint_hook=hook
    )
    save_model(
        os.path.join(args.out, "spartan.sptn"), params,
        meta={"tau": repr(tau), "final_val_mse": repr(final_val), "lambda": repr(lagr.lam),
              "config_fingerprint": fp},
    )
    write_metrics_csv(rows, os.path.join(args.out, "metrics.csv"))
    print(f"final validation MSE {final_val:.6e} (tau {tau:.6e}), lambda {lagr.lam:.4g}")
    return 0


# -- eval ------------------------------------------------------------------------


def _select_episodes(episodes, max_episodes, seed):
    if max_episodes is None or max_episodes >= len(episodes):
        return episodes
    # deterministic spread across the file (envs are interleaved by blocks)
    idx = np.linspace(0, len(episodes) - 1, max_episodes).astype(int)
    return [episodes[i] for i in idx]


def cmd_eval(args) -> int:
    cfg = _load_experiment(args)
    protocols = tuple(args.protocols.split(",")) if args.protocols else cfg.eval.protocols
    bad = [p for p in protocols if p not in PROTOCOLS]
    if bad:
        raise UsageError(f"unknown protocol(s) {bad}; valid: {list(PROTOCOLS)}")
    params, sidecar = load_model(args.checkpoint)
    dense = None
    if args.dense_checkpoint:
        dense, _ = load_model(args.dense_checkpoint)
    _, episodes = read_dataset(args.data)
    episodes = _select_episodes(episodes, cfg.eval.max_episodes, cfg.seed)

    results = {}
    if "shd" in protocols:
        results["shd"] = ev.eval_shd(params, episodes)
        if dense is not None:
            results["shd_dense"] = ev.eval_shd_dense(dense, episodes, cfg.eval.n_thresholds)
    if "rollout" in protocols:
        results["rollout"] = ev.rollout_errors(params, episodes, cfg.eval.horizon)
        if dense is not None:
            results["rollout_dense"] = ev.rollout_errors(dense, episodes, cfg.eval.horizon)
    if "robustness" in protocols:
        per_env = cfg.eval.robustness_transitions_per_env
        results["robustness"] = ev.robustness_eval(params, episodes, per_env)
        if dense is not None:
            results["robustness_dense"] = ev.robustness_eval(dense, episodes, per_env)
    if "targets" in protocols:
        results["targets"] = ev.target_f1(params, episodes)

    os.makedirs(args.out, exist_ok=True)
    ev.emit_report(results, args.out, config_fingerprint=cfg.fingerprint(),
                   dataset_fingerprint=file_fingerprint(args.data))
    if cfg.eval.export_graphs:
        ev.export_graphs(params, episodes, os.path.join(args.out, "graphs"), cfg.eval.export_graphs)
    for proto in sorted(results):
        print(proto, canonical_json(results[proto]))
    return 0


# -- adapt -----------------------------------------------------------------------


def _make_trajectories(env_id, sim_section, seed, count, label):
    """Fresh trajectories (token arrays) for adaptation; never reuses training seeds."""
    master = RngStream(seed)
    out = []
    for k in range(count):
        ep = generate_episode(env_id, sim_section.world, sim_section.episode_length,
                              master.child(f"{label}/{env_id}/{k}"), n_balls=sim_section.n_balls)
        out.append(ep.tokens())
    return out


def cmd_adapt(args) -> int:
    cfg = _load_experiment(args)
    params, _ = load_model(args.checkpoint)
    dense = None
    if args.dense_checkpoint:
        dense, _ = load_model(args.dense_checkpoint)
    envs = [args.env_id] if args.env_id is not None else list(cfg.adapt.envs)
    for env in envs:
        dynamics_for(env)  # validate ids before any compute
    if cfg.adapt.n_trajectories < 1:
        raise UsageError("adaptation needs at least one trajectory")

    acfg = cfg.adapt.adapt_config(cfg.seed)
    table = {}
    for env in envs:
        trajs = _make_trajectories(env, cfg.sim, cfg.seed, cfg.adapt.n_trajectories, "adapt")
        heldout = _make_trajectories(env, cfg.sim, cfg.seed, cfg.adapt.heldout_trajectories, "adapt-heldout")
        res = adapt_mod.adapt_token(params, trajs, acfg)
        row = {
            "adapted": res.to_dict(),
            "heldout_mse": adapt_mod.evaluate_adapted(params, res.token, heldout),
        }
        codebook = params["codebook"].data
        per_row = {str(k): adapt_mod.evaluate_adapted(params, codebook[k], heldout)
                   for k in range(codebook.shape[0])}
        row["codebook_heldout_mse"] = per_row
        row["best_codebook_mse"] = min(per_row.values())
        if env in SEEN_ENVS:
            row["lower_bound_mse"] = adapt_mod.evaluate_with_env(params, env, heldout)
        if dense is not None:
            tuned, curve = ev.finetune_baseline(dense, trajs, cfg.adapt.finetune_steps, cfg.adapt.finetune_lr)
            ok = bool(np.isfinite(curve[-1])) if curve else True
            row["finetune_heldout_mse"] = ev.evaluate_finetuned(tuned, heldout) if ok else None
            row["finetune_failed"] = not ok
        table[str(env)] = row
        print(f"env {env}: adapted heldout MSE {row['heldout_mse']:.6e}"
              + (f", lower bound {row['lower_bound_mse']:.6e}" if "lower_bound_mse" in row else ""))

    os.makedirs(args.out, exist_ok=True)
    payload = {"config_fingerprint": cfg.fingerprint(), "envs": table}
    with open(os.path.join(args.out, "adapt.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload) + "\n")
    return 0


# -- report / export-graphs --------------------------------------------------------


def cmd_report(args) -> int:
    merged = {}
    for src in args.inputs:
        with open(src, "r", encoding="utf-8") as fh:
            merged[os.path.basename(src)] = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "combined_report.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(merged) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_export_graphs(args) -> int:
    params, _ = load_model(args.checkpoint)
    _, episodes = read_dataset(args.data)
    if args.limit:
        episodes = episodes[: args.limit]
    paths = ev.export_graphs(params, episodes, args.out)
    print(f"wrote {len(paths)} graph files to {args.out}")
    return 0


# -- entry -----------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="sparseworld", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="experiment config JSON (defaults if omitted)")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")

    g = sub.add_parser("gen", help="generate a dataset file")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train dense baseline (tau) then the sparse model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tau", type=float, default=None, help="skip baseline training, use this target loss")
    t.add_argument("--dense-only", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from the out dir's resume snapshot")
    t.add_argument("--checkpoint-every", action="store_true", help="write resumable snapshots during training")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run evaluation protocols on a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dense-checkpoint", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--protocols", default=None, help=f"comma list from {PROTOCOLS}")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("adapt", help="few-shot adaptation sweep (token descent + baselines)")
    common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dense-checkpoint", default=None)
    a.add_argument("--env-id", type=int, default=None, help="single environment instead of the config sweep")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_adapt)

    r = sub.add_parser("report", help="merge protocol outputs into one file")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)

    x = sub.add_parser("export-graphs", help="write per-episode predicted/true graph text files")
    common(x)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--limit", type=int, default=20)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_graphs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, CatalogueError, FormatError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
