"""Command line entry point: simulate | train | sweep | welfare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .agents import Level0Attacker, Level0Defender, load_policy, save_policy
from .config import RunConfig, load_config, override, save_config
from .learning import train_level_k, write_training_log
from .powerflow import ConfigError
from .rng import derive_key, draw_episodes
from .snfg import ATTACKER, DEFENDER, check_policy_binning, simulate_batch, write_trajectory_csv
from .studies import (SweepSettings, design_sweep, mixed_rewards, p_sweep, read_sweep_csv,
                      welfare_analysis, write_analysis_csv, write_sweep_csv)
from . import plotting

log = logging.getLogger("cybergrid")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, help="worker count (overrides the config)")
    parser.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cybergrid",
                                     description="Cyber attack games on a three-node distribution feeder.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run episodes and write the trajectories")
    _common(sim)
    sim.add_argument("--defender", help="policy CSV for the defender (default: level-0)")
    sim.add_argument("--attacker", help="policy CSV for the attacker (default: level-0)")
    sim.add_argument("--level0", action="store_true", help="ignore policy files, use level-0 players")
    sim.add_argument("--p", type=float, help="probability that an attacker exists")
    sim.add_argument("--episodes", type=int)
    sim.add_argument("--steps", type=int)
    sim.add_argument("--attack-at-step", type=int, help="attacker switches on at this step")

    tr = sub.add_parser("train", help="train a level-k policy by Monte Carlo policy iteration")
    _common(tr)
    tr.add_argument("--player", choices=[DEFENDER, ATTACKER], default=DEFENDER)
    tr.add_argument("--level", type=int, default=1)
    tr.add_argument("--p", type=float, help="attacker probability during training")

    sw = sub.add_parser("sweep", help="attack-probability sweep or design sweep")
    _common(sw)
    sw.add_argument("--kind", choices=["p", "design"], default="p")

    wf = sub.add_parser("welfare", help="slopes and break-even costs from a design sweep")
    _common(wf)
    wf.add_argument("--sweep", dest="sweep_csv", help="existing design sweep CSV (else run one)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return override(cfg, master_seed=args.seed, output_dir=args.out, threads=args.threads)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    if not out.parent.is_dir():
        raise ConfigError(f"parent of output directory {out} does not exist")
    out.mkdir(exist_ok=True)
    return out


def _load_player(path, role, cfg: RunConfig):
    if path is None:
        return (Level0Defender if role == DEFENDER else Level0Attacker)(cfg.scenario)
    policy = load_policy(path, cfg.scenario)
    if policy.player != role:
        raise ConfigError(f"{path} holds a {policy.player} policy, expected {role}")
    check_policy_binning(policy, cfg.observation)
    return policy


def cmd_simulate(args, cfg: RunConfig, plots: bool) -> dict:
    cfg = override(cfg, "simulate", p=args.p, episodes=args.episodes, steps=args.steps,
                   attack_at_step=args.attack_at_step)
    sc = cfg.simulate
    out = _outdir(cfg)
    defender = _load_player(None if args.level0 else args.defender, DEFENDER, cfg)
    attacker = _load_player(None if args.level0 else args.attacker, ATTACKER, cfg)
    key = derive_key(cfg.master_seed, "simulate")
    draws = draw_episodes(key, 0, range(sc.episodes), sc.steps, noise=cfg.observation.noise > 0)
    tr = simulate_batch(cfg.scenario, cfg.observation, defender, attacker, draws, sc.p, sc.attack_at_step)
    write_trajectory_csv(out / "trajectory.csv", tr)
    summary = {"episodes": sc.episodes, "steps": sc.steps, "p": sc.p,
               "attacker_present_fraction": float(tr.present.mean()),
               "mean_defender_reward": float(tr.r_D.mean()),
               "mean_attacker_reward": float(tr.r_A.mean())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plots:
        plotting.plot_trajectory(tr, 0, out / "trajectory.png", cfg.scenario.epsilon, sc.attack_at_step)
    return cfg, summary


def cmd_train(args, cfg: RunConfig, plots: bool) -> dict:
    if args.level < 1:
        raise ConfigError("--level must be >= 1")
    cfg = override(cfg, "training", train_p=args.p)
    out = _outdir(cfg)
    res = train_level_k(args.level, args.player, cfg.scenario, cfg.training, seed=cfg.master_seed,
                        obs_model=cfg.observation, threads=cfg.threads)
    stem = f"{args.player}_level{args.level}"
    save_policy(res.policy, out / f"{stem}_policy.csv")
    write_training_log(out / f"{stem}_training.csv", res.log)
    if plots:
        plotting.plot_training_log(res.log, out / f"{stem}_training.png")
    return cfg, {"converged": res.converged, "iterations": res.iterations, "states": len(res.policy)}


def _settings(cfg: RunConfig, out: Path) -> SweepSettings:
    return SweepSettings(n_eval_episodes=cfg.sweep.n_eval_episodes, obs_model=cfg.observation,
                         cell_dir=str(out / "cells"), workers=cfg.threads)


def _design(cfg: RunConfig, out: Path):
    sw = cfg.sweep
    return design_sweep(cfg.scenario, sw.p2_grid, sw.p3_grid, cfg.training, cfg.master_seed,
                        _settings(cfg, out), sw.fixed_p3)


def cmd_sweep(args, cfg: RunConfig, plots: bool) -> dict:
    out = _outdir(cfg)
    sw = cfg.sweep
    if args.kind == "p":
        res = p_sweep(cfg.scenario, sw.train_ps, sw.sim_ps, cfg.training, cfg.master_seed,
                      _settings(cfg, out))
        write_sweep_csv(out / "p_sweep.csv", res)
        if plots:
            plotting.plot_p_sweep(res, out / "p_sweep.png")
    else:
        res = _design(cfg, out)
        write_sweep_csv(out / "design_sweep.csv", res)
        if plots:
            p = cfg.welfare.attack_probability
            plotting.plot_design_surface(mixed_rewards(res, p), out / "design_sweep.png", p)
    return cfg, {"records": len(res.records)}


def cmd_welfare(args, cfg: RunConfig, plots: bool) -> dict:
    out = _outdir(cfg)
    if args.sweep_csv:
        res = read_sweep_csv(args.sweep_csv)
    else:
        res = _design(cfg, out)
        write_sweep_csv(out / "design_sweep.csv", res)
    rows = welfare_analysis(res, cfg.welfare, cfg.sweep.p3_cutoff)
    write_analysis_csv(out / "welfare.csv", rows)
    if plots:
        plotting.plot_slopes(rows, out / "slopes.png")
        plotting.plot_break_even(rows, out / "break_even.png")
    return cfg, {"rows": len(rows)}


_COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sweep": cmd_sweep, "welfare": cmd_welfare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("always", RuntimeWarning)
            cfg, summary = _COMMANDS[args.command](args, cfg, not args.no_plots)
        save_config(cfg, Path(cfg.output_dir) / "config.yaml")
    except (ConfigError, OSError, ValueError) as exc:
        print(f"cybergrid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
