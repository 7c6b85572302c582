"""Experiment pipeline: matchups, the attack-probability sweep, the
(p2_max, p3_max) design sweep, slope extraction and the welfare arithmetic."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import Level0Attacker
from .learning import TrainConfig, train_level_k
from .powerflow import ConfigError, ScenarioParams
from .rng import chunk_ranges, derive_key, draw_episodes
from .snfg import ObservationModel, simulate_batch

DEFAULT_TRAIN_PS = tuple(float(x) for x in np.round(np.logspace(-2, 0, 7), 6))
DEFAULT_P2_GRID = tuple(round(0.2 + 0.25 * i, 6) for i in range(10))
DEFAULT_P3_GRID = tuple(round(0.25 * i, 6) for i in range(1, 11))


@dataclass(frozen=True)
class WelfareParams:
    C_E: float = 80.0  # $/MW-hr
    C_PQ: float = 300.0  # $ per sensitive customer per power-quality event
    sensitive_customers: float = 1.0
    step_minutes: float = 1.0
    attack_probability: float = 0.01

    def __post_init__(self):
        if min(self.C_E, self.C_PQ, self.sensitive_customers, self.attack_probability) < 0:
            raise ConfigError("welfare parameters must be nonnegative")
        if self.step_minutes <= 0:
            raise ConfigError("step_minutes must be positive")
        if self.attack_probability > 1:
            raise ConfigError("attack_probability must be at most 1")


@dataclass
class SweepRecord:
    p2_max: float
    p3_max: float
    train_p: float
    sim_p: float
    mean_reward: float
    stderr: float
    n_episodes: int
    converged: bool
    normalized_reward: float = math.nan
    normalized_stderr: float = math.nan


@dataclass
class SweepResult:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def select(self, **conds) -> list:
        return [r for r in self.records
                if all(abs(getattr(r, k) - v) < 1e-9 for k, v in conds.items())]


SWEEP_COLUMNS = ("p2_max", "p3_max", "train_p", "sim_p", "mean_reward", "stderr", "n_episodes",
                 "converged", "normalized_reward", "normalized_stderr")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_sweep_csv(path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in result.records:
            w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])


def read_sweep_csv(path) -> SweepResult:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        def num(name):
            v = row.get(name, "")
            return math.nan if v in ("", None) else float(v)
        out.append(SweepRecord(
            p2_max=num("p2_max"), p3_max=num("p3_max"), train_p=num("train_p"), sim_p=num("sim_p"),
            mean_reward=num("mean_reward"), stderr=num("stderr"),
            n_episodes=int(float(row["n_episodes"])), converged=row["converged"] in ("1", "True", "true"),
            normalized_reward=num("normalized_reward"), normalized_stderr=num("normalized_stderr")))
    return SweepResult(out)


# ---------------------------------------------------------------- matchups

@dataclass
class MatchupResult:
    mean_reward: float
    stderr: float
    n_episodes: int
    sim_p: float
    episode_means: np.ndarray

    @property
    def normalized_defined(self) -> bool:
        return self.sim_p > 0

    @property
    def normalized(self) -> float:
        return self.mean_reward / self.sim_p if self.sim_p > 0 else math.nan

    @property
    def normalized_stderr(self) -> float:
        return self.stderr / self.sim_p if self.sim_p > 0 else math.nan


def evaluate_matchup(defender, attacker, params: ScenarioParams, sim_p: float, n_episodes: int,
                     key, obs_model: Optional[ObservationModel] = None, n_steps: int = 100,
                     chunk: int = 500, attack_at_step: Optional[int] = None,
                     purpose: int = 0) -> MatchupResult:
    """Mean defender reward per step over `n_episodes` episodes.

    The normalized value (mean / sim_p) is the reward per step of actual
    attacker presence and is undefined (nan) when sim_p is 0.
    """
    obs_model = obs_model or ObservationModel()
    means = []
    for a, b in chunk_ranges(n_episodes, chunk):
        draws = draw_episodes(key, purpose, np.arange(a, b), n_steps, noise=obs_model.noise > 0)
        tr = simulate_batch(params, obs_model, defender, attacker, draws, sim_p, attack_at_step)
        means.append(tr.r_D.mean(axis=1))
    ep = np.concatenate(means)
    se = float(ep.std(ddof=1) / math.sqrt(len(ep))) if len(ep) > 1 else 0.0
    return MatchupResult(float(ep.mean()), se, len(ep), sim_p, ep)


@dataclass
class AttackEntryResult:
    """Per-episode metrics over the steps after the attacker enters."""

    post_reward: np.ndarray
    v2_out_fraction: np.ndarray
    pre_reward: np.ndarray


def attack_entry_study(defender, params: ScenarioParams, n_episodes: int, key,
                       attack_at_step: int = 50, n_steps: int = 100,
                       obs_model: Optional[ObservationModel] = None, chunk: int = 500) -> AttackEntryResult:
    """Attacker present with certainty but acting only from `attack_at_step`."""
    obs_model = obs_model or ObservationModel()
    attacker = Level0Attacker(params)
    post, out, pre = [], [], []
    for a, b in chunk_ranges(n_episodes, chunk):
        draws = draw_episodes(key, 0, np.arange(a, b), n_steps, noise=obs_model.noise > 0)
        tr = simulate_batch(params, obs_model, defender, attacker, draws, 1.0, attack_at_step)
        s = attack_at_step
        post.append(tr.r_D[:, s:].mean(axis=1))
        pre.append(tr.r_D[:, :s].mean(axis=1) if s > 0 else np.full(b - a, np.nan))
        out.append((np.abs(tr.v2[:, s:] - 1.0) > params.epsilon).mean(axis=1))
    return AttackEntryResult(np.concatenate(post), np.concatenate(out), np.concatenate(pre))


def mix_rewards(r_at_p0: float, r_at_p1: float, p: float) -> float:
    """Reward at attack probability p from the two endpoint simulations."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    return (1.0 - p) * r_at_p0 + p * r_at_p1


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepSettings:
    n_eval_episodes: int = 2000
    obs_model: ObservationModel = ObservationModel()
    cell_dir: Optional[str] = None
    workers: int = 1


def _cell_path(cell_dir, name, job: dict) -> Optional[Path]:
    """Result file for one cell, tagged with a digest of everything it depends on."""
    if cell_dir is None:
        return None
    inputs = [asdict(job["params"]), asdict(job["cfg"]), asdict(job["obs_model"]), job["sim_ps"],
              job["n_eval"], list(job["eval_key"]), job["train_seed"]]
    digest = hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()[:12]
    return Path(cell_dir) / f"{name}_{digest}.json"


def _run_cell(job: dict) -> list:
    path = job.get("path")
    if path is not None and Path(path).exists():
        with open(path) as fh:
            return [SweepRecord(**r) for r in json.load(fh)]
    params: ScenarioParams = job["params"]
    cfg: TrainConfig = job["cfg"]
    obs_model = job["obs_model"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        trained = train_level_k(1, "defender", params, cfg, seed=job["train_seed"], obs_model=obs_model)
    attacker = Level0Attacker(params)
    recs = []
    for sim_p in job["sim_ps"]:
        m = evaluate_matchup(trained.policy, attacker, params, sim_p, job["n_eval"], job["eval_key"],
                             obs_model, cfg.steps_per_episode)
        recs.append(SweepRecord(params.p2_max, params.p3_max, cfg.train_p, float(sim_p), m.mean_reward,
                                m.stderr, m.n_episodes, trained.converged, m.normalized,
                                m.normalized_stderr))
    if path is not None:
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "w") as fh:
            json.dump([asdict(r) for r in recs], fh)
        os.replace(tmp, path)
    return recs


def _run_jobs(jobs: list, workers: int) -> SweepResult:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_cell, jobs))
    else:
        parts = [_run_cell(j) for j in jobs]
    return SweepResult([r for part in parts for r in part])


def p_sweep(params: ScenarioParams, train_ps, sim_ps, cfg: TrainConfig, seed: int,
            settings: SweepSettings = SweepSettings()) -> SweepResult:
    """One level-1 defender per training p, each scored at every simulation p."""
    if not train_ps or not sim_ps:
        raise ConfigError("train_ps and sim_ps must be nonempty")
    if settings.cell_dir:
        os.makedirs(settings.cell_dir, exist_ok=True)
    eval_key = derive_key(seed, "p_sweep_eval")
    jobs = []
    for tp in train_ps:
        job = dict(params=params, cfg=cfg.with_(train_p=float(tp)), obs_model=settings.obs_model,
                   train_seed=int(derive_key(seed, "p_sweep_train", round(float(tp), 9))[0]),
                   sim_ps=[float(s) for s in sim_ps], n_eval=settings.n_eval_episodes,
                   eval_key=eval_key)
        job["path"] = _cell_path(settings.cell_dir, f"p_train{float(tp):.6g}", job)
        jobs.append(job)
    return _run_jobs(jobs, settings.workers)


def design_sweep(params: ScenarioParams, p2_grid, p3_grid, cfg: TrainConfig, seed: int,
                 settings: SweepSettings = SweepSettings(),
                 fixed_p3: Optional[float] = None) -> SweepResult:
    """Train at cfg.train_p for each (p2_max, p3_max) and score at sim_p = 0 and 1.

    The generator's real output p3 tracks p3_max (it runs at capability)
    unless `fixed_p3` holds it at one value across the grid.
    """
    if not p2_grid or not p3_grid:
        raise ConfigError("p2_grid and p3_grid must be nonempty")
    if settings.cell_dir:
        os.makedirs(settings.cell_dir, exist_ok=True)
    eval_key = derive_key(seed, "design_eval")
    jobs = []
    for p2 in p2_grid:
        for p3m in p3_grid:
            extra = {} if fixed_p3 is None else {"p3": float(fixed_p3)}
            cell = params.with_(p2_max=float(p2), p3_max=float(p3m), **extra)
            job = dict(params=cell, cfg=cfg, obs_model=settings.obs_model,
                       train_seed=int(derive_key(seed, "design_train", round(float(p2), 9),
                                                 round(float(p3m), 9))[0]),
                       sim_ps=[0.0, 1.0], n_eval=settings.n_eval_episodes, eval_key=eval_key)
            job["path"] = _cell_path(settings.cell_dir, f"design_p2{float(p2):.6g}_p3{float(p3m):.6g}", job)
            jobs.append(job)
    return _run_jobs(jobs, settings.workers)


def mixed_rewards(result: SweepResult, p: float) -> list[tuple[float, float, float, float]]:
    """(p2_max, p3_max, reward, stderr) at attack probability p for every cell.

    Uses records simulated at exactly p when present, otherwise mixes the
    p = 0 and p = 1 endpoints.
    """
    cells = sorted({(r.p2_max, r.p3_max) for r in result.records})
    out = []
    for p2, p3 in cells:
        exact = result.select(p2_max=p2, p3_max=p3, sim_p=p)
        if exact:
            out.append((p2, p3, exact[0].mean_reward, exact[0].stderr))
            continue
        r0 = result.select(p2_max=p2, p3_max=p3, sim_p=0.0)
        r1 = result.select(p2_max=p2, p3_max=p3, sim_p=1.0)
        if not (r0 and r1):
            continue
        se = math.sqrt(((1 - p) * r0[0].stderr) ** 2 + (p * r1[0].stderr) ** 2)
        out.append((p2, p3, mix_rewards(r0[0].mean_reward, r1[0].mean_reward, p), se))
    return out


# ---------------------------------------------------------------- slope and welfare

@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    n_points: int


def fit_line(x, y) -> SlopeFit:
    """Ordinary least squares; R^2 is 1 when the data have no spread to explain."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 1e-30 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, len(x))


def extract_slope(result: SweepResult, p2_max: float, p3_cutoff: float = 1.5,
                  mix_p: float = 0.01) -> SlopeFit:
    pts = [(p3, r) for p2, p3, r, _ in mixed_rewards(result, mix_p)
           if abs(p2 - p2_max) < 1e-9 and p3 <= p3_cutoff + 1e-9]
    if len(pts) < 3:
        raise ConfigError(f"need at least 3 points with p3_max <= {p3_cutoff} at p2_max={p2_max}, "
                          f"found {len(pts)}")
    x, y = zip(*sorted(pts))
    return fit_line(x, y)


def _events_per_hour(slope: float, w: WelfareParams) -> float:
    # reward lost per step and MW, read as power-quality events, scaled to an hour
    return max(-slope, 0.0) * (60.0 / w.step_minutes) * w.sensitive_customers


def welfare_cost_rate(slope: float, w: WelfareParams) -> float:
    """$ per MW of p3_max per hour; a nonnegative slope carries no cost."""
    return _events_per_hour(slope, w) * w.C_PQ


def break_even_cpq(slope: float, C_E: float, w: WelfareParams) -> float:
    """Power-quality event cost at which the energy value is exactly cancelled.

    Infinite when the slope is not negative (no welfare cost to offset).
    """
    rate = _events_per_hour(slope, w)
    if rate == 0.0:
        return math.inf
    return C_E / rate


ANALYSIS_COLUMNS = ("p2_max", "slope", "r2", "welfare_cost_rate", "break_even_cpq")


@dataclass
class WelfareRow:
    p2_max: float
    slope: float
    r2: float
    welfare_cost_rate: float
    break_even_cpq: float


def welfare_analysis(result: SweepResult, w: WelfareParams, p3_cutoff: float = 1.5) -> list[WelfareRow]:
    if not result.records:
        raise ConfigError("sweep result is empty")
    rows = []
    for p2 in sorted({r.p2_max for r in result.records}):
        fit = extract_slope(result, p2, p3_cutoff, w.attack_probability)
        rows.append(WelfareRow(p2, fit.slope, fit.r2, welfare_cost_rate(fit.slope, w),
                               break_even_cpq(fit.slope, w.C_E, w)))
    return rows


def write_analysis_csv(path, rows: list[WelfareRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ANALYSIS_COLUMNS)
        for r in rows:
            wr.writerow([_fmt(r.p2_max), _fmt(r.slope), _fmt(r.r2), _fmt(r.welfare_cost_rate),
                         "inf" if math.isinf(r.break_even_cpq) else _fmt(r.break_even_cpq)])
