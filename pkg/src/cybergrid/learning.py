"""Level-k policy training by Monte Carlo policy iteration.

Each round rolls out the current stochastic policy against a fixed opponent,
estimates Q(state, move) as the mean of the per-step rewards over the rest of
the episode, and moves a fraction of the probability mass onto the best move.
Rarely visited states are handed back to the level-0 player at the end.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol

import numpy as np

from .agents import Level0Attacker, Level0Defender, StateCodec, TabularPolicy, level0_for
from .powerflow import ConfigError, ScenarioParams
from .rng import chunk_ranges, derive_key, draw_episodes
from .snfg import ATTACKER, DEFENDER, N_TAP_MOVES, ObservationModel, simulate_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    episodes_per_eval: int = 1000
    steps_per_episode: int = 100
    improvement_step: float = 0.3
    convergence_tol: float = 1e-3
    convergence_window: int = 3
    max_iterations: int = 40
    visit_threshold: int = 20
    train_p: float = 0.2
    common_random_numbers: bool = True
    chunk_episodes: int = 250

    def __post_init__(self):
        for name in ("episodes_per_eval", "steps_per_episode", "max_iterations",
                     "convergence_window", "chunk_episodes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.visit_threshold < 0:
            raise ConfigError("visit_threshold must be nonnegative")
        if self.convergence_tol <= 0:
            raise ConfigError("convergence_tol must be positive")
        if not 0.0 < self.improvement_step <= 1.0:
            raise ConfigError("improvement_step must lie in (0, 1]")
        if not 0.0 <= self.train_p <= 1.0:
            raise ConfigError("train_p must lie in [0, 1]")

    def with_(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


@dataclass
class Rollout:
    """Learning view of a batch of episodes for one player."""

    keys: np.ndarray  # (E, N) int64
    actions: np.ndarray  # (E, N)
    rewards: np.ndarray  # (E, N)
    mask: np.ndarray  # (E, N) the player acted at this step
    valid: np.ndarray  # (E, N, A)

    @staticmethod
    def concat(parts: list["Rollout"]) -> "Rollout":
        return Rollout(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                         ("keys", "actions", "rewards", "mask", "valid")))


class Environment(Protocol):
    n_actions: int

    def rollout(self, policy: TabularPolicy, episodes: np.ndarray, purpose: int) -> Rollout: ...


@dataclass
class QEstimate:
    """Monte Carlo Q-values, one entry per visited (state key, move)."""

    keys: np.ndarray
    actions: np.ndarray
    mean: np.ndarray
    count: np.ndarray
    state_valid: dict = field(default_factory=dict)  # key -> valid-move mask at first visit

    @property
    def table(self) -> dict:
        return {(int(k), int(a)): (float(m), int(c))
                for k, a, m, c in zip(self.keys, self.actions, self.mean, self.count)}

    def merge(self, other: "QEstimate") -> "QEstimate":
        """Count-weighted combination of two partial estimates."""
        keys = np.concatenate([self.keys, other.keys])
        acts = np.concatenate([self.actions, other.actions])
        sums = np.concatenate([self.mean * self.count, other.mean * other.count])
        counts = np.concatenate([self.count, other.count])
        out = _aggregate(keys, acts, sums, counts)
        valid = dict(other.state_valid)
        valid.update(self.state_valid)
        out.state_valid = valid
        return out


def _aggregate(keys, actions, sums, counts) -> QEstimate:
    n_a = int(actions.max()) + 1 if len(actions) else 1
    pair = keys.astype(np.int64) * n_a + actions
    order = np.lexsort((actions, keys))
    pair_sorted = pair[order]
    uniq, start = np.unique(pair_sorted, return_index=True)
    tot = np.add.reduceat(sums[order], start) if len(order) else np.zeros(0)
    cnt = np.add.reduceat(counts[order], start) if len(order) else np.zeros(0, np.int64)
    return QEstimate(keys=keys[order][start], actions=actions[order][start],
                     mean=tot / np.maximum(cnt, 1), count=cnt.astype(np.int64))


def remainder_means(rewards: np.ndarray) -> np.ndarray:
    """Mean of rewards[t:] for every t (undiscounted average-reward return)."""
    n = rewards.shape[1]
    tail = np.cumsum(rewards[:, ::-1], axis=1)[:, ::-1]
    return tail / np.arange(n, 0, -1)


@dataclass
class RoundStats:
    mean_reward: float
    states_visited: int
    visits: dict  # key -> visits this round


def evaluate_policy(policy: TabularPolicy, env: Environment, cfg: TrainConfig,
                    purpose: int = 0) -> tuple[QEstimate, RoundStats]:
    """Roll out `policy` in `env` and estimate its Q-values."""
    ro = env.rollout(policy, np.arange(cfg.episodes_per_eval), purpose)
    returns = remainder_means(ro.rewards)
    m = ro.mask
    keys, acts = ro.keys[m], ro.actions[m]
    q = _aggregate(keys, acts, returns[m], np.ones(len(keys), np.int64))

    uniq, first, counts = np.unique(keys, return_index=True, return_counts=True)
    valid_rows = ro.valid[m][first]
    q.state_valid = {int(k): valid_rows[i] for i, k in enumerate(uniq)}

    active_eps = m.any(axis=1)
    per_ep = np.where(m, ro.rewards, 0.0).sum(axis=1) / np.maximum(m.sum(axis=1), 1)
    mean_reward = float(per_ep[active_eps].mean()) if active_eps.any() else float("nan")
    stats = RoundStats(mean_reward=mean_reward, states_visited=len(uniq),
                       visits={int(k): int(c) for k, c in zip(uniq, counts)})
    return q, stats


def improve_policy(policy: TabularPolicy, q: QEstimate, cfg: TrainConfig,
                   visits: Optional[dict] = None) -> TabularPolicy:
    """Shift `improvement_step` of each visited state's mass onto its best move.

    Only moves with at least one sample compete; ties go to the lowest index.
    States new to the table start from uniform over their valid moves.
    """
    if len(q.keys) == 0:
        return policy.copy()
    step = cfg.improvement_step
    A = policy.n_actions
    uniq, start = np.unique(q.keys, return_index=True)
    q_mat = np.full((len(uniq), A), -np.inf)
    row = np.searchsorted(uniq, q.keys)
    q_mat[row, q.actions] = q.mean
    best = np.argmax(q_mat, axis=1)

    pos, found = policy.lookup(uniq)
    old = np.empty((len(uniq), A))
    old[found] = policy.probs[pos[found]]
    for i in np.flatnonzero(~found):
        v = q.state_valid.get(int(uniq[i]), np.ones(A, bool)).astype(float)
        old[i] = v / v.sum()
    onehot = np.zeros_like(old)
    onehot[np.arange(len(uniq)), best] = 1.0
    new = (1.0 - step) * old + step * onehot
    new /= new.sum(axis=1, keepdims=True)

    add_visits = np.zeros(len(uniq), np.int64)
    if visits is not None:
        add_visits = np.array([visits.get(int(k), 0) for k in uniq], np.int64)

    keep = np.ones(len(policy.keys), bool)
    keep[pos[found]] = False
    old_visits = np.zeros(len(uniq), np.int64)
    old_visits[found] = policy.visits[pos[found]]
    keys = np.concatenate([policy.keys[keep], uniq])
    probs = np.concatenate([policy.probs[keep], new])
    vis = np.concatenate([policy.visits[keep], old_visits + add_visits])
    return policy.copy(keys=keys, probs=probs, visits=vis)


def apply_fallback(policy: TabularPolicy, cfg: TrainConfig, level0) -> TabularPolicy:
    """Point mass on the level-0 move for every state visited fewer than `visit_threshold` times."""
    low = policy.visits < cfg.visit_threshold
    out = policy.copy()
    if not low.any():
        return out
    moves = level0_moves_for_keys(level0, policy, policy.keys[low])
    probs = np.zeros((int(low.sum()), policy.n_actions))
    probs[np.arange(len(moves)), moves] = 1.0
    out.probs[low] = probs
    return out


def level0_moves_for_keys(level0, policy: TabularPolicy, keys) -> np.ndarray:
    if hasattr(level0, "moves_for_keys"):
        return np.asarray(level0.moves_for_keys(keys), dtype=np.int64)
    if policy.codec is None:
        raise ConfigError("cannot decode state keys without a codec")
    mem = policy.codec.decode(keys)
    return np.asarray(level0.act(mem, None, np.zeros(len(keys))).actions, dtype=np.int64)


# ---------------------------------------------------------------- environments

class GameEnvironment:
    """The feeder game seen by one learning player facing a fixed opponent."""

    def __init__(self, params: ScenarioParams, player: str, opponent, p: float, n_steps: int,
                 key, obs_model: Optional[ObservationModel] = None, chunk: int = 250,
                 threads: int = 1):
        if player not in (DEFENDER, ATTACKER):
            raise ConfigError(f"unknown player {player!r}")
        self.params = params
        self.player = player
        self.opponent = opponent
        self.p = p
        self.n_steps = n_steps
        self.key = key
        self.obs_model = obs_model or ObservationModel()
        self.chunk = chunk
        self.threads = max(1, int(threads))
        self.n_actions = N_TAP_MOVES if player == DEFENDER else params.n_attacker_levels

    def _run_chunk(self, policy, episodes, purpose) -> Rollout:
        draws = draw_episodes(self.key, purpose, episodes, self.n_steps, noise=self.obs_model.noise > 0)
        if self.player == DEFENDER:
            tr = simulate_batch(self.params, self.obs_model, policy, self.opponent, draws, self.p,
                                record=DEFENDER)
            rewards = tr.r_D
        else:
            tr = simulate_batch(self.params, self.obs_model, self.opponent, policy, draws, self.p,
                                record=ATTACKER)
            rewards = tr.r_A
        s = tr.subject
        return Rollout(s["keys"], s["actions"], rewards, s["mask"], s["valid"])

    def rollout(self, policy: TabularPolicy, episodes, purpose: int) -> Rollout:
        episodes = np.asarray(episodes)
        parts = [episodes[a:b] for a, b in chunk_ranges(len(episodes), self.chunk)]
        if self.threads > 1 and len(parts) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                outs = list(pool.map(lambda e: self._run_chunk(policy, e, purpose), parts))
        else:
            outs = [self._run_chunk(policy, e, purpose) for e in parts]
        return Rollout.concat(outs)


# ---------------------------------------------------------------- training loops

@dataclass
class TrainResult:
    policy: TabularPolicy
    converged: bool
    iterations: int
    log: list  # dict rows: iteration, mean_reward, states_visited, fallback_fraction


def train_policy(env: Environment, cfg: TrainConfig, player: str, n_actions: int,
                 codec: Optional[StateCodec], level0, fallback=None) -> TrainResult:
    """Alternate evaluation and improvement until the reward per step settles."""
    policy = TabularPolicy(player, n_actions, codec, fallback=fallback, unseen="uniform")
    history: list[float] = []
    rows = []
    best = (-np.inf, policy)
    converged = False
    w = cfg.convergence_window
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        purpose = 0 if cfg.common_random_numbers else it
        q, stats = evaluate_policy(policy, env, cfg, purpose)
        history.append(stats.mean_reward)
        if stats.mean_reward > best[0]:
            best = (stats.mean_reward, policy)
        frac_low = float(np.mean(policy.visits < cfg.visit_threshold)) if len(policy) else 1.0
        rows.append({"iteration": it, "mean_reward": stats.mean_reward,
                     "states_visited": stats.states_visited, "fallback_fraction": frac_low})
        log.debug("iteration %d: reward/step %.6f, %d states", it, stats.mean_reward,
                  stats.states_visited)
        if len(history) > w:
            now = np.mean(history[-w:])
            before = np.mean(history[-w - 1:-1])
            if abs(now - before) < cfg.convergence_tol:
                converged = True
                break
        policy = improve_policy(policy, q, cfg, stats.visits)

    if not converged:
        warnings.warn(f"{player} training hit max_iterations={cfg.max_iterations} "
                      "without converging; returning the best policy seen", RuntimeWarning)
        policy = best[1]
    final = apply_fallback(policy, cfg, level0)
    final.unseen = "fallback"
    final.fallback = fallback if fallback is not None else level0
    final.meta = {"converged": converged, "iterations": it,
                  "final_mean_reward": history[-1] if history else None}
    return TrainResult(final, converged, it, rows)


def other(player: str) -> str:
    return ATTACKER if player == DEFENDER else DEFENDER


def train_level_k(k: int, player: str, params: ScenarioParams, cfg: TrainConfig,
                  seed: int = 0, obs_model: Optional[ObservationModel] = None,
                  codecs: Optional[dict] = None, threads: int = 1,
                  opponents: Optional[dict] = None, env_factory=None) -> TrainResult:
    """Best response of a level-k `player` to a level-(k-1) opponent.

    The level-0 players ground the recursion (`opponents` may override them).
    `env_factory(player, opponent, key)` replaces the feeder game, e.g. with a
    small chain whose values are known in closed form.
    """
    if k < 1:
        raise ConfigError("level k must be >= 1")
    obs_model = obs_model or ObservationModel()
    codecs = codecs or {}
    opponents = opponents or {}
    opp_role = other(player)
    if k == 1:
        opponent = opponents.get(opp_role)
        if opponent is None:
            opponent = level0_for(opp_role, params)
    else:
        opponent = train_level_k(k - 1, opp_role, params, cfg, seed, obs_model, codecs, threads,
                                 opponents, env_factory).policy
    key = derive_key(seed, "train", player, k)
    if env_factory is not None:
        env = env_factory(player, opponent, key)
        codec = codecs.get(player)
    else:
        codec = codecs.get(player) or StateCodec(player, obs_model.voltage_bin, obs_model.flow_bin)
        env = GameEnvironment(params, player, opponent, cfg.train_p, cfg.steps_per_episode, key,
                              obs_model, cfg.chunk_episodes, threads)
    level0 = opponents.get(player)
    if level0 is None:
        level0 = level0_for(player, params)
    result = train_policy(env, cfg, player, env.n_actions, codec, level0)
    result.policy.meta.update({"level": k, "train_p": cfg.train_p})
    return result


TRAINING_LOG_COLUMNS = ("iteration", "mean_reward", "states_visited", "fallback_fraction")


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAINING_LOG_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"], repr(float(r["mean_reward"])), r["states_visited"],
                        repr(float(r["fallback_fraction"]))])
