"""Iterated semi net-form game engine.

One step of the game, in order: draw the load, let both players observe the
previous solved state, update memories, pick moves simultaneously, apply
them, re-solve the feeder and score both players on the new voltages.

`simulate_batch` runs many independent episodes side by side with numpy;
`run_episode` is the single-episode view returning `StepRecord`s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .powerflow import ConfigError, FlowSolution, ScenarioParams, attacker_reward, defender_reward, solve_flows
from .rng import EpisodeDraws, draw_episodes

DEFENDER = "defender"
ATTACKER = "attacker"

DEFENDER_FIELDS = ("v1", "v2", "v3", "P1", "Q1")
ATTACKER_FIELDS = ("v2", "v3", "p3", "q3")
_VOLTAGE_FIELDS = {"v1", "v2", "v3"}

# defender move indices: 0 raises the tap, 1 holds, 2 lowers
TAP_UP, TAP_HOLD, TAP_DOWN = 0, 1, 2
N_TAP_MOVES = 3
NO_MOVE = -1

_RAIL_TOL = 1e-9


@dataclass(frozen=True)
class ObservationModel:
    """How players see the feeder: bin widths and optional uniform noise."""

    voltage_bin: float = 0.01
    flow_bin: float = 0.05
    noise: float = 0.0  # halfwidth of zero-mean uniform noise, before binning

    def __post_init__(self):
        if self.voltage_bin <= 0 or self.flow_bin <= 0:
            raise ConfigError("bin widths must be positive")
        if self.noise < 0:
            raise ConfigError("noise halfwidth must be nonnegative")

    def width(self, name: str) -> float:
        return self.voltage_bin if name in _VOLTAGE_FIELDS else self.flow_bin

    def bin(self, name: str, value):
        return np.floor(np.asarray(value) / self.width(name) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class DefenderObservation:
    v1: int
    v2: int
    v3: int
    P1: int
    Q1: int
    voltage_bin: float
    flow_bin: float

    def value(self, name: str) -> float:
        return getattr(self, name) * (self.voltage_bin if name in _VOLTAGE_FIELDS else self.flow_bin)


@dataclass(frozen=True)
class AttackerObservation:
    v2: int
    v3: int
    p3: int
    q3: int
    voltage_bin: float
    flow_bin: float

    def value(self, name: str) -> float:
        return getattr(self, name) * (self.voltage_bin if name in _VOLTAGE_FIELDS else self.flow_bin)


@dataclass(frozen=True)
class PlayerMemory:
    """Observation, previous move and the decaying summary statistic.

    For the attacker the previous move is the q3 setting index in force.
    """

    observation: DefenderObservation | AttackerObservation
    previous_move: int
    statistic: float

    @property
    def player(self) -> str:
        return DEFENDER if isinstance(self.observation, DefenderObservation) else ATTACKER

    def to_batch(self) -> "BatchMemory":
        obs = self.observation
        names = DEFENDER_FIELDS if self.player == DEFENDER else ATTACKER_FIELDS
        return BatchMemory(
            player=self.player,
            bins={n: np.array([getattr(obs, n)], dtype=np.int64) for n in names},
            widths={n: (obs.voltage_bin if n in _VOLTAGE_FIELDS else obs.flow_bin) for n in names},
            prev_move=np.array([self.previous_move], dtype=np.int64),
            statistic=np.array([float(self.statistic)]),
        )


@dataclass
class BatchMemory:
    """Memories of one player across a batch of episodes."""

    player: str
    bins: dict
    widths: dict
    prev_move: np.ndarray
    statistic: np.ndarray

    def __len__(self) -> int:
        return len(self.prev_move)

    def value(self, name: str) -> np.ndarray:
        return self.bins[name] * self.widths[name]

    def take(self, rows) -> "BatchMemory":
        return BatchMemory(
            player=self.player,
            bins={k: v[rows] for k, v in self.bins.items()},
            widths=self.widths,
            prev_move=self.prev_move[rows],
            statistic=self.statistic[rows],
        )


@dataclass
class Decision:
    actions: np.ndarray
    keys: Optional[np.ndarray] = None
    fallback: Optional[np.ndarray] = None


class Policy(Protocol):
    player: str

    def act(self, mem: BatchMemory, valid: np.ndarray, u: np.ndarray) -> Decision: ...


@dataclass
class GridState:
    step_index: int
    v1: float
    p2: float
    q2: float
    q3: float
    q3_index: int
    flows: FlowSolution


@dataclass
class StepRecord:
    state: GridState
    defender_move: int  # tap direction: +1, 0, -1
    attacker_move: int  # q3 index chosen, or NO_MOVE when absent
    r_D: float
    r_A: float
    attacker_present: bool


# ---------------------------------------------------------------- primitives

def load_from_uniform(u, params: ScenarioParams):
    p2 = params.p2_min + (params.p2_max - params.p2_min) * np.asarray(u)
    return p2, params.q2_ratio * p2


def sample_attacker_existence(p: float, rng: np.random.Generator) -> bool:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"attacker existence probability {p} outside [0, 1]")
    return bool(rng.random() < p)


def sample_load(params: ScenarioParams, rng: np.random.Generator) -> tuple[float, float]:
    p2, q2 = load_from_uniform(rng.random(), params)
    return float(p2), float(q2)


def defender_move_space(v1: float, params: ScenarioParams) -> list[float]:
    """Reachable tap voltages in (up, hold, down) order, duplicates removed."""
    cands = [min(params.v_max, round(v1 + params.delta_v, 12)), v1,
             max(params.v_min, round(v1 - params.delta_v, 12))]
    out = []
    for c in cands:
        if all(abs(c - o) > _RAIL_TOL for o in out):
            out.append(c)
    return out


def attacker_move_space(params: ScenarioParams) -> list[float]:
    return [float(q) for q in params.q3_settings()]


def tap_valid_mask(v1, params: ScenarioParams) -> np.ndarray:
    v1 = np.atleast_1d(np.asarray(v1, dtype=float))
    valid = np.ones((len(v1), N_TAP_MOVES), dtype=bool)
    valid[:, TAP_UP] = v1 < params.v_max - _RAIL_TOL
    valid[:, TAP_DOWN] = v1 > params.v_min + _RAIL_TOL
    return valid


def apply_tap(v1, move, params: ScenarioParams):
    direction = 1 - np.asarray(move)
    return np.clip(np.round(v1 + params.delta_v * direction, 12), params.v_min, params.v_max)


def update_defender_statistic(m_prev, v1_now, v1_prev, v3_now, v3_prev, params: ScenarioParams):
    decay = 1.0 - 1.0 / params.n_memory
    return decay * m_prev + np.sign(v1_now - v1_prev) * np.sign(v3_now - v3_prev)


def update_attacker_statistic(m_prev, v3_now, v3_prev, q3_now, q3_prev, params: ScenarioParams):
    decay = 1.0 - 1.0 / params.n_memory
    residual = ((v3_now - v3_prev) - (q3_now - q3_prev) * params.x2) / params.delta_v
    # round away float dust so an exactly explained change gives floor(0) = 0
    return decay * m_prev + np.sign(np.floor(np.round(residual, 9)))


# ---------------------------------------------------------------- engine

@dataclass
class BatchTrajectory:
    present: np.ndarray  # (E,)
    active: np.ndarray  # (E, N) attacker node enabled this step
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    p2: np.ndarray
    q2: np.ndarray
    q3: np.ndarray
    P1: np.ndarray
    Q1: np.ndarray
    d_move: np.ndarray  # tap direction
    a_move: np.ndarray  # q3 index or NO_MOVE
    r_D: np.ndarray
    r_A: np.ndarray
    stat_D: np.ndarray
    stat_A: np.ndarray
    subject: Optional[dict] = None  # keys/actions/valid/fallback of the recorded player
    fallback_D: Optional[np.ndarray] = None

    @property
    def n_episodes(self) -> int:
        return self.v1.shape[0]

    @property
    def n_steps(self) -> int:
        return self.v1.shape[1]


def _observe(names, raw: dict, obs_model: ObservationModel, noise: Optional[np.ndarray], offset: int):
    bins = {}
    for j, name in enumerate(names):
        val = raw[name]
        if noise is not None and obs_model.noise > 0:
            val = val + obs_model.noise * noise[:, offset + j]
        bins[name] = obs_model.bin(name, val)
    return bins


def check_policy_binning(policy, obs_model: ObservationModel) -> None:
    codec = getattr(policy, "codec", None)
    if codec is None:
        return
    if (abs(codec.voltage_bin - obs_model.voltage_bin) > 1e-12
            or abs(codec.flow_bin - obs_model.flow_bin) > 1e-12):
        raise ConfigError(
            f"{policy.player} policy was built for bins ({codec.voltage_bin}, {codec.flow_bin}) "
            f"but the engine observes with ({obs_model.voltage_bin}, {obs_model.flow_bin})")


def simulate_batch(params: ScenarioParams, obs_model: ObservationModel, defender, attacker,
                   draws: EpisodeDraws, p: float, attack_at_step: Optional[int] = None,
                   record: Optional[str] = None) -> BatchTrajectory:
    """Run every episode in `draws` in lockstep.

    `p` gates the attacker once per episode. With `attack_at_step`, a present
    attacker only acts from that step on. `record` names the player whose
    state keys, actions and valid-move masks are kept for learning.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"attacker existence probability {p} outside [0, 1]")
    for pol, role in ((defender, DEFENDER), (attacker, ATTACKER)):
        if getattr(pol, "player", role) != role:
            raise ConfigError(f"{role} slot holds a {pol.player} policy")
        check_policy_binning(pol, obs_model)

    E, N = draws.n_episodes, draws.n_steps
    settings = params.q3_settings()
    present = draws.existence < p
    start = 0 if attack_at_step is None else int(attack_at_step)

    shape = (E, N)
    tr = BatchTrajectory(
        present=present, active=np.zeros(shape, bool),
        **{k: np.empty(shape) for k in ("v1", "v2", "v3", "p2", "q2", "q3", "P1", "Q1",
                                         "r_D", "r_A", "stat_D", "stat_A")},
        d_move=np.empty(shape, np.int64), a_move=np.empty(shape, np.int64),
        fallback_D=np.zeros(shape, bool),
    )
    n_sub = N_TAP_MOVES if record == DEFENDER else params.n_attacker_levels
    if record is not None:
        tr.subject = {"keys": np.zeros(shape, np.int64), "actions": np.zeros(shape, np.int64),
                      "valid": np.zeros(shape + (n_sub,), bool), "mask": np.zeros(shape, bool),
                      "fallback": np.zeros(shape, bool)}

    v1 = np.full(E, float(params.v1_init))
    q3_idx = np.full(E, params.q3_init_index, dtype=np.int64)
    q3 = settings[q3_idx]
    p2, q2 = load_from_uniform(draws.load[:, 0], params)
    flows = solve_flows(v1, p2, q2, params.p3, q3, params)
    p3_arr = np.full(E, float(params.p3))

    d_prev = np.full(E, TAP_HOLD, dtype=np.int64)
    stat_D = np.zeros(E)
    stat_A = np.zeros(E)
    prev_obs_D = prev_obs_A = None
    prev_q3 = q3.copy()
    attacker_valid = np.ones((E, params.n_attacker_levels), bool)

    for t in range(N):
        noise_t = None if draws.noise is None else draws.noise[:, t]
        raw = {"v1": v1, "v2": flows.V2, "v3": flows.V3, "P1": flows.P1, "Q1": flows.Q1,
               "p3": p3_arr, "q3": q3}
        obs_D = _observe(DEFENDER_FIELDS, raw, obs_model, noise_t, 0)
        obs_A = _observe(ATTACKER_FIELDS, raw, obs_model, noise_t, len(DEFENDER_FIELDS))
        if prev_obs_D is not None:
            vw = obs_model.voltage_bin
            stat_D = update_defender_statistic(stat_D, obs_D["v1"] * vw, prev_obs_D["v1"] * vw,
                                               obs_D["v3"] * vw, prev_obs_D["v3"] * vw, params)
            stat_A = update_attacker_statistic(stat_A, obs_A["v3"] * vw, prev_obs_A["v3"] * vw,
                                               q3, prev_q3, params)
        prev_obs_D, prev_obs_A = obs_D, obs_A

        widths_D = {n: obs_model.width(n) for n in DEFENDER_FIELDS}
        widths_A = {n: obs_model.width(n) for n in ATTACKER_FIELDS}
        mem_D = BatchMemory(DEFENDER, obs_D, widths_D, d_prev, stat_D)
        mem_A = BatchMemory(ATTACKER, obs_A, widths_A, q3_idx, stat_A)

        valid_D = tap_valid_mask(v1, params)
        dec_D = defender.act(mem_D, valid_D, draws.defender[:, t])
        active = present & (t >= start)
        dec_A = attacker.act(mem_A, attacker_valid, draws.attacker[:, t])

        if record == DEFENDER:
            sub, dec, valid, mask = tr.subject, dec_D, valid_D, np.ones(E, bool)
        elif record == ATTACKER:
            sub, dec, valid, mask = tr.subject, dec_A, attacker_valid, active
        if record is not None:
            sub["keys"][:, t] = dec.keys
            sub["actions"][:, t] = dec.actions
            sub["valid"][:, t] = valid
            sub["mask"][:, t] = mask
            if dec.fallback is not None:
                sub["fallback"][:, t] = dec.fallback
        if dec_D.fallback is not None:
            tr.fallback_D[:, t] = dec_D.fallback

        prev_q3 = q3
        new_idx = np.where(active, dec_A.actions, q3_idx)
        v1 = apply_tap(v1, dec_D.actions, params)
        q3_idx = new_idx
        q3 = settings[q3_idx]
        p2, q2 = load_from_uniform(draws.load[:, t + 1], params)
        flows = solve_flows(v1, p2, q2, params.p3, q3, params)
        d_prev = dec_D.actions

        tr.active[:, t] = active
        tr.v1[:, t] = v1
        tr.v2[:, t] = flows.V2
        tr.v3[:, t] = flows.V3
        tr.p2[:, t] = p2
        tr.q2[:, t] = q2
        tr.q3[:, t] = q3
        tr.P1[:, t] = flows.P1
        tr.Q1[:, t] = flows.Q1
        tr.d_move[:, t] = 1 - dec_D.actions
        tr.a_move[:, t] = np.where(active, dec_A.actions, NO_MOVE)
        tr.r_D[:, t] = defender_reward(flows.V2, flows.V3, params.epsilon)
        tr.r_A[:, t] = attacker_reward(flows.V2, params.epsilon)
        tr.stat_D[:, t] = stat_D
        tr.stat_A[:, t] = stat_A
    return tr


def run_episode(params: ScenarioParams, p: float, defender, attacker, n_steps: int,
                rng_key, episode: int = 0, obs_model: Optional[ObservationModel] = None,
                attack_at_step: Optional[int] = None, purpose: int = 0) -> list[StepRecord]:
    obs_model = obs_model or ObservationModel()
    draws = draw_episodes(rng_key, purpose, [episode], n_steps, noise=obs_model.noise > 0)
    tr = simulate_batch(params, obs_model, defender, attacker, draws, p, attack_at_step)
    return trajectory_records(tr, params, 0)


def trajectory_records(tr: BatchTrajectory, params: ScenarioParams, row: int) -> list[StepRecord]:
    settings = params.q3_settings()
    out = []
    for t in range(tr.n_steps):
        a = int(tr.a_move[row, t])
        q3_index = int(np.argmin(np.abs(settings - tr.q3[row, t])))
        flows = FlowSolution(P1=float(tr.P1[row, t]), Q1=float(tr.Q1[row, t]),
                             P2=-float(params.p3), Q2=-float(tr.q3[row, t]),
                             V1=float(tr.v1[row, t]), V2=float(tr.v2[row, t]), V3=float(tr.v3[row, t]))
        state = GridState(step_index=t, v1=float(tr.v1[row, t]), p2=float(tr.p2[row, t]),
                          q2=float(tr.q2[row, t]), q3=float(tr.q3[row, t]), q3_index=q3_index,
                          flows=flows)
        out.append(StepRecord(state=state, defender_move=int(tr.d_move[row, t]), attacker_move=a,
                              r_D=float(tr.r_D[row, t]), r_A=float(tr.r_A[row, t]),
                              attacker_present=bool(tr.active[row, t])))
    return out


TRAJECTORY_COLUMNS = ("episode", "step", "attacker_present", "v1", "v2", "v3", "p2", "q2", "q3",
                      "P1", "Q1", "d_move", "a_move", "r_D", "r_A")


def write_trajectory_csv(path, tr: BatchTrajectory, episode_offset: int = 0, mode: str = "w") -> None:
    """One row per step. `attacker_present` is 1 when the attacker node acted."""
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(TRAJECTORY_COLUMNS)
        for e in range(tr.n_episodes):
            for t in range(tr.n_steps):
                w.writerow([
                    episode_offset + e, t, int(tr.active[e, t]),
                    *(repr(float(getattr(tr, c)[e, t])) for c in ("v1", "v2", "v3", "p2", "q2", "q3", "P1", "Q1")),
                    int(tr.d_move[e, t]), int(tr.a_move[e, t]),
                    repr(float(tr.r_D[e, t])), repr(float(tr.r_A[e, t])),
                ])
