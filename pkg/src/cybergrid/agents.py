"""Player policies: the scripted level-0 players and tabular stochastic policies.

The level-0 defender is a reconstruction (a dead-band regulator on the mean of
V2 and V3); only its qualitative role as a naive regulator matters here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .powerflow import ConfigError, ScenarioParams
from .snfg import (ATTACKER, ATTACKER_FIELDS, DEFENDER, DEFENDER_FIELDS, N_TAP_MOVES, TAP_DOWN,
                   TAP_HOLD, TAP_UP, AttackerObservation, BatchMemory, Decision, DefenderObservation,
                   PlayerMemory, tap_valid_mask)

POLICY_FORMAT_VERSION = 1

_SLOT_BITS = 10
_SLOT_OFFSET = 1 << (_SLOT_BITS - 1)
_SMALL_BITS = 4
_TOL = 1e-12


# ---------------------------------------------------------------- level 0

class Level0Defender:
    """Steps the tap against the mean of V2 and V3 outside a half-step dead band."""

    player = DEFENDER
    codec = None

    def __init__(self, params: ScenarioParams):
        self.params = params

    def moves(self, v1, v2, v3) -> np.ndarray:
        p = self.params
        mean = 0.5 * (np.asarray(v2) + np.asarray(v3))
        band = 0.5 * p.delta_v
        move = np.full(mean.shape, TAP_HOLD, dtype=np.int64)
        move[mean < 1.0 - band - _TOL] = TAP_UP
        move[mean > 1.0 + band + _TOL] = TAP_DOWN
        valid = tap_valid_mask(np.broadcast_to(v1, mean.shape).ravel(), p)
        blocked = ~valid[np.arange(move.size), move.ravel()].reshape(move.shape)
        move[blocked] = TAP_HOLD
        return move

    def act(self, mem: BatchMemory, valid=None, u=None) -> Decision:
        return Decision(self.moves(mem.value("v1"), mem.value("v2"), mem.value("v3")))


class Level0Attacker:
    """Drift-and-strike: nudge q3 to drag the defender's tap, then swing q3 hard.

    The strike test uses the attacker's linear model of V2 in q3 through x1.
    Ties in the strike target go to the largest swing, then the lowest index.
    """

    player = ATTACKER
    codec = None

    def __init__(self, params: ScenarioParams):
        self.params = params
        self.settings = params.q3_settings()

    def moves(self, v2, q3_index) -> np.ndarray:
        p = self.params
        v2 = np.atleast_1d(np.asarray(v2, dtype=float))
        q3_index = np.atleast_1d(np.asarray(q3_index, dtype=np.int64))
        q3 = self.settings[q3_index]
        hypo = v2[:, None] + p.x1 * (self.settings[None, :] - q3[:, None])
        dev = np.abs(hypo - 1.0)
        vstar = dev.max(axis=1)
        near_max = dev >= vstar[:, None] - _TOL
        swing = np.where(near_max, np.abs(self.settings[None, :] - q3[:, None]), -1.0)
        target = np.argmax(swing, axis=1)
        drift = np.where(v2 < 1.0, np.minimum(q3_index + 1, p.n_attacker_levels - 1),
                         np.maximum(q3_index - 1, 0))
        return np.where(vstar > p.theta_A, target, drift)

    def act(self, mem: BatchMemory, valid=None, u=None) -> Decision:
        return Decision(self.moves(mem.value("v2"), mem.prev_move))


def level0_for(player: str, params: ScenarioParams):
    return Level0Defender(params) if player == DEFENDER else Level0Attacker(params)


def level0_attacker_move(obs: AttackerObservation, q3_index: int, params: ScenarioParams) -> int:
    return int(Level0Attacker(params).moves([obs.value("v2")], [q3_index])[0])


def level0_defender_move(obs: DefenderObservation, params: ScenarioParams) -> int:
    return int(Level0Defender(params).moves(np.array([obs.value("v1")]), np.array([obs.value("v2")]),
                                            np.array([obs.value("v3")]))[0])


# ---------------------------------------------------------------- state codec

@dataclass(frozen=True)
class StateCodec:
    """Packs a binned memory into one int64 key.

    Each observed variable takes a 10-bit slot (bin index offset by 512 and
    saturated), then optionally the previous move and the statistic bin take
    4 bits each.
    """

    player: str
    voltage_bin: float = 0.01
    flow_bin: float = 0.05
    stat_edges: tuple = (-2.0, 2.0)
    include_prev_move: bool = True

    def __post_init__(self):
        if self.player not in (DEFENDER, ATTACKER):
            raise ConfigError(f"unknown player {self.player!r}")
        object.__setattr__(self, "stat_edges", tuple(float(e) for e in self.stat_edges))
        if list(self.stat_edges) != sorted(self.stat_edges) or len(self.stat_edges) > 15:
            raise ConfigError("stat_edges must be ascending with at most 15 edges")

    @property
    def fields(self) -> tuple:
        return DEFENDER_FIELDS if self.player == DEFENDER else ATTACKER_FIELDS

    def _width(self, name):
        return self.voltage_bin if name in ("v1", "v2", "v3") else self.flow_bin

    def encode(self, mem: BatchMemory) -> np.ndarray:
        if mem.player != self.player or set(mem.bins) != set(self.fields):
            raise ConfigError(f"memory of {mem.player} with fields {sorted(mem.bins)} "
                              f"does not match the {self.player} codec")
        for name in self.fields:
            if abs(mem.widths[name] - self._width(name)) > _TOL:
                raise ConfigError(f"bin width of {name} differs from the codec")
        key = np.zeros(len(mem), dtype=np.int64)
        for name in self.fields:
            slot = np.clip(mem.bins[name] + _SLOT_OFFSET, 0, (1 << _SLOT_BITS) - 1)
            key = (key << _SLOT_BITS) | slot
        if self.include_prev_move:
            key = (key << _SMALL_BITS) | np.clip(mem.prev_move, 0, (1 << _SMALL_BITS) - 1)
        stat_bin = np.searchsorted(np.asarray(self.stat_edges), mem.statistic, side="right")
        return (key << _SMALL_BITS) | stat_bin

    def decode(self, keys) -> BatchMemory:
        """Inverse of `encode`; the statistic becomes a representative of its bin."""
        keys = np.asarray(keys, dtype=np.int64)
        stat_bin = keys & ((1 << _SMALL_BITS) - 1)
        keys = keys >> _SMALL_BITS
        if self.include_prev_move:
            prev = keys & ((1 << _SMALL_BITS) - 1)
            keys = keys >> _SMALL_BITS
        else:
            prev = np.full(keys.shape, -1, dtype=np.int64)
        bins = {}
        for name in reversed(self.fields):
            bins[name] = (keys & ((1 << _SLOT_BITS) - 1)) - _SLOT_OFFSET
            keys = keys >> _SLOT_BITS
        edges = np.asarray(self.stat_edges)
        lo = np.concatenate([[edges[0] - 1.0], edges]) if len(edges) else np.array([0.0])
        hi = np.concatenate([edges, [edges[-1] + 1.0]]) if len(edges) else np.array([0.0])
        stat_bin = np.minimum(stat_bin, len(edges))
        stat = 0.5 * (lo[stat_bin] + hi[stat_bin])
        return BatchMemory(self.player, {n: bins[n] for n in self.fields},
                           {n: self._width(n) for n in self.fields}, prev, stat)

    def describe(self, key: int) -> dict:
        mem = self.decode([key])
        out = {n: int(mem.bins[n][0]) for n in self.fields}
        if self.include_prev_move:
            out["prev_move"] = int(mem.prev_move[0])
        out["stat_bin"] = int(int(key) & ((1 << _SMALL_BITS) - 1))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stat_edges"] = list(self.stat_edges)
        return d


# ---------------------------------------------------------------- tabular policy

class TabularPolicy:
    """Stochastic map from discrete memory-state keys to move distributions.

    States absent from the table go to `fallback` (normally the level-0 player)
    or, while training, to a uniform draw over the valid moves.
    """

    def __init__(self, player: str, n_actions: int, codec: Optional[StateCodec] = None,
                 keys=None, probs=None, visits=None, fallback=None, unseen: str = "fallback",
                 meta: Optional[dict] = None):
        self.player = player
        self.n_actions = int(n_actions)
        self.codec = codec
        self.keys = np.zeros(0, np.int64) if keys is None else np.asarray(keys, dtype=np.int64)
        self.probs = (np.zeros((0, self.n_actions)) if probs is None
                      else np.asarray(probs, dtype=float).reshape(-1, self.n_actions))
        self.visits = (np.zeros(len(self.keys), np.int64) if visits is None
                       else np.asarray(visits, dtype=np.int64))
        self.fallback = fallback
        self.unseen = unseen
        self.meta = dict(meta or {})
        if len(self.keys) > 1 and np.any(np.diff(self.keys) <= 0):
            order = np.argsort(self.keys, kind="stable")
            self.keys, self.probs, self.visits = self.keys[order], self.probs[order], self.visits[order]
        if not (len(self.keys) == len(self.probs) == len(self.visits)):
            raise ValueError("keys, probs and visits must align")

    def __len__(self) -> int:
        return len(self.keys)

    def copy(self, **changes) -> "TabularPolicy":
        kw = dict(player=self.player, n_actions=self.n_actions, codec=self.codec,
                  keys=self.keys.copy(), probs=self.probs.copy(), visits=self.visits.copy(),
                  fallback=self.fallback, unseen=self.unseen, meta=self.meta)
        kw.update(changes)
        return TabularPolicy(**kw)

    def lookup(self, keys) -> tuple[np.ndarray, np.ndarray]:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.zeros(keys.shape, np.int64), np.zeros(keys.shape, bool)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        found = self.keys[pos_c] == keys
        return pos_c, found

    def table(self) -> dict:
        return {int(k): self.probs[i].copy() for i, k in enumerate(self.keys)}

    def act_keys(self, keys, valid, u, mem: Optional[BatchMemory] = None) -> Decision:
        keys = np.asarray(keys, dtype=np.int64)
        u = np.asarray(u, dtype=float)
        pos, found = self.lookup(keys)
        actions = np.zeros(len(keys), dtype=np.int64)
        if found.any():
            cdf = np.cumsum(self.probs[pos[found]], axis=1)
            idx = (u[found, None] >= cdf).sum(axis=1)
            actions[found] = np.minimum(idx, self.n_actions - 1)
        miss = ~found
        if miss.any():
            if self.unseen == "uniform" or self.fallback is None:
                v = np.asarray(valid, dtype=bool)[miss]
                count = v.sum(axis=1)
                pick = np.minimum((u[miss] * count).astype(np.int64), count - 1)
                order = np.cumsum(v, axis=1) - 1
                actions[miss] = np.argmax(v & (order == pick[:, None]), axis=1)
            else:
                if mem is None:
                    raise ConfigError("fallback policy needs the memory to act")
                actions[miss] = self.fallback.act(mem.take(miss), None, u[miss]).actions
        return Decision(actions=actions, keys=keys, fallback=miss)

    def act(self, mem: BatchMemory, valid, u) -> Decision:
        if self.codec is None:
            raise ConfigError("policy without a state codec cannot read memories")
        return self.act_keys(self.codec.encode(mem), valid, u, mem)


def policy_move(policy: TabularPolicy, memory: PlayerMemory, move_space, rng: np.random.Generator):
    """Sample one move for a single memory; returns the element of `move_space`."""
    mem = memory.to_batch()
    if policy.player == DEFENDER:
        valid = tap_valid_mask(mem.value("v1"), policy.fallback.params) if policy.fallback else \
            np.ones((1, N_TAP_MOVES), bool)
    else:
        valid = np.ones((1, policy.n_actions), bool)
    move = int(policy.act(mem, valid, np.array([rng.random()])).actions[0])
    return move_space[move] if move_space is not None else move


# ---------------------------------------------------------------- serialization

def save_policy(policy: TabularPolicy, path) -> None:
    """Flat text file: `#`-prefixed JSON header, then one CSV row per state.

    Row layout: key, decoded key fields, p_0 .. p_{A-1}, visits.
    """
    header = {
        "format": "cybergrid-policy",
        "version": POLICY_FORMAT_VERSION,
        "player": policy.player,
        "n_actions": policy.n_actions,
        "codec": policy.codec.to_dict() if policy.codec else None,
        "meta": policy.meta,
    }
    names = []
    if policy.codec is not None:
        names = list(policy.codec.describe(int(policy.keys[0])) if len(policy) else
                     policy.codec.describe(0))
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write(",".join(["key", *names, *(f"p_{a}" for a in range(policy.n_actions)), "visits"]) + "\n")
        for i, key in enumerate(policy.keys):
            desc = list(policy.codec.describe(int(key)).values()) if policy.codec else []
            row = [str(int(key)), *map(str, desc), *(repr(float(x)) for x in policy.probs[i]),
                   str(int(policy.visits[i]))]
            fh.write(",".join(row) + "\n")


def load_policy(path, params: Optional[ScenarioParams] = None) -> TabularPolicy:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ConfigError(f"{path}: missing policy header")
        header = json.loads(first[2:])
        if header.get("format") != "cybergrid-policy":
            raise ConfigError(f"{path}: not a policy file")
        if header.get("version") != POLICY_FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported policy version {header.get('version')}")
        columns = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    n_actions = header["n_actions"]
    p0 = columns.index("p_0")
    keys = np.array([int(r[0]) for r in rows], dtype=np.int64)
    probs = np.array([[float(x) for x in r[p0:p0 + n_actions]] for r in rows]).reshape(-1, n_actions)
    visits = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    codec = StateCodec(**header["codec"]) if header.get("codec") else None
    fallback = level0_for(header["player"], params) if params is not None else None
    return TabularPolicy(header["player"], n_actions, codec, keys, probs, visits,
                         fallback=fallback, meta=header.get("meta") or {})
