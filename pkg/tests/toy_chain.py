"""Two-state, two-move chain with closed-form policy values.

The move picks the next state (with probability `stick`), and rewards favour
sitting in state 1 and choosing move 1 there.  Values are computed by backward
induction over the finite horizon, so they serve as an exact oracle for the
Monte Carlo learner.
"""

from __future__ import annotations

import itertools

import numpy as np

from cybergrid.learning import Rollout

REWARD = np.array([[1.0, 0.0],
                   [0.2, 1.5]])  # REWARD[s, a]
STICK = 0.8
START = np.array([0.5, 0.5])


def transition() -> np.ndarray:
    """T[s, a, s'] : move a lands in state a with probability STICK."""
    t = np.zeros((2, 2, 2))
    for s, a in itertools.product(range(2), range(2)):
        t[s, a, a] = STICK
        t[s, a, 1 - a] = 1.0 - STICK
    return t


def exact_pooled_q(probs: np.ndarray, horizon: int) -> np.ndarray:
    """Visit-weighted mean of the remaining-episode average reward per (s, a)."""
    t = transition()
    v_next = np.zeros(2)
    q_t = np.zeros((horizon, 2, 2))
    for step in range(horizon - 1, -1, -1):
        q_tot = REWARD + t @ v_next  # (s, a) expected remaining total
        q_t[step] = q_tot / (horizon - step)
        v_next = (probs * q_tot).sum(axis=1)
    d = START.copy()
    num = np.zeros((2, 2))
    den = np.zeros((2, 2))
    for step in range(horizon):
        w = d[:, None] * probs
        num += w * q_t[step]
        den += w
        d = np.einsum("sa,sat->t", w, t)
    return num / den


def expected_total(probs: np.ndarray, horizon: int) -> float:
    t = transition()
    d = START.copy()
    total = 0.0
    for _ in range(horizon):
        total += float((d[:, None] * probs * REWARD).sum())
        d = np.einsum("sa,sat->t", d[:, None] * probs, t)
    return total


def best_deterministic(horizon: int) -> tuple[int, int]:
    """Enumerate the four stationary deterministic policies."""
    best, arg = -np.inf, None
    for a0, a1 in itertools.product(range(2), range(2)):
        probs = np.zeros((2, 2))
        probs[0, a0] = probs[1, a1] = 1.0
        val = expected_total(probs, horizon)
        if val > best:
            best, arg = val, (a0, a1)
    return arg


class ToyLevel0:
    """Always plays move 0; stands in for the scripted player."""

    def moves_for_keys(self, keys):
        return np.zeros(len(keys), dtype=np.int64)


class ToyChain:
    n_actions = 2

    def __init__(self, horizon: int, key=(0, 0)):
        self.horizon = horizon
        self.key = key

    def rollout(self, policy, episodes, purpose: int) -> Rollout:
        n_ep = len(episodes)
        rng = np.random.default_rng([int(self.key[0]), int(self.key[1]), int(purpose)])
        u = rng.random((n_ep, self.horizon, 2))
        s0 = rng.random(n_ep)
        state = (s0 >= START[0]).astype(np.int64)
        keys = np.zeros((n_ep, self.horizon), np.int64)
        acts = np.zeros((n_ep, self.horizon), np.int64)
        rewards = np.zeros((n_ep, self.horizon))
        valid = np.ones((n_ep, self.horizon, 2), bool)
        for step in range(self.horizon):
            keys[:, step] = state
            a = policy.act_keys(state, valid[:, step], u[:, step, 0]).actions
            acts[:, step] = a
            rewards[:, step] = REWARD[state, a]
            state = np.where(u[:, step, 1] < STICK, a, 1 - a)
        return Rollout(keys, acts, rewards, np.ones((n_ep, self.horizon), bool), valid)
