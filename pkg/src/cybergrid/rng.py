"""Counter-based random streams.

Each episode owns a Philox stream addressed by (key, purpose, episode), so a
draw never depends on batch size, chunking or thread count.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_key(master_seed: int, *labels) -> tuple[int, int]:
    """Stable 128-bit Philox key from a master seed and any labels."""
    text = repr((int(master_seed) & _MASK64,) + tuple(labels)).encode()
    digest = hashlib.sha256(text).digest()
    return (int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:16], "little"))


def episode_generator(key: tuple[int, int], purpose: int, episode: int) -> np.random.Generator:
    bitgen = np.random.Philox(key=np.array(key, dtype=np.uint64),
                              counter=np.array([0, 0, purpose, episode], dtype=np.uint64))
    return np.random.Generator(bitgen)


@dataclass
class EpisodeDraws:
    """Uniform variates consumed by a batch of episodes.

    Layout per episode: existence, n_steps + 1 loads (the first sets the
    initial state), defender choices, attacker choices, then optional
    observation noise.
    """

    existence: np.ndarray  # (E,)
    load: np.ndarray  # (E, N + 1)
    defender: np.ndarray  # (E, N)
    attacker: np.ndarray  # (E, N)
    noise: np.ndarray | None = None  # (E, N, 9) in [-1, 1)

    @property
    def n_episodes(self) -> int:
        return self.existence.shape[0]

    @property
    def n_steps(self) -> int:
        return self.defender.shape[1]


N_NOISE_CHANNELS = 9  # five defender observables, four attacker observables


def draw_episodes(key, purpose: int, episodes, n_steps: int, noise: bool = False) -> EpisodeDraws:
    episodes = np.asarray(episodes, dtype=np.int64)
    width = 3 * n_steps + 2
    extra = n_steps * N_NOISE_CHANNELS if noise else 0
    block = np.empty((len(episodes), width + extra))
    for row, ep in enumerate(episodes):
        block[row] = episode_generator(key, purpose, int(ep)).random(width + extra)
    n = n_steps
    out = EpisodeDraws(
        existence=block[:, 0],
        load=block[:, 1:n + 2],
        defender=block[:, n + 2:2 * n + 2],
        attacker=block[:, 2 * n + 2:3 * n + 2],
    )
    if noise:
        out.noise = 2.0 * block[:, width:].reshape(len(episodes), n, N_NOISE_CHANNELS) - 1.0
    return out


def chunk_ranges(n_total: int, chunk: int):
    return [(s, min(s + chunk, n_total)) for s in range(0, n_total, chunk)]
