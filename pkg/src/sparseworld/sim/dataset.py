"""Episode generation: trajectories + ground-truth graphs + targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore.rng import RngStream
from .envs import SEEN_ENVS, apply_intervention, catalogue_dict, dynamics_for
from .tokens import tokenize_batch
from .world import WorldConfig, default_scene, init_state, step


@dataclass
class EpisodeRecord:
    env_id: int
    specs: list
    states: np.ndarray   # (T, N, 4) float64
    graphs: np.ndarray   # (T-1, N, N) uint8
    targets: frozenset

    def tokens(self) -> np.ndarray:
        """(T, N, 9) float32 token view of the trajectory."""
        return tokenize_batch(self.states, self.specs)


def generate_episode(env_id: int, config: WorldConfig, T: int, rng: RngStream, n_balls: int = 4) -> EpisodeRecord:
    dyn = dynamics_for(env_id)
    specs = default_scene(n_balls + (1 if dyn.extra_ball else 0))
    _, targets = apply_intervention(env_id, specs)
    state = init_state(specs, config, rng)
    states = [state]
    graphs = []
    for _ in range(T - 1):
        state, g = step(state, specs, config, env_id, dyn=dyn)
        states.append(state)
        graphs.append(g)
    n = len(specs)
    return EpisodeRecord(
        env_id=env_id,
        specs=specs,
        states=np.stack(states),
        graphs=np.stack(graphs) if graphs else np.zeros((0, n, n), np.uint8),
        targets=targets,
    )


def gen_dataset(
    config: WorldConfig,
    episodes_per_env: int,
    T: int,
    seed: int,
    path=None,
    envs=SEEN_ENVS,
    n_balls: int = 4,
):
    """Deterministically generate episodes for each env; optionally write JSONL.

    Episode k of env e always uses the rng child "episode/<e>/<k>" of the
    master seed, so the dataset is a pure function of (config, counts, seed).
    """
    if T < 2:
        raise ValueError("episodes need at least 2 states (one transition)")
    master = RngStream(seed)
    episodes = []
    for env in envs:
        for k in range(episodes_per_env):
            ep_rng = master.child(f"episode/{env}/{k}")
            episodes.append(generate_episode(env, config, T, ep_rng, n_balls=n_balls))
    if path is not None:
        from ..formats import make_header, write_dataset

        header = make_header(config, default_scene(n_balls), T, envs, episodes_per_env, seed, catalogue_dict())
        write_dataset(path, header, episodes)
    return episodes
