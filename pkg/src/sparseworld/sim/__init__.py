from .world import (
    BALL,
    PADDLE,
    ZONE,
    ObjectSpec,
    WorldConfig,
    ball_indices,
    default_scene,
    init_state,
    paddle_index,
    rollout,
    step,
    target_ball_index,
    zone_indices,
)
from .envs import (
    SEEN_ENVS,
    UNSEEN_ENVS,
    CatalogueError,
    EnvDynamics,
    apply_intervention,
    catalogue_dict,
    describe,
    dynamics_for,
)
from .tokens import SSCALE, TOKEN_DIM, VSCALE, tokenize, tokenize_batch
from .dataset import EpisodeRecord, gen_dataset, generate_episode

__all__ = [
    "ObjectSpec",
    "WorldConfig",
    "EpisodeRecord",
    "EnvDynamics",
    "CatalogueError",
    "BALL",
    "ZONE",
    "PADDLE",
    "SEEN_ENVS",
    "UNSEEN_ENVS",
    "TOKEN_DIM",
    "VSCALE",
    "SSCALE",
    "default_scene",
    "init_state",
    "step",
    "rollout",
    "tokenize",
    "tokenize_batch",
    "gen_dataset",
    "generate_episode",
    "apply_intervention",
    "dynamics_for",
    "describe",
    "catalogue_dict",
    "ball_indices",
    "zone_indices",
    "paddle_index",
    "target_ball_index",
]
