"""Catalogue of intervened environments.

Each environment variant replaces the update mechanism of a subset of
objects while everything else stays invariant. Targets are defined at the
mechanism level: an object is a target iff its own update rule differs from
environment 0, not because it is indirectly affected through interactions.

Every seen intervention is chosen so its effect on each target is expressed
at (almost) every step - a constant or velocity-proportional force, or a
flipped controller - rather than only in rare contact events. That keeps
"which objects did this environment change" answerable from any short window
of the trajectory.

Seen (training) environments:
  0  no intervention
  1  gravity pulls balls down
  2  a rotational force curves every ball's trajectory
  3  the paddle flees the target ball instead of tracking it
  4  a spring force pulls balls toward the arena center
  5  a constant wind pushes balls to the right

Held-out (adaptation-only) environments:
  6  gravity + fleeing paddle (composition of 1 and 3)
  7  rotational force with one extra ball in the scene (2 + scene change)
"""

from __future__ import annotations

from dataclasses import dataclass


class CatalogueError(KeyError):
    """Unknown environment id."""


@dataclass(frozen=True)
class EnvDynamics:
    gravity: bool = False
    curl: bool = False
    spring: bool = False
    wind: bool = False
    paddle_repel: bool = False
    extra_ball: bool = False


_CATALOGUE: dict[int, tuple[EnvDynamics, str, str]] = {
    0: (EnvDynamics(), "none", "no intervention"),
    1: (EnvDynamics(gravity=True), "balls", "gravity on all balls"),
    2: (EnvDynamics(curl=True), "balls", "rotational force curves ball trajectories"),
    3: (EnvDynamics(paddle_repel=True), "paddle", "paddle flees the target ball"),
    4: (EnvDynamics(spring=True), "balls", "spring force toward the arena center"),
    5: (EnvDynamics(wind=True), "balls", "constant rightward wind on balls"),
    6: (EnvDynamics(gravity=True, paddle_repel=True), "balls+paddle", "gravity + fleeing paddle"),
    7: (EnvDynamics(curl=True, extra_ball=True), "balls", "rotational force, one extra ball"),
}

SEEN_ENVS = (0, 1, 2, 3, 4, 5)
UNSEEN_ENVS = (6, 7)


def dynamics_for(env_id: int) -> EnvDynamics:
    try:
        return _CATALOGUE[int(env_id)][0]
    except KeyError:
        raise CatalogueError(f"unknown environment id {env_id}; known: {sorted(_CATALOGUE)}") from None


def describe(env_id: int) -> str:
    try:
        return _CATALOGUE[int(env_id)][2]
    except KeyError:
        raise CatalogueError(f"unknown environment id {env_id}; known: {sorted(_CATALOGUE)}") from None


def apply_intervention(env_id: int, specs) -> tuple[EnvDynamics, frozenset[int]]:
    """Resolve an environment id to (dynamics flags, mechanism target indices)."""
    env_id = int(env_id)
    if env_id not in _CATALOGUE:
        raise CatalogueError(f"unknown environment id {env_id}; known: {sorted(_CATALOGUE)}")
    dyn, target_kinds, _ = _CATALOGUE[env_id]
    targets: set[int] = set()
    if "balls" in target_kinds:
        targets.update(i for i, s in enumerate(specs) if s.kind == "ball")
    if "paddle" in target_kinds:
        targets.update(i for i, s in enumerate(specs) if s.kind == "paddle")
    return dyn, frozenset(targets)


def catalogue_dict() -> dict:
    """JSON-friendly view (used in dataset headers)."""
    out = {}
    for env_id, (dyn, kinds, desc) in sorted(_CATALOGUE.items()):
        out[str(env_id)] = {"description": desc, "target_kinds": kinds, "seen": env_id in SEEN_ENVS}
    return out
