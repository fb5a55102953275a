"""Deterministic 2D "Causal Balls" arena.

Objects live in the square [-1, 1]^2. Balls fly ballistically and collide
elastically with each other, the walls and the paddle; a square zone applies
a constant force to balls whose centers are inside it; the paddle sits on the
right wall and tracks the first ball's height at bounded speed. Walls are
boundary conditions, not objects.

Every interaction the integrator performs is decided from the *current*
state, so the ground-truth local graph emitted alongside each step is exactly
the set of cross-object reads the next state depends on:

  - ball i <-> ball j while their discs touch (plus the configured slack),
  - paddle -> ball while the ball touches the paddle disc,
  - zone -> ball while the ball center is inside the zone,
  - target ball -> paddle at every step (the paddle reads its height),
  - every object -> itself.

`step` is a pure function of (state, specs, config, env_id): replaying it
reproduces states and graphs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore.rng import RngStream
from .envs import EnvDynamics, dynamics_for

BALL, ZONE, PADDLE = "ball", "zone", "paddle"


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    radius: float = 0.0          # balls and paddle: disc radius
    mass: float = 1.0            # balls: collision mass
    static: bool = False         # zones never move
    zone_center: tuple = (0.0, 0.0)
    zone_half: float = 0.0       # zones: half-extent of the square footprint
    zone_strength: float = 0.0   # zones: upward force on balls inside

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "radius": self.radius,
            "mass": self.mass,
            "static": self.static,
            "zone_center": list(self.zone_center),
            "zone_half": self.zone_half,
            "zone_strength": self.zone_strength,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        return cls(
            kind=d["kind"],
            radius=float(d["radius"]),
            mass=float(d["mass"]),
            static=bool(d["static"]),
            zone_center=tuple(d["zone_center"]),
            zone_half=float(d["zone_half"]),
            zone_strength=float(d["zone_strength"]),
        )


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 0.1
    restitution: float = 1.0         # wall bounce, in (0, 1]
    base_gravity: tuple = (0.0, 0.0)
    collision_slack: float = 0.0     # extra labelling distance; interactions fire at exact contact
    paddle_max_speed: float = 0.7
    max_ball_speed: float = 2.5      # hard cap, keeps intervened dynamics bounded
    arena_half_extent: float = 1.0
    # intervened-mechanism magnitudes (see envs.catalogue)
    gravity_strength: float = 0.8
    curl_strength: float = 0.8
    spring_strength: float = 0.8
    wind_strength: float = 0.8

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.collision_slack < 0:
            raise ValueError("collision slack must be >= 0")
        if not (0.0 < self.restitution <= 1.0):
            raise ValueError("restitution must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "restitution": self.restitution,
            "base_gravity": list(self.base_gravity),
            "collision_slack": self.collision_slack,
            "paddle_max_speed": self.paddle_max_speed,
            "max_ball_speed": self.max_ball_speed,
            "arena_half_extent": self.arena_half_extent,
            "gravity_strength": self.gravity_strength,
            "curl_strength": self.curl_strength,
            "spring_strength": self.spring_strength,
            "wind_strength": self.wind_strength,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        d["base_gravity"] = tuple(d.get("base_gravity", (0.0, 0.0)))
        return cls(**d)


# ball radii are distinct and constant across episodes so each ball is
# identifiable from its token; the paddle tracks the first (radius 0.10) ball
_BALL_RADII = (0.10, 0.08, 0.065, 0.115, 0.09, 0.07)


def default_scene(n_balls: int = 4, with_zone: bool = True, with_paddle: bool = True) -> list[ObjectSpec]:
    """Canonical scene: n balls, then the zone, then the paddle."""
    specs = []
    for b in range(n_balls):
        r = _BALL_RADII[b % len(_BALL_RADII)]
        specs.append(ObjectSpec(kind=BALL, radius=r, mass=(r / 0.1) ** 2))
    if with_zone:
        specs.append(
            ObjectSpec(kind=ZONE, static=True, zone_center=(-0.45, 0.15), zone_half=0.28, zone_strength=0.9)
        )
    if with_paddle:
        specs.append(ObjectSpec(kind=PADDLE, radius=0.08, mass=4.0))
    return specs


def ball_indices(specs) -> list[int]:
    return [i for i, s in enumerate(specs) if s.kind == BALL]


def zone_indices(specs) -> list[int]:
    return [i for i, s in enumerate(specs) if s.kind == ZONE]


def paddle_index(specs):
    for i, s in enumerate(specs):
        if s.kind == PADDLE:
            return i
    return None


def target_ball_index(specs):
    balls = ball_indices(specs)
    return balls[0] if balls else None


def init_state(specs, config: WorldConfig, rng: RngStream) -> np.ndarray:
    """Random non-overlapping start; balls get random headings and speeds."""
    n = len(specs)
    state = np.zeros((n, 4), dtype=np.float64)
    placed: list[tuple[float, float, float]] = []
    for i, s in enumerate(specs):
        if s.kind == ZONE:
            state[i, 0:2] = s.zone_center
        elif s.kind == PADDLE:
            state[i, 0] = 0.9
            state[i, 1] = rng.uniform(()) * 1.0 - 0.5
            placed.append((state[i, 0], state[i, 1], s.radius))
        else:
            for _ in range(200):
                x = rng.uniform(()) * 1.6 - 0.8
                y = rng.uniform(()) * 1.6 - 0.8
                ok = all((x - px) ** 2 + (y - py) ** 2 > (s.radius + pr + 0.05) ** 2 for px, py, pr in placed)
                if ok:
                    break
            state[i, 0:2] = (x, y)
            placed.append((x, y, s.radius))
            speed = 0.35 + 0.5 * rng.uniform(())
            angle = 2.0 * np.pi * rng.uniform(())
            state[i, 2] = speed * np.cos(angle)
            state[i, 3] = speed * np.sin(angle)
    return state


def _inside_zone(p, zspec: ObjectSpec) -> bool:
    cx, cy = zspec.zone_center
    return abs(p[0] - cx) <= zspec.zone_half and abs(p[1] - cy) <= zspec.zone_half


def step(state: np.ndarray, specs, config: WorldConfig, env_id: int = 0,
         dyn: EnvDynamics | None = None):
    """Advance one timestep; returns (next_state, local_graph).

    The graph is uint8 (N, N) with G[i, j] = 1 iff object j is read when
    computing object i's next state.
    """
    if dyn is None:
        dyn = dynamics_for(env_id)
    n = len(specs)
    balls = ball_indices(specs)
    zones = zone_indices(specs)
    pad = paddle_index(specs)
    target = target_ball_index(specs)
    dt = config.dt
    slack = config.collision_slack

    pos = state[:, 0:2].copy()
    vel = state[:, 2:4].copy()
    graph = np.eye(n, dtype=np.uint8)

    acc = np.zeros((n, 2), dtype=np.float64)
    for b in balls:
        acc[b] += config.base_gravity
        if dyn.gravity:
            acc[b, 1] -= config.gravity_strength
        if dyn.wind:
            acc[b, 0] += config.wind_strength
        if dyn.spring:
            acc[b] -= config.spring_strength * pos[b]
        if dyn.curl:
            # magnetic-style force perpendicular to the velocity: curves the
            # trajectory without doing work, so speeds stay bounded
            acc[b, 0] += config.curl_strength * -vel[b, 1]
            acc[b, 1] += config.curl_strength * vel[b, 0]
        for z in zones:
            if _inside_zone(pos[b], specs[z]):
                acc[b, 1] += specs[z].zone_strength
                graph[b, z] = 1

    dv = np.zeros((n, 2), dtype=np.float64)
    dx = np.zeros((n, 2), dtype=np.float64)

    # ball-ball contacts, resolved Jacobi-style against time-t velocities
    for a_i in range(len(balls)):
        for b_i in range(a_i + 1, len(balls)):
            i, j = balls[a_i], balls[b_i]
            d = pos[i] - pos[j]
            dist = float(np.hypot(d[0], d[1]))
            touch = specs[i].radius + specs[j].radius
            if dist <= touch + slack:
                graph[i, j] = 1
                graph[j, i] = 1
            if dist <= touch:
                nvec = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
                rel = float((vel[i] - vel[j]) @ nvec)
                mi, mj = specs[i].mass, specs[j].mass
                if rel < 0.0:  # approaching: perfectly elastic impulse
                    imp = -2.0 * rel * (mi * mj / (mi + mj))
                    dv[i] += imp / mi * nvec
                    dv[j] -= imp / mj * nvec
                overlap = touch - dist
                dx[i] += nvec * overlap * (mj / (mi + mj))
                dx[j] -= nvec * overlap * (mi / (mi + mj))

    # ball-paddle contacts: the paddle is externally driven, so only the ball
    # reacts; it bounces off the paddle's moving disc
    if pad is not None:
        for b in balls:
            d = pos[b] - pos[pad]
            dist = float(np.hypot(d[0], d[1]))
            touch = specs[b].radius + specs[pad].radius
            if dist <= touch + slack:
                graph[b, pad] = 1
            if dist <= touch:
                nvec = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
                rel = float((vel[b] - vel[pad]) @ nvec)
                if rel < 0.0:
                    dv[b] += -2.0 * rel * nvec
                dx[b] += nvec * (touch - dist)

    nxt = state.copy()
    lim = config.arena_half_extent
    for b in balls:
        v = vel[b] + dv[b] + acc[b] * dt
        speed = float(np.hypot(v[0], v[1]))
        if speed > config.max_ball_speed:
            v *= config.max_ball_speed / speed
        p = pos[b] + v * dt + dx[b]
        for k in range(2):
            edge = lim - specs[b].radius
            if p[k] > edge:
                p[k] = 2.0 * edge - p[k]
                v[k] = -config.restitution * v[k]
            elif p[k] < -edge:
                p[k] = -2.0 * edge - p[k]
                v[k] = -config.restitution * v[k]
            p[k] = min(max(p[k], -edge), edge)
        nxt[b, 0:2] = p
        nxt[b, 2:4] = v

    if pad is not None and target is not None:
        graph[pad, target] = 1
        gap = pos[target, 1] - pos[pad, 1]
        desired = max(-config.paddle_max_speed, min(config.paddle_max_speed, gap / dt))
        if dyn.paddle_repel:
            desired = -desired
        edge = lim - specs[pad].radius
        new_y = min(max(pos[pad, 1] + desired * dt, -edge), edge)
        nxt[pad, 1] = new_y
        nxt[pad, 3] = (new_y - pos[pad, 1]) / dt
        # x and vx stay pinned to the wall

    return nxt, graph


def rollout(state, specs, config, env_id, n_steps: int):
    """Simulate n_steps transitions; returns (states [T+1], graphs [T])."""
    dyn = dynamics_for(env_id)
    states = [state]
    graphs = []
    cur = state
    for _ in range(n_steps):
        cur, g = step(cur, specs, config, env_id, dyn=dyn)
        states.append(cur)
        graphs.append(g)
    return np.stack(states), np.stack(graphs)
