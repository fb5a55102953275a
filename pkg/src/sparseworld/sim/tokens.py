"""Raw 9-dimensional object tokens.

Layout (all entries in [-1, 1] for the default scenes):

    [x, y, vx/VSCALE, vy/VSCALE, is_ball, is_zone, is_paddle, size, strength/SSCALE]

Balls and the paddle put their disc radius in the size slot; zones put their
square half-extent there, their center in the position slots and exact zeros
in the velocity slots. The model predicts next-step tokens in this space and
all reported errors are measured in it.
"""

from __future__ import annotations

import numpy as np

VSCALE = 2.5
SSCALE = 2.0
TOKEN_DIM = 9

_KIND_SLOT = {"ball": 4, "zone": 5, "paddle": 6}


def tokenize(state: np.ndarray, specs) -> np.ndarray:
    """Pack (N, 4) positions/velocities plus specs into (N, 9) float32 tokens."""
    n = len(specs)
    toks = np.zeros((n, TOKEN_DIM), dtype=np.float32)
    for i, s in enumerate(specs):
        toks[i, 0] = state[i, 0]
        toks[i, 1] = state[i, 1]
        toks[i, 2] = state[i, 2] / VSCALE
        toks[i, 3] = state[i, 3] / VSCALE
        toks[i, _KIND_SLOT[s.kind]] = 1.0
        toks[i, 7] = s.zone_half if s.kind == "zone" else s.radius
        toks[i, 8] = s.zone_strength / SSCALE
    return toks


def tokenize_batch(states: np.ndarray, specs) -> np.ndarray:
    """Vectorized tokenize for (T, N, 4) state stacks -> (T, N, 9)."""
    t, n, _ = states.shape
    toks = np.zeros((t, n, TOKEN_DIM), dtype=np.float32)
    toks[:, :, 0:2] = states[:, :, 0:2]
    toks[:, :, 2:4] = states[:, :, 2:4] / VSCALE
    for i, s in enumerate(specs):
        toks[:, i, _KIND_SLOT[s.kind]] = 1.0
        toks[:, i, 7] = s.zone_half if s.kind == "zone" else s.radius
        toks[:, i, 8] = s.zone_strength / SSCALE
    return toks
