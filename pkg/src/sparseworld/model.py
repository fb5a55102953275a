"""Sparse hard-attention dynamics model over object tokens.

One forward pass embeds the N raw object tokens (optionally appending a
learned intervention token), then runs L attention layers. Each layer
computes edge logits q_i . k_j from its own projections, samples a binary
adjacency matrix (Bernoulli via straight-through Gumbel-sigmoid in training,
deterministic sigmoid threshold in eval), and mixes values with a softmax
renormalized over the *active* edges of each row, so a row's output is a
convex combination of its sampled parents. Layer update: x <- MLP(h + x);
a final linear readout maps the last layer's tokens back to raw-token space.

The per-layer adjacencies are combined into the path matrix

    paths = (A_L + I) ... (A_2 + I)(A_1 + I)

whose (i, j) entry counts the layered routes token j can take to reach token
i (following a sampled edge or resting on the residual at each layer). A zero
entry is a hard guarantee: the prediction for token i cannot depend on token
j in any way. Graphs and intervention targets are read off this matrix.

The dense baseline is the same code path with every adjacency forced to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    ContractError,
    RngStream,
    Tape,
    Tensor,
    broadcast_to,
    concat,
    embedding,
    linear,
    masked_softmax,
    matmul,
    gumbel_sigmoid,
    reshape,
    sigmoid,
    swap_last2,
    tanh,
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    d: int = 64
    d_k: int = 32
    mlp_hidden: int = 256
    mlp_depth: int = 2
    n_interventions: int = 6
    t_start: float = 2.0
    t_end: float = 0.5
    anneal_steps: int = 3500         # linear t_start -> t_end over this many steps, then hold
    eval_threshold: float = 0.5      # fixed; eval edges are sigmoid(logit) > 0.5
    dense: bool = False              # baseline: every adjacency entry forced to 1
    scale_edge_logits: bool = False  # Eq-style raw q.k logits by default
    token_dim: int = 9

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d": self.d,
            "d_k": self.d_k,
            "mlp_hidden": self.mlp_hidden,
            "mlp_depth": self.mlp_depth,
            "n_interventions": self.n_interventions,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "anneal_steps": self.anneal_steps,
            "eval_threshold": self.eval_threshold,
            "dense": self.dense,
            "scale_edge_logits": self.scale_edge_logits,
            "token_dim": self.token_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CodebookError(IndexError):
    """Environment index outside the intervention codebook."""


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def set_requires_grad(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        out.tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        return out

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        out = cls(config)
        out.tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return out


def _glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ((rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit).astype(np.float32)


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Fresh parameters; each tensor gets its own named rng stream."""
    p = ModelParams(config)

    def put(name, arr):
        p.tensors[name] = Tensor(arr, requires_grad=True)

    d, dk, h = config.d, config.d_k, config.mlp_hidden
    put("embed.w", _glorot(rng.child("init/embed.w"), config.token_dim, d))
    put("embed.b", np.zeros(d, dtype=np.float32))
    for l in range(config.n_layers):
        put(f"layer{l}.wq", _glorot(rng.child(f"init/layer{l}.wq"), d, dk))
        put(f"layer{l}.wk", _glorot(rng.child(f"init/layer{l}.wk"), d, dk))
        put(f"layer{l}.wv", _glorot(rng.child(f"init/layer{l}.wv"), d, d))
        dims = [d] + [h] * config.mlp_depth + [d]
        for k in range(len(dims) - 1):
            put(f"layer{l}.mlp.w{k}", _glorot(rng.child(f"init/layer{l}.mlp.w{k}"), dims[k], dims[k + 1]))
            put(f"layer{l}.mlp.b{k}", np.zeros(dims[k + 1], dtype=np.float32))
    put("readout.w", _glorot(rng.child("init/readout.w"), d, config.token_dim))
    put("readout.b", np.zeros(config.token_dim, dtype=np.float32))
    put("codebook", (rng.child("init/codebook").normal((config.n_interventions, d)) * 0.5).astype(np.float32))
    return p


@dataclass
class ForwardTrace:
    mode: str
    n_objects: int
    n_tokens: int
    has_intervention: bool
    edge_logits: list = field(default_factory=list)   # per layer, np (B, M, M)
    adjacency: list = field(default_factory=list)     # per layer, np (B, M, M) in {0,1} (eval/train)
    soft_attn: list = field(default_factory=list)     # per layer, np (B, M, M) attention weights
    path: np.ndarray | None = None                    # (B, M, M); int64 in eval mode
    path_tensor: Tensor | None = None                 # differentiable path matrix (train/soft)
    preds: np.ndarray | None = None                   # (B, N, token_dim)


def embed(params: ModelParams, raw_tokens: np.ndarray, env_ids=None, intervention_override: Tensor | None = None):
    """Linear embed to width d; appends the intervention token last if conditioned."""
    cfg = params.config
    raw = np.asarray(raw_tokens, dtype=np.float32)
    squeeze = raw.ndim == 2
    if squeeze:
        raw = raw[None]
    b, n, td = raw.shape
    if td != cfg.token_dim:
        raise ContractError(f"raw tokens have dim {td}, model expects {cfg.token_dim}")
    x = linear(Tensor(raw), params["embed.w"], params["embed.b"])
    if intervention_override is not None:
        tok = intervention_override
        if tok.data.ndim == 1:
            tok = reshape(tok, (1, 1, cfg.d))
        elif tok.data.ndim == 2:
            tok = reshape(tok, (tok.data.shape[0], 1, cfg.d))
        tok = broadcast_to(tok, (b, 1, cfg.d))
        x = concat([x, tok], axis=1)
    elif env_ids is not None:
        ids = np.full(b, int(env_ids), dtype=np.int64) if np.ndim(env_ids) == 0 else np.asarray(env_ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= cfg.n_interventions:
            raise CodebookError(
                f"env id out of range: {ids.min()}..{ids.max()} vs codebook size {cfg.n_interventions}"
            )
        tok = reshape(embedding(params["codebook"], ids), (b, 1, cfg.d))
        x = concat([x, tok], axis=1)
    return x, squeeze


def sample_adjacency_from_logits(logits: Tensor, temperature: float, rng, mode: str, dense: bool) -> Tensor:
    if dense:
        return Tensor(np.ones_like(logits.data))
    if mode == "eval":
        return Tensor((logits.data > 0.0).astype(logits.data.dtype))
    if mode == "mean":
        # noise-free relaxation (expected mask); used for test-time descent
        return sigmoid(logits)
    if mode not in ("train", "soft"):
        raise ContractError(f"mode must be train, soft, mean or eval, got {mode!r}")
    return gumbel_sigmoid(logits, temperature, rng, hard=(mode == "train"))


def sample_adjacency(q: Tensor, k: Tensor, temperature: float, rng, mode: str, dense: bool = False) -> Tensor:
    """Bernoulli(sigma(q_i . k_j)) adjacency; hard straight-through in train mode."""
    return sample_adjacency_from_logits(matmul(q, swap_last2(k)), temperature, rng, mode, dense)


def _mlp(params: ModelParams, layer: int, x: Tensor) -> Tensor:
    cfg = params.config
    for k in range(cfg.mlp_depth + 1):
        x = linear(x, params[f"layer{layer}.mlp.w{k}"], params[f"layer{layer}.mlp.b{k}"])
        if k < cfg.mlp_depth:
            x = tanh(x)
    return x


def sparse_attention_layer(params: ModelParams, layer: int, x: Tensor, adjacency: Tensor):
    """One masked-attention + MLP block; returns (new_x, soft attention weights)."""
    cfg = params.config
    q = matmul(x, params[f"layer{layer}.wq"])
    k = matmul(x, params[f"layer{layer}.wk"])
    v = matmul(x, params[f"layer{layer}.wv"])
    scores = matmul(q, swap_last2(k))
    attn = masked_softmax(scores, adjacency, scale=1.0 / np.sqrt(cfg.d_k))
    h = matmul(attn, v)
    return _mlp(params, layer, h + x), attn, scores


def path_matrix(adjacencies) -> np.ndarray:
    """Integer path counts (A_L + I)...(A_1 + I) from binary per-layer masks."""
    mats = [np.asarray(a.data if isinstance(a, Tensor) else a) for a in adjacencies]
    m = mats[0].shape[-1]
    eye = np.eye(m, dtype=np.int64)
    out = None
    for a in mats:
        f = a.astype(np.int64) + eye
        out = f if out is None else np.matmul(f, out)
    return out


def _path_tensor(adjacencies: list[Tensor]) -> Tensor:
    m = adjacencies[0].data.shape[-1]
    eye = Tensor(np.eye(m, dtype=np.float32))
    out = None
    for a in adjacencies:
        f = a + eye
        out = f if out is None else matmul(f, out)
    return out


def forward(
    params: ModelParams,
    raw_tokens: np.ndarray,
    env_ids=None,
    mode: str = "eval",
    rng: RngStream | None = None,
    temperature: float = 1.0,
    intervention_override: Tensor | None = None,
    adjacency_override=None,
):
    """Full pass: embed -> L masked attention layers -> readout.

    Returns (predictions Tensor (B, N, token_dim), ForwardTrace). Predictions
    cover only the object tokens; the intervention token's output is dropped.
    In eval mode sampling is replaced by thresholding, so two calls on the
    same input produce identical traces.

    adjacency_override clamps each layer's mask to a given binary matrix
    instead of sampling/thresholding. Masks are functions of the state, so
    perturbing a token normally moves the masks too; clamping is how the
    zero-path guarantee ("paths_ij = 0 means token j cannot influence
    prediction i") is verified in isolation.
    """
    cfg = params.config
    raw_tokens = np.asarray(raw_tokens, dtype=np.float32)
    if mode in ("train", "soft") and not cfg.dense and rng is None and adjacency_override is None:
        raise ContractError("train/soft mode needs an RngStream for adjacency sampling")
    x, squeeze = embed(params, raw_tokens, env_ids=env_ids, intervention_override=intervention_override)
    b, m, _ = x.data.shape
    has_intv = m > (raw_tokens.shape[-2])
    n = m - 1 if has_intv else m
    trace = ForwardTrace(mode=mode, n_objects=n, n_tokens=m, has_intervention=has_intv)

    adjacencies: list[Tensor] = []
    for l in range(cfg.n_layers):
        q = matmul(x, params[f"layer{l}.wq"])
        k = matmul(x, params[f"layer{l}.wk"])
        v = matmul(x, params[f"layer{l}.wv"])
        scores = matmul(q, swap_last2(k))
        logits = scores if not cfg.scale_edge_logits else scores * (1.0 / np.sqrt(cfg.d_k))
        if adjacency_override is not None:
            adj = Tensor(np.asarray(adjacency_override[l], dtype=np.float32))
        else:
            adj = sample_adjacency_from_logits(logits, temperature, rng, mode, cfg.dense)
        attn = masked_softmax(scores, adj, scale=1.0 / np.sqrt(cfg.d_k))
        h = matmul(attn, v)
        x = _mlp(params, l, h + x)
        adjacencies.append(adj)
        trace.edge_logits.append(logits.data.copy())
        trace.adjacency.append(adj.data.copy())
        trace.soft_attn.append(attn.data.copy())

    preds_all = linear(x, params["readout.w"], params["readout.b"])
    preds = preds_all[:, :n, :] if has_intv else preds_all

    if mode == "eval":
        trace.path = path_matrix(trace.adjacency)
    else:
        trace.path_tensor = _path_tensor(adjacencies)
        trace.path = trace.path_tensor.data.copy()
    trace.preds = preds.data[0].copy() if squeeze else preds.data.copy()
    return preds, trace


def extract_local_graph(trace: ForwardTrace) -> np.ndarray:
    """Object-block graph from the path matrix: edge iff >= 1 path. Eval only."""
    if trace.mode != "eval":
        raise ContractError("graphs are extracted from eval-mode traces only (sampled graphs are stochastic)")
    n = trace.n_objects
    return (trace.path[..., :n, :n] >= 1).astype(np.uint8)


def extract_intervention_targets(trace: ForwardTrace) -> np.ndarray:
    """Boolean (B, N): objects reachable from the intervention token. Eval only."""
    if trace.mode != "eval":
        raise ContractError("targets are extracted from eval-mode traces only")
    if not trace.has_intervention:
        raise ContractError("trace has no intervention token")
    n = trace.n_objects
    return trace.path[..., :n, trace.n_tokens - 1] >= 1


def extraction_by_threshold(trace: ForwardTrace, thresholds) -> dict[float, np.ndarray]:
    """Dense-baseline protocol: edge iff any layer's soft weight exceeds t."""
    n = trace.n_objects
    stack = np.stack([a[..., :n, :n] for a in trace.soft_attn])  # (L, B, n, n)
    out = {}
    eye = np.eye(n, dtype=bool)
    for t in thresholds:
        g = (stack > t).any(axis=0)
        g = np.logical_or(g, eye)
        out[float(t)] = g.astype(np.uint8)
    return out
