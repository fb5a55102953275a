"""Few-shot adaptation: fit a free intervention token to unlabeled trajectories.

Model parameters stay frozen; the only free variable is one d-dimensional
token appended to the object tokens. Descent runs on the expected-mask
relaxation (adjacency = sigmoid(logits), no sampling) so the objective is
smooth and deterministic; candidate selection and all reported losses use
hard eval-mode forwards. With the per-codebook-restart strategy one descent
starts from each codebook row plus the codebook mean, and the candidate with
the lowest adaptation-set loss wins, so adding restarts can only improve the
selected result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamState, ContractError, RngStream, Tape, Tensor, adam_step, backward, mse
from .model import ModelParams, extract_intervention_targets, forward

INIT_STRATEGIES = ("codebook-mean", "per-codebook-restart")


@dataclass(frozen=True)
class AdaptConfig:
    n_trajectories: int = 5
    steps: int = 150
    lr: float = 1e-2
    init: str = "per-codebook-restart"
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        return cls(**d)


@dataclass
class AdaptResult:
    token: np.ndarray
    final_loss: float            # eval-mode MSE of the winner on the adaptation set
    loss_curve: list[float]      # winner's per-step descent objective
    targets: list[int]           # objects flagged in >= half of the adaptation transitions
    init_label: str
    candidate_losses: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "token": [float(v) for v in self.token],
            "final_loss": self.final_loss,
            "loss_curve": self.loss_curve,
            "targets": self.targets,
            "init_label": self.init_label,
            "candidate_losses": self.candidate_losses,
        }


def _transitions(trajectories) -> tuple[np.ndarray, np.ndarray]:
    ss, sps = [], []
    for toks in trajectories:
        toks = np.asarray(toks, dtype=np.float32)
        ss.append(toks[:-1])
        sps.append(toks[1:])
    return np.concatenate(ss, axis=0), np.concatenate(sps, axis=0)


def _eval_loss(params: ModelParams, token_data: np.ndarray, s: np.ndarray, sp: np.ndarray) -> float:
    preds, _ = forward(params, s, mode="eval", intervention_override=Tensor(token_data))
    return float(((preds.data - sp) ** 2).mean())


def _descend(params: ModelParams, init: np.ndarray, s, sp, cfg: AdaptConfig):
    token = Tensor(init.copy(), requires_grad=True)
    target = Tensor(sp)
    opt = AdamState()
    curve = []
    for _ in range(cfg.steps):
        token.zero_grad()
        with Tape():
            preds, _ = forward(params, s, mode="mean", intervention_override=token)
            err = mse(preds, target)
            backward(err)
        curve.append(float(err.data))
        adam_step({"token": token}, {"token": token._grad}, opt, cfg.lr)
    return token.data.copy(), curve


def adapt_token(params: ModelParams, trajectories, cfg: AdaptConfig) -> AdaptResult:
    """Optimize an intervention token on a handful of trajectories.

    trajectories: list of (T, N, token_dim) arrays from one unknown env.
    Parameters are frozen for the duration (and restored bit-identically).
    """
    if not trajectories:
        raise ContractError("adapt_token needs at least one trajectory")
    if cfg.init not in INIT_STRATEGIES:
        raise ContractError(f"unknown init strategy {cfg.init!r}; options: {INIT_STRATEGIES}")
    s, sp = _transitions(trajectories)

    was = {k: t.requires_grad for k, t in params.tensors.items()}
    params.set_requires_grad(False)
    try:
        codebook = params["codebook"].data
        candidates = {"mean": codebook.mean(axis=0)}
        if cfg.init == "per-codebook-restart":
            for k in range(codebook.shape[0]):
                candidates[f"codebook-{k}"] = codebook[k].copy()

        results = {}
        for label, init in candidates.items():
            tok, curve = _descend(params, init, s, sp, cfg)
            results[label] = (tok, curve, _eval_loss(params, tok, s, sp))

        winner = min(results, key=lambda lbl: results[lbl][2])
        tok, curve, loss = results[winner]

        _, trace = forward(params, s, mode="eval", intervention_override=Tensor(tok))
        flags = extract_intervention_targets(trace)
        frac = flags.mean(axis=0)
        targets = sorted(int(i) for i in np.flatnonzero(frac >= 0.5))
    finally:
        for k, t in params.tensors.items():
            t.requires_grad = was[k]

    return AdaptResult(
        token=tok,
        final_loss=loss,
        loss_curve=curve,
        targets=targets,
        init_label=winner,
        candidate_losses={lbl: results[lbl][2] for lbl in results},
    )


def evaluate_adapted(params: ModelParams, token, heldout_trajectories) -> float:
    """One-step eval-mode MSE on held-out trajectories using the given token."""
    s, sp = _transitions(heldout_trajectories)
    data = token.data if isinstance(token, Tensor) else np.asarray(token, dtype=np.float32)
    return _eval_loss(params, data, s, sp)


def evaluate_with_env(params: ModelParams, env_id: int, heldout_trajectories) -> float:
    """Known-index lower-bound arm: same evaluation conditioned on the true id."""
    s, sp = _transitions(heldout_trajectories)
    preds, _ = forward(params, s, env_ids=env_id, mode="eval")
    return float(((preds.data - sp) ** 2).mean())
