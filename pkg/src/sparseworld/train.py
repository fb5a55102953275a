"""Constrained training: dense baseline for the target loss, then the sparse
model under a Lagrangian relaxation.

The sparse run minimizes the rewritten objective

    (MSE - tau) + |paths| / lambda

where tau is the held-out loss of the fully connected baseline. lambda is
updated multiplicatively, lambda <- lambda * exp(alpha * ma), with ma a
moving average of (batch MSE - tau); the constraint boundary MSE = tau is a
fixed point of the update, the exponent is rate-limited, and lambda is
clamped positive. While the model is worse than the baseline, lambda is
large and the loss is effectively pure prediction error; once the error
drops below tau, lambda falls and path pruning takes over.

Theta steps and lambda steps alternate strictly, one each per batch.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import AdamState, RngStream, Tape, Tensor, adam_step, backward, mse
from .model import ModelConfig, ModelParams, forward, init_params


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 128
    steps: int = 6000
    lambda_init: float = 1e3
    alpha: float = 5e3              # lambda step size on (MSE - tau)
    beta_ma: float = 0.99
    lambda_min: float = 1e-2
    lambda_max: float = 1e6
    max_log_rate: float = 0.7      # per-step cap on |log lambda| movement
    seed: int = 0
    val_fraction: float = 0.1
    val_every: int = 250
    log_every: int = 25

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LagrangianState:
    lam: float
    ma: float = 0.0
    step: int = 0


@dataclass
class MetricsRow:
    step: int
    batch_mse: float
    sum_paths: float
    lam: float
    temperature: float
    wall_time: float


METRICS_COLUMNS = ("step", "batch_mse", "sum_paths", "lambda", "temperature")


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    """Deterministic metrics file: wall time goes to a .timing.csv side file
    so same-seed reruns are byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r.step},{r.batch_mse!r},{r.sum_paths!r},{r.lam!r},{r.temperature!r}\n")
    with open(str(path) + ".timing.csv", "w", encoding="utf-8") as fh:
        fh.write("step,wall_time\n")
        for r in rows:
            fh.write(f"{r.step},{r.wall_time:.3f}\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        for line in fh:
            s, m, p, lam, t = line.strip().split(",")
            rows.append(MetricsRow(int(s), float(m), float(p), float(lam), float(t), 0.0))
    return rows


# -- data ------------------------------------------------------------------


@dataclass
class TransitionSet:
    s: np.ndarray        # (n, N, 9) float32 current tokens
    sp: np.ndarray       # (n, N, 9) float32 next tokens
    env: np.ndarray      # (n,) int64

    def __len__(self):
        return self.s.shape[0]


@dataclass
class SplitData:
    train: TransitionSet
    val: TransitionSet
    n_objects: int


def build_transitions(episodes, val_fraction: float, seed: int) -> SplitData:
    """Episode-level split (no transition of a val episode leaks into train)."""
    n_ep = len(episodes)
    perm = RngStream(seed).child("valsplit").permutation(n_ep)
    n_val = max(1, int(round(val_fraction * n_ep))) if val_fraction > 0 else 0
    val_ids = set(perm[:n_val].tolist())

    def pack(ids):
        ss, sps, envs = [], [], []
        for idx in ids:
            ep = episodes[idx]
            toks = ep.tokens()
            ss.append(toks[:-1])
            sps.append(toks[1:])
            envs.append(np.full(toks.shape[0] - 1, ep.env_id, dtype=np.int64))
        return TransitionSet(
            s=np.concatenate(ss, axis=0),
            sp=np.concatenate(sps, axis=0),
            env=np.concatenate(envs, axis=0),
        )

    train_ids = [i for i in range(n_ep) if i not in val_ids]
    val = pack(sorted(val_ids)) if n_val else pack(train_ids[:1])
    return SplitData(train=pack(train_ids), val=val, n_objects=episodes[0].states.shape[1])


# -- losses and the multiplier ------------------------------------------------


def compute_loss(params: ModelParams, batch: TransitionSet, lagr: LagrangianState,
                 mode: str, rng, temperature: float, tau: float):
    """Returns (mse tensor, mean path count tensor, objective tensor, trace)."""
    preds, trace = forward(params, batch.s, env_ids=batch.env, mode=mode, rng=rng, temperature=temperature)
    err = mse(preds, Tensor(batch.sp))
    b = batch.s.shape[0]
    sum_paths = trace.path_tensor.sum() * (1.0 / b)
    objective = (err - tau) + sum_paths * (1.0 / lagr.lam)
    return err, sum_paths, objective, trace


def lambda_update(lagr: LagrangianState, batch_mse: float, cfg: TrainConfig, tau: float) -> LagrangianState:
    """Multiplicative multiplier step with MSE = tau as its fixed point.

    The exponent is the moving-average constraint violation *relative to tau*
    (alpha stays dimensionless across problem scales) and is rate-limited so
    a bad batch cannot explode lambda; clamping keeps it positive and finite.
    """
    ma = cfg.beta_ma * lagr.ma + (1.0 - cfg.beta_ma) * (batch_mse - tau)
    rate = float(np.clip(cfg.alpha * ma / max(tau, 1e-12), -cfg.max_log_rate, cfg.max_log_rate))
    lam = float(np.clip(lagr.lam * np.exp(rate), cfg.lambda_min, cfg.lambda_max))
    return LagrangianState(lam=lam, ma=ma, step=lagr.step + 1)


def temperature_at(step: int, mcfg: ModelConfig) -> float:
    frac = min(1.0, step / max(1, mcfg.anneal_steps))
    return float(mcfg.t_start + (mcfg.t_end - mcfg.t_start) * frac)


# -- loops ---------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng_master: RngStream, step0: int, steps: int):
    """Deterministic batch index stream: epoch e is permutation child 'perm/e'."""
    per_epoch = max(1, n // batch_size)
    for step in range(step0, steps):
        epoch, slot = divmod(step, per_epoch)
        perm = rng_master.child(f"perm/{epoch}").permutation(n)
        lo = slot * batch_size
        yield step, perm[lo : lo + batch_size]


def _take_batch(ts: TransitionSet, idx: np.ndarray) -> TransitionSet:
    return TransitionSet(s=ts.s[idx], sp=ts.sp[idx], env=ts.env[idx])


def eval_mse(params: ModelParams, ts: TransitionSet, chunk: int = 1024) -> float:
    """Deterministic eval-mode MSE over a transition set."""
    total = 0.0
    n = len(ts)
    for lo in range(0, n, chunk):
        b = _take_batch(ts, np.arange(lo, min(lo + chunk, n)))
        preds, _ = forward(params, b.s, env_ids=b.env, mode="eval")
        total += float(((preds.data - b.sp) ** 2).mean()) * len(b)
    return total / n


def _grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: t._grad for k, t in params.tensors.items() if t._grad is not None}


def train_baseline(data: SplitData, mcfg: ModelConfig, cfg: TrainConfig):
    """Train the fully connected twin on one-step prediction.

    Returns (best params, tau, metrics rows); tau is the best validation MSE
    seen during the run and params are the snapshot that achieved it.
    """
    mcfg = replace(mcfg, dense=True)
    master = RngStream(cfg.seed).child("baseline")
    params = init_params(mcfg, master.child("init"))
    opt = AdamState()
    rows: list[MetricsRow] = []
    best = (np.inf, None)
    first_mse = None
    t0 = time.monotonic()

    for step, idx in _batches(len(data.train), cfg.batch_size, master, 0, cfg.steps):
        batch = _take_batch(data.train, idx)
        params.zero_grad()
        with Tape():
            preds, _ = forward(params, batch.s, env_ids=batch.env, mode="train")
            err = mse(preds, Tensor(batch.sp))
            backward(err)
        m = float(err.data)
        if first_mse is None:
            first_mse = m
        if step > 100 and m > 10.0 * first_mse:
            raise TrainingError(f"baseline diverged at step {step}: batch MSE {m:.3e} vs initial {first_mse:.3e}")
        adam_step(params.named(), _grads(params), opt, cfg.lr)
        if step % cfg.log_every == 0:
            rows.append(MetricsRow(step, m, 0.0, 0.0, 0.0, time.monotonic() - t0))
        if step % cfg.val_every == 0:
            v = eval_mse(params, data.val)
            if v < best[0]:
                best = (v, params.copy())
    v = eval_mse(params, data.val)
    if v < best[0]:
        best = (v, params.copy())
    tau = best[0]
    return best[1], tau, rows


def train_spartan(data: SplitData, tau: float, mcfg: ModelConfig, cfg: TrainConfig,
                  resume: dict | None = None, checkpoint_hook=None):
    """Sparse-model run: alternating theta/lambda steps, annealed temperature.

    Returns (params, metrics rows, lagrangian state, final val mse). The
    optional checkpoint_hook(step, params, opt, lagr, rng_counter) fires every
    val_every steps for resumable snapshots.
    """
    if tau <= 0:
        raise TrainingError(f"tau must be positive, got {tau}")
    mcfg = replace(mcfg, dense=False)
    master = RngStream(cfg.seed).child("spartan")
    gumbel = master.child("gumbel")
    if resume is None:
        params = init_params(mcfg, master.child("init"))
        opt = AdamState()
        lagr = LagrangianState(lam=cfg.lambda_init)
        rows: list[MetricsRow] = []
        step0 = 0
    else:
        params = resume["params"]
        opt = resume["opt"]
        lagr = resume["lagr"]
        rows = resume.get("rows", [])
        step0 = resume["step"]
        gumbel.counter = resume["gumbel_counter"]

    first_mse = None
    t0 = time.monotonic()
    for step, idx in _batches(len(data.train), cfg.batch_size, master, step0, cfg.steps):
        temp = temperature_at(step, mcfg)
        batch = _take_batch(data.train, idx)
        params.zero_grad()
        with Tape():
            err, sum_paths, objective, _ = compute_loss(params, batch, lagr, "train", gumbel, temp, tau)
            backward(objective)
        m = float(err.data)
        if first_mse is None:
            first_mse = m
        if step > 100 and m > 10.0 * max(first_mse, tau):
            raise TrainingError(f"sparse run diverged at step {step}: batch MSE {m:.3e}")
        adam_step(params.named(), _grads(params), opt, cfg.lr)
        lagr = lambda_update(lagr, m, cfg, tau)
        if step % cfg.log_every == 0:
            rows.append(MetricsRow(step, m, float(sum_paths.data), lagr.lam, temp, time.monotonic() - t0))
        if checkpoint_hook is not None and (step + 1) % cfg.val_every == 0:
            checkpoint_hook(step + 1, params, opt, lagr, gumbel.counter, rows)
    final_val = eval_mse(params, data.val)
    return params, rows, lagr, final_val
