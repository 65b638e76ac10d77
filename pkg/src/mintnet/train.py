"""Maximum-likelihood training with AMSGrad and a cosine learning-rate schedule."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import flow
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NonFiniteError

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "lr", "loss", "bpd_train", "bpd_eval"]


@dataclass
class OptimState:
    m: dict
    v: dict
    vhat: dict
    step: int = 0
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, lr0=1e-3):
        z = lambda: {k: np.zeros_like(np.asarray(v)) for k, v in params.items()}
        return cls(m=z(), v=z(), vhat=z(), lr0=lr0)


def amsgrad_step(params, grads, state, lr=None):
    """One AMSGrad update (no bias correction). Returns ``(new_params, new_state)``.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  vhat <- max(vhat, v)
    theta <- theta - lr m / (sqrt(vhat) + eps)
    """
    lr = state.lr0 if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}; step rejected")
    b1, b2 = state.beta1, state.beta2
    new_params, m, v, vhat = {}, {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        vhat[name] = np.maximum(state.vhat[name], v[name])
        new_params[name] = theta - lr * m[name] / (np.sqrt(vhat[name]) + state.eps)
    new_state = OptimState(m=m, v=v, vhat=vhat, step=state.step + 1, lr0=state.lr0,
                           beta1=b1, beta2=b2, eps=state.eps)
    return new_params, new_state


def cosine_lr(t, T, lr0):
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside schedule range [0, {T}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / T))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    schedule: str = "cosine"
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_seed: int = 12345
    clip_norm: float | None = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("cadences must be non-negative")


def learning_rate(cfg, step):
    if cfg.schedule == "cosine":
        return cosine_lr(step, cfg.steps, cfg.lr)
    return cfg.lr


def loss_and_grad(model, y, logdet_pre):
    """Negative mean log-likelihood of a preprocessed batch and its parameter gradients.

    Returns ``(loss, grads)`` with ``loss = -mean(log p(y) + logdet_pre)``.
    """
    tape = ad.Tape()
    params = model.parameters()
    leaves = {name: tape.leaf(arr) for name, arr in params.items()}
    lp = flow.log_prob(model.with_parameters(leaves), y)
    n = y.shape[0]
    loss = ad.sum(lp) * (-1.0 / n) - float(np.sum(logdet_pre)) / n
    grads = tape.backward(loss)
    return float(loss.value), {name: grads[leaf.id] for name, leaf in leaves.items()}


def eval_bpd(model, images, seed):
    y, ldp = flow.preprocess(images, model.preprocess, rng=np.random.default_rng(seed))
    return flow.bpd_from_log_prob(flow.log_prob(model, y), ldp, model.dim)


def _clip(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainResult:
    model: flow.FlowModel
    optim: OptimState
    history: list = field(default_factory=list)


def train_loop(model, dataset, cfg, out_dir=None, eval_images=None, resume_from=None,
               stop_after=None, extra=None):
    """Train ``model`` on ``dataset.images`` by maximum likelihood.

    Each step draws a batch without replacement and fresh dequantization noise
    from one generator seeded by ``cfg.seed``; its state is checkpointed so a
    resumed run continues the same trajectory. ``stop_after`` ends the run
    early (at that global step) without changing the schedule.
    Metrics go to ``out_dir/metrics.csv`` and checkpoints to ``out_dir/checkpoint``.
    """
    images = np.asarray(dataset.images if hasattr(dataset, "images") else dataset, dtype=np.float64)
    n = images.shape[0]
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume_from is not None:
        model, optim, saved = load_checkpoint(resume_from)
        if optim is None or "rng_state" not in saved:
            raise ValueError(f"{resume_from} has no optimizer or RNG state to resume from")
        rng.bit_generator.state = saved["rng_state"]
        start = optim.step
    else:
        optim = OptimState.zeros(model.parameters(), lr0=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "a" if start else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if not start:
            writer.writeheader()
    history = []
    last = cfg.steps if stop_after is None else min(stop_after, cfg.steps)

    def checkpoint(m, o):
        if out is not None:
            info = dict(extra or {}, rng_state=rng.bit_generator.state, train_seed=cfg.seed)
            save_checkpoint(m, o, out / "checkpoint", extra=info)

    try:
        for step in range(start, last):
            idx = rng.permutation(n)[:batch]
            raw = images[idx]
            y, ldp = flow.preprocess(raw, model.preprocess, noise=rng.random(raw.shape))
            loss, grads = loss_and_grad(model, y, ldp)
            if not math.isfinite(loss):
                raise NonFiniteError(f"loss became non-finite at step {step}; last good checkpoint kept")
            if cfg.clip_norm:
                grads = _clip(grads, cfg.clip_norm)
            lr = learning_rate(cfg, step)
            params, optim = amsgrad_step(model.parameters(), grads, optim, lr)
            model = model.with_parameters(params)
            row = {"step": step, "lr": lr, "loss": loss,
                   "bpd_train": loss / (model.dim * math.log(2.0)), "bpd_eval": ""}
            done = step + 1
            if eval_images is not None and cfg.eval_every and (done % cfg.eval_every == 0 or done == last):
                row["bpd_eval"] = eval_bpd(model, eval_images, cfg.eval_seed)
            history.append(row)
            if writer is not None:
                writer.writerow(row)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                checkpoint(model, optim)
            if step % 100 == 0:
                logger.info("step %d loss %.4f bpd %.4f", step, loss, row["bpd_train"])
        checkpoint(model, optim)
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(model, optim, history)
