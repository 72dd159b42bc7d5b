"""Conditional flow matching on point clouds, plus the optimizer and the
training loop shared with the diffusion baseline.

Time runs backward from the noise end: at t = T the path is pure noise,
at t = 0 it reaches the data cloud.  With u = (T - t)/T the conditional
path is

    X_t = (1 - (1 - sigma_min) u) * eps + u * X0

which interpolates N(0, I) at t = T down to a sigma_min-width Gaussian
around X0 at t = 0.  The regression target for the velocity network is
the constant displacement X0 - (1 - sigma_min) * eps; evaluated on-path
it equals the closed-form conditional field used by the exact-target
integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import (Checkpoint, ModelConfig, ModelSet, build_models,
                     kl_divergence)

__all__ = [
    "FlowSchedule", "TrainConfig", "TrainingDiverged",
    "sample_path_point", "target_field", "conditional_field", "cfm_loss",
    "adam_step", "Adam", "scheduled_lr", "train",
]


@dataclass(frozen=True)
class FlowSchedule:
    """Optimal-transport conditional path parameters."""

    horizon: float = 1.0
    sigma_min: float = 1e-4

    def __post_init__(self):
        if not self.horizon > 0.0:
            raise ValueError("horizon must be positive")
        if not 0.0 < self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in (0, 1)")

    def progress(self, t: float) -> float:
        """u = (T - t)/T: 0 at the noise end, 1 at the data end."""
        return (self.horizon - t) / self.horizon

    def sigma(self, t: float) -> float:
        """Conditional path width: 1 at t = T, sigma_min at t = 0."""
        return 1.0 - (1.0 - self.sigma_min) * self.progress(t)


def _check_time(sched: FlowSchedule, t: float) -> None:
    if not 0.0 <= t <= sched.horizon:
        raise ValueError(f"time {t} outside [0, {sched.horizon}]")


def sample_path_point(sched: FlowSchedule, x0: np.ndarray, t: float,
                      eps: np.ndarray) -> np.ndarray:
    """Point on the conditional path at time ``t`` for noise draw ``eps``."""
    _check_time(sched, t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    u = sched.progress(t)
    return sched.sigma(t) * eps + u * x0


def target_field(sched: FlowSchedule, x0: np.ndarray,
                 eps: np.ndarray) -> np.ndarray:
    """Regression target X0 - (1 - sigma_min) * eps (constant along the path)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    return x0 - (1.0 - sched.sigma_min) * eps


def conditional_field(sched: FlowSchedule, x: np.ndarray, x0: np.ndarray,
                      t: float) -> np.ndarray:
    """Closed-form conditional velocity (x0 - (1 - sigma_min) x) / sigma(t)."""
    _check_time(sched, t)
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    return (x0 - (1.0 - sched.sigma_min) * x) / sched.sigma(t)


def cfm_loss(models: ModelSet, sched: FlowSchedule, x0: np.ndarray, rng):
    """Flow-matching objective for one cloud.

    Returns ``(loss_node, parts)`` where parts holds the float values of
    the field regression term and the KL term.  Draw order from ``rng``
    is fixed (latent eps, time, path noise) for reproducibility.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z, mu, logvar = models.encoder.encode(x0, rng)
    t = rng.uniform(0.0, sched.horizon)
    eps = rng.standard_normal(x0.shape)
    xt = sample_path_point(sched, x0, t, eps)
    vstar = target_field(sched, x0, eps)
    v = models.field_net(xt, t, z, horizon=sched.horizon)
    delta = v - vstar
    field_term = ad.mul(ad.reduce_sum(ad.mul(delta, delta)), 1.0 / x0.shape[0])
    kl_term = kl_divergence(mu, logvar, z, models.bijector)
    loss = field_term + kl_term
    return loss, {"field": float(field_term.value), "kl": float(kl_term.value)}


# ---------------------------------------------------------------------------
# optimizer

def adam_step(value, grad, m, v, step, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update for a single tensor.

    ``step`` counts from 1 on the first update.  Returns the new
    (value, m, v) triple; inputs are not mutated.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam with per-tensor state keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, lr: float) -> None:
        self.step_count += 1
        for name, node in named_params:
            grad = node.grad
            if grad is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(node.value)
                self.v[name] = np.zeros_like(node.value)
            new_value, self.m[name], self.v[name] = adam_step(
                node.value, grad, self.m[name], self.v[name],
                self.step_count, lr, self.beta1, self.beta2, self.eps)
            # 0-d arithmetic yields numpy scalars; keep values as ndarrays
            node.value = np.asarray(new_value, dtype=np.float64)

    def state_dicts(self):
        return ({k: a.copy() for k, a in self.m.items()},
                {k: a.copy() for k, a in self.v.items()})

    def load_state(self, m, v, step_count):
        self.m = {k: np.asarray(a, dtype=np.float64).copy() for k, a in m.items()}
        self.v = {k: np.asarray(a, dtype=np.float64).copy() for k, a in v.items()}
        self.step_count = int(step_count)


def scheduled_lr(step: int, total_steps: int, base_lr: float,
                 final_frac: float = 0.1) -> float:
    """Constant for the first half, then linear decay to final_frac * base."""
    half = total_steps // 2
    if step < half or total_steps <= 1:
        return base_lr
    span = (total_steps - 1) - half
    if span <= 0:
        return base_lr
    frac = (step - half) / span
    return base_lr * (1.0 - (1.0 - final_frac) * frac)


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    """Optimization and downstream-default settings stored in checkpoints."""

    learning_rate: float = 1e-3
    epochs: int = 2000
    batch_size: int = 1
    seed: int = 0
    sigma_min: float = 1e-4
    horizon: float = 1.0
    lr_final_frac: float = 0.1
    kappa: float = 0.06       # collision radius for downstream sampling
    dt_default: float = 0.01  # default sampling step (100 steps over T = 1)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "epochs": self.epochs,
            "batch_size": self.batch_size, "seed": self.seed,
            "sigma_min": self.sigma_min, "horizon": self.horizon,
            "lr_final_frac": self.lr_final_frac, "kappa": self.kappa,
            "dt_default": self.dt_default,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step and component breakdown."""

    def __init__(self, step, parts):
        self.step = step
        self.parts = parts
        super().__init__(
            f"non-finite loss at step {step}: " +
            ", ".join(f"{k}={v}" for k, v in parts.items()))


def _run_training(dataset, train_config: TrainConfig,
                  model_config: ModelConfig, loss_fn, algorithm: str,
                  log_path=None) -> Checkpoint:
    """Shared Adam loop: ``loss_fn(models, x0, rng) -> (node, parts)``."""
    dataset = [np.asarray(x, dtype=np.float64) for x in dataset]
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(train_config.seed)
    models = build_models(model_config, rng)
    opt = Adam()
    steps_per_epoch = math.ceil(len(dataset) / train_config.batch_size)
    total = train_config.epochs * steps_per_epoch
    log_lines = []
    last_loss = float("nan")
    for step in range(total):
        lr = scheduled_lr(step, total, train_config.learning_rate,
                          train_config.lr_final_frac)
        idx = rng.integers(0, len(dataset), size=train_config.batch_size)
        nodes = []
        parts = {"field": 0.0, "kl": 0.0}
        try:
            for i in idx:
                node, p = loss_fn(models, dataset[i], rng)
                nodes.append(node)
                for k in parts:
                    parts[k] += p[k] / len(idx)
        except FloatingPointError as exc:
            # parameters already blew up mid-forward; report as divergence
            # with the step index rather than a bare numerics error
            raise TrainingDiverged(step, dict(parts, loss=float("nan"))) \
                from exc
        loss = nodes[0]
        for node in nodes[1:]:
            loss = loss + node
        if len(nodes) > 1:
            loss = ad.mul(loss, 1.0 / len(nodes))
        last_loss = float(loss.value)
        if not np.isfinite(last_loss):
            raise TrainingDiverged(step, dict(parts, loss=last_loss))
        models.zero_grad()
        ad.backward(loss)
        opt.step(models.named_parameters(), lr)
        log_lines.append(f"{step} {last_loss:.17g} "
                         f"{parts['field']:.17g} {parts['kl']:.17g}")
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("# step loss field kl\n")
            fh.write("\n".join(log_lines) + "\n")
    opt_m, opt_v = opt.state_dicts()
    return Checkpoint(
        algorithm=algorithm, model_config=model_config,
        train_config=train_config.to_dict(), params=models.state_dict(),
        opt_m=opt_m, opt_v=opt_v, opt_step=opt.step_count,
        step_count=total, final_loss=last_loss)


def train(dataset, train_config: TrainConfig = None,
          model_config: ModelConfig = None, log_path=None) -> Checkpoint:
    """Fit the flow-matching model to a list of normalized (N, 3) clouds."""
    train_config = train_config or TrainConfig()
    model_config = model_config or ModelConfig()
    sched = FlowSchedule(train_config.horizon, train_config.sigma_min)

    def loss_fn(models, x0, rng):
        return cfm_loss(models, sched, x0, rng)

    return _run_training(dataset, train_config, model_config, loss_fn,
                         "flow", log_path)
