"""Trainable components: per-point velocity field, point-set encoder, and
an invertible coupling-layer prior over the shape latent.

All three are built on the local autodiff tape (`swarmflow.autodiff`) and
keep their weights in a ``ParamStore`` so the optimizer and checkpoint
code can treat them uniformly as named float64 tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node

__all__ = [
    "ParamStore", "ModelConfig", "ModelSet", "Checkpoint",
    "GatedContextualNet", "PointSetEncoder", "CouplingBijector",
    "BijectorNumericsError", "time_embedding", "kl_divergence",
    "build_models", "models_from_checkpoint",
]

_LOG_2PI = math.log(2.0 * math.pi)


class ParamStore:
    """Ordered, named collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(np.array(value, dtype=np.float64), op="param")
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def named(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = None

    def state_dict(self) -> dict:
        return {name: node.value.copy() for name, node in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, node in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state dict")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} != {node.value.shape}")
            node.value = arr.copy()
            node.grad = None

    def n_parameters(self) -> int:
        return sum(node.value.size for node in self._params.values())


def _init_matrix(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def _init_context_matrix(rng, latent_dim, fan_out, latent_scale=0.1):
    """Context-to-hidden weights with a time-dominated start.

    The context vector concatenates a 3-dim time embedding with the
    latent code.  Plain fan-in scaling would let the latent rows swamp
    the time rows by sheer count (and, early in training, the latent is
    mostly posterior sampling noise), so the time rows get full scale
    while the latent rows start small: the untrained field is effectively
    unconditional in the latent, and that pathway grows only as gradients
    ask for it.  Initial output variance stays ~1 for any latent size.
    """
    w = np.empty((3 + latent_dim, fan_out))
    w[:3] = rng.standard_normal((3, fan_out)) / math.sqrt(3.0)
    w[3:] = rng.standard_normal((latent_dim, fan_out)) * (
        latent_scale / math.sqrt(latent_dim))
    return w


def time_embedding(t: float, horizon: float = 1.0) -> np.ndarray:
    """3-vector (u, sin 2pi u, cos 2pi u) with u = t / horizon."""
    u = t / horizon
    return np.array([u, math.sin(2.0 * math.pi * u), math.cos(2.0 * math.pi * u)])


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by training and checkpoints."""

    latent_dim: int = 256
    field_hidden: int = 128
    field_blocks: int = 6
    encoder_widths: tuple = (64, 128, 256)
    coupling_layers: int = 14
    coupling_hidden: int = 64

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.field_blocks < 1 or self.coupling_layers < 1:
            raise ValueError("need at least one block/layer")

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "field_hidden": self.field_hidden,
            "field_blocks": self.field_blocks,
            "encoder_widths": list(self.encoder_widths),
            "coupling_layers": self.coupling_layers,
            "coupling_hidden": self.coupling_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


class GatedContextualNet:
    """Per-point velocity network conditioned on time and the shape latent.

    Each block computes  h' = h W_h + sigmoid(ctx W_g) * (ctx W_c) + b
    where ctx is the concatenated time embedding and latent vector; a tanh
    between blocks supplies the nonlinearity in the point coordinates.
    Weights are shared across points, so the field is equivariant to point
    reordering by construction.  The final block is zero-initialized (an
    untrained network outputs the zero field) and the context weights
    start time-dominated (see ``_init_context_matrix``).
    """

    def __init__(self, latent_dim: int, hidden: int = 128, blocks: int = 6,
                 out_dim: int = 3, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.blocks = blocks
        self.ctx_dim = 3 + latent_dim
        self.params = ParamStore()
        dims = [3] + [hidden] * (blocks - 1) + [out_dim]
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == blocks - 1
            self.params.add(f"b{i}.w", np.zeros((din, dout)) if last
                            else _init_matrix(rng, din, dout))
            self.params.add(f"b{i}.gate_w", np.zeros((self.ctx_dim, dout)) if last
                            else _init_context_matrix(rng, latent_dim, dout))
            self.params.add(f"b{i}.ctx_w", np.zeros((self.ctx_dim, dout)) if last
                            else _init_context_matrix(rng, latent_dim, dout))
            self.params.add(f"b{i}.bias", np.zeros(dout))

    def __call__(self, points, t: float, z, horizon: float = 1.0) -> Node:
        """Velocity for every point of an (M, 3) cloud; returns (M, 3)."""
        z = ad.wrap(z)
        if z.shape != (self.latent_dim,):
            raise ad.ShapeMismatchError(
                f"latent has shape {z.shape}, expected ({self.latent_dim},)")
        h = ad.wrap(points)
        if h.ndim != 2 or h.shape[1] != 3:
            raise ad.ShapeMismatchError(f"points must be (M, 3), got {h.shape}")
        ctx = ad.concat([ad.wrap(time_embedding(t, horizon)), z])
        p = self.params
        for i in range(self.blocks):
            gate = ad.sigmoid(ad.matmul(ctx, p[f"b{i}.gate_w"]))
            inject = ad.mul(gate, ad.matmul(ctx, p[f"b{i}.ctx_w"]))
            h = ad.matmul(h, p[f"b{i}.w"]) + inject + p[f"b{i}.bias"]
            if i < self.blocks - 1:
                h = ad.tanh(h)
        return h


class PointSetEncoder:
    """Permutation-invariant encoder: shared per-point MLP, max-pool, then
    linear heads for the posterior mean and log-variance.

    Invariance is structural (pooling over the point axis), so reordering
    the input rows gives bitwise-identical outputs.
    """

    def __init__(self, latent_dim: int, widths=(64, 128, 256), rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.widths = tuple(widths)
        self.params = ParamStore()
        dims = [3] + list(self.widths)
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            self.params.add(f"l{i}.w", _init_matrix(rng, din, dout))
            self.params.add(f"l{i}.bias", np.zeros(dout))
        # zero-initialized heads: untrained posterior is N(0, I)
        self.params.add("mu.w", np.zeros((dims[-1], latent_dim)))
        self.params.add("mu.bias", np.zeros(latent_dim))
        self.params.add("logvar.w", np.zeros((dims[-1], latent_dim)))
        self.params.add("logvar.bias", np.zeros(latent_dim))

    def __call__(self, points):
        """Posterior parameters (mu, logvar), each a (latent_dim,) node."""
        h = ad.wrap(points)
        if h.ndim != 2 or h.shape[1] != 3 or h.shape[0] == 0:
            raise ad.ShapeMismatchError(
                f"points must be (M, 3) with M >= 1, got {h.shape}")
        p = self.params
        for i in range(len(self.widths)):
            h = ad.tanh(ad.matmul(h, p[f"l{i}.w"]) + p[f"l{i}.bias"])
        pooled = ad.amax(h, axis=0)
        mu = ad.matmul(pooled, p["mu.w"]) + p["mu.bias"]
        logvar = ad.matmul(pooled, p["logvar.w"]) + p["logvar.bias"]
        return mu, logvar

    def encode(self, points, rng):
        """Reparameterized posterior draw: returns (z, mu, logvar) nodes."""
        mu, logvar = self(points)
        eps = rng.standard_normal(self.latent_dim)
        z = mu + ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps)
        return z, mu, logvar


class BijectorNumericsError(FloatingPointError):
    """Non-finite intermediate inside the coupling bijector."""


class CouplingBijector:
    """Stack of affine coupling layers mapping N(0, I) noise to the latent.

    Layers alternate between transforming the odd-indexed and even-indexed
    coordinates; the scale output is tanh-squashed and multiplied by a
    learnable factor, which bounds |log-scale| and keeps exp() tame.  With
    zero-initialized coupling nets the whole map starts as the identity.
    """

    def __init__(self, dim: int, n_layers: int = 14, hidden: int = 64, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        if dim < 2:
            raise ValueError("coupling bijector needs dim >= 2")
        self.dim = dim
        self.n_layers = n_layers
        self.params = ParamStore()
        self.masks = []
        for i in range(n_layers):
            mask = np.zeros(dim)
            mask[i % 2::2] = 1.0  # 1 = pass-through coordinate
            self.masks.append(mask)
            for net in ("scale", "shift"):
                self.params.add(f"c{i}.{net}.w0", _init_matrix(rng, dim, hidden))
                self.params.add(f"c{i}.{net}.b0", np.zeros(hidden))
                self.params.add(f"c{i}.{net}.w1", np.zeros((hidden, dim)))
                self.params.add(f"c{i}.{net}.b1", np.zeros(dim))
            self.params.add(f"c{i}.s_factor", np.array(1.0))

    def _coupling(self, i: int, passthrough: Node):
        """Scale/shift nodes for layer ``i`` given the pass-through half."""
        p = self.params

        def mlp(net):
            h = ad.tanh(ad.matmul(passthrough, p[f"c{i}.{net}.w0"]) + p[f"c{i}.{net}.b0"])
            return ad.matmul(h, p[f"c{i}.{net}.w1"]) + p[f"c{i}.{net}.b1"]

        s = ad.mul(p[f"c{i}.s_factor"], ad.tanh(mlp("scale")))
        return s, mlp("shift")

    @staticmethod
    def _check_finite(vec: Node, i: int) -> None:
        if not np.all(np.isfinite(vec.value)):
            raise BijectorNumericsError(
                f"non-finite intermediate after coupling layer {i}")

    def forward(self, w):
        """Noise -> latent.  Returns (z, log|det dz/dw|) as nodes."""
        vec = ad.wrap(w)
        if vec.shape != (self.dim,):
            raise ad.ShapeMismatchError(
                f"bijector input has shape {vec.shape}, expected ({self.dim},)")
        logdet = ad.wrap(0.0)
        for i in range(self.n_layers):
            mask = self.masks[i]
            held = ad.mul(vec, mask)
            s, t = self._coupling(i, held)
            moved = ad.mul(ad.mul(vec, ad.exp(s)) + t, 1.0 - mask)
            vec = held + moved
            self._check_finite(vec, i)
            logdet = logdet + ad.reduce_sum(ad.mul(s, 1.0 - mask))
        return vec, logdet

    def inverse(self, z):
        """Latent -> noise.  Returns (w, log|det dw/dz|) as nodes."""
        vec = ad.wrap(z)
        if vec.shape != (self.dim,):
            raise ad.ShapeMismatchError(
                f"bijector input has shape {vec.shape}, expected ({self.dim},)")
        logdet = ad.wrap(0.0)
        for i in reversed(range(self.n_layers)):
            mask = self.masks[i]
            held = ad.mul(vec, mask)
            s, t = self._coupling(i, held)
            moved = ad.mul(ad.mul(vec - t, ad.exp(ad.neg(s))), 1.0 - mask)
            vec = held + moved
            self._check_finite(vec, i)
            logdet = logdet - ad.reduce_sum(ad.mul(s, 1.0 - mask))
        return vec, logdet


def kl_divergence(mu: Node, logvar: Node, z: Node,
                  bijector: CouplingBijector) -> Node:
    """Single-sample KL estimate  log q(z | cloud) - log prior(z).

    The prior density is evaluated through the bijector's inverse via the
    change-of-variables identity; ``z`` must be the reparameterized draw
    from N(mu, diag(exp(logvar))) so the estimate is differentiable
    through all three inputs.
    """
    delta = z - mu
    log_posterior = ad.reduce_sum(
        ad.mul(logvar + _LOG_2PI + ad.mul(ad.mul(delta, delta),
                                          ad.exp(ad.neg(logvar))), -0.5))
    w, logdet_inv = bijector.inverse(z)
    log_prior = ad.reduce_sum(ad.mul(ad.mul(w, w) + _LOG_2PI, -0.5)) + logdet_inv
    return log_posterior - log_prior


@dataclass
class ModelSet:
    """The three networks trained jointly, with uniform parameter access."""

    config: ModelConfig
    field_net: GatedContextualNet
    encoder: PointSetEncoder
    bijector: CouplingBijector

    def named_parameters(self):
        for name, node in self.field_net.params.named():
            yield "field." + name, node
        for name, node in self.encoder.params.named():
            yield "encoder." + name, node
        for name, node in self.bijector.params.named():
            yield "bijector." + name, node

    def zero_grad(self) -> None:
        self.field_net.params.zero_grad()
        self.encoder.params.zero_grad()
        self.bijector.params.zero_grad()

    def state_dict(self) -> dict:
        return {name: node.value.copy() for name, node in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        for name, node in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state dict")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} != {node.value.shape}")
            node.value = arr.copy()
            node.grad = None

    def n_parameters(self) -> int:
        return sum(node.value.size for _, node in self.named_parameters())


def build_models(config: ModelConfig, rng=None) -> ModelSet:
    """Fresh ModelSet with deterministic initialization from ``rng``."""
    if rng is None:
        rng = np.random.default_rng(0)
    field_net = GatedContextualNet(config.latent_dim, config.field_hidden,
                                   config.field_blocks, rng=rng)
    encoder = PointSetEncoder(config.latent_dim, config.encoder_widths, rng=rng)
    bijector = CouplingBijector(config.latent_dim, config.coupling_layers,
                                config.coupling_hidden, rng=rng)
    return ModelSet(config, field_net, encoder, bijector)


@dataclass
class Checkpoint:
    """Everything needed to resume or sample: weights, optimizer state,
    and the configuration that produced them."""

    algorithm: str  # "flow" or "diffusion"
    model_config: ModelConfig
    train_config: dict
    params: dict = field(default_factory=dict)
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int = 0
    step_count: int = 0
    final_loss: float = float("nan")


def models_from_checkpoint(ckpt: Checkpoint) -> ModelSet:
    models = build_models(ckpt.model_config, np.random.default_rng(0))
    models.load_state_dict(ckpt.params)
    return models
