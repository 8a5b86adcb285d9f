"""Backbones, prototype fusion and the composite RainBalance forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import RunBlock
from .cpm import LatentPosterior, LinearProbabilityMap, ProbabilityVAE
from .nn import GRU, Linear, Module
from .rng import stream
from .tensor import Tensor
from .tsca import TemporalClusterAssignment, cluster_loss


# ---------------------------------------------------------------- backbones

class Backbone(Module):
    """Embedding contract: ``embed`` (B, T, C) -> (B, T, d), ``predict`` (B, T, d) -> (B, h)."""

    dim: int

    def embed(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def predict(self, e: Tensor) -> Tensor:
        raise NotImplementedError


class RecurrentBackbone(Backbone):
    """GRU encoder; the forecast head reads the last timestep."""

    def __init__(self, input_dim: int, dim: int, horizon: int, rng: np.random.Generator,
                 name: str = "backbone"):
        super().__init__(name)
        self.dim = dim
        self.encoder = self.add_child(GRU(f"{name}.gru", input_dim, dim, rng))
        self.head = self.add_child(Linear(f"{name}.head", dim, horizon, rng))

    def embed(self, x):
        return self.encoder(tn.tensor(x))

    def predict(self, e):
        return self.head(e[:, -1, :])


class LinearBackbone(Backbone):
    """Per-timestep linear embedding, flattened into a linear forecast head."""

    def __init__(self, input_dim: int, dim: int, horizon: int, window: int,
                 rng: np.random.Generator, name: str = "backbone"):
        super().__init__(name)
        self.dim = dim
        self.window = window
        self.encoder = self.add_child(Linear(f"{name}.embed", input_dim, dim, rng))
        self.head = self.add_child(Linear(f"{name}.head", window * dim, horizon, rng))

    def embed(self, x):
        return self.encoder(tn.tensor(x))

    def predict(self, e):
        return self.head(tn.reshape(e, (e.shape[0], self.window * self.dim)))


def reference_backbones(input_dim: int, dim: int, horizon: int, window: int,
                        seed: int = 0) -> tuple[RecurrentBackbone, LinearBackbone]:
    rng = stream(seed, "init", "backbone")
    return (RecurrentBackbone(input_dim, dim, horizon, rng),
            LinearBackbone(input_dim, dim, horizon, window, stream(seed, "init", "backbone")))


def build_backbone(cfg: RunBlock, seed: int) -> Backbone:
    rng = stream(seed, "init", "backbone")
    if cfg.backbone == "recurrent":
        return RecurrentBackbone(cfg.input_dim, cfg.d, cfg.h, rng)
    if cfg.backbone == "linear":
        return LinearBackbone(cfg.input_dim, cfg.d, cfg.h, cfg.l, rng)
    raise ValueError(f"unknown backbone {cfg.backbone!r}")


# ---------------------------------------------------------------- fusion

def fuse(pi_hat, u_star) -> Tensor:
    """H_vae[t] = sum_k pi_hat[t, k] * U*[k]."""
    pi_hat, u_star = tn.tensor(pi_hat), tn.tensor(u_star)
    if pi_hat.shape[-1] != u_star.shape[-2]:
        raise tn.ShapeError(f"fuse: pi_hat {pi_hat.shape} vs prototypes {u_star.shape}")
    return tn.matmul(pi_hat, u_star)


def combine(e_backbone, h_vae) -> Tensor:
    e_backbone, h_vae = tn.tensor(e_backbone), tn.tensor(h_vae)
    if e_backbone.shape != h_vae.shape:
        raise tn.ShapeError(f"combine: backbone embedding {e_backbone.shape} vs fusion {h_vae.shape}")
    return tn.add(e_backbone, h_vae)


@dataclass
class LossBreakdown:
    cluster: Tensor
    kl: Tensor
    mse: Tensor
    beta: float
    total: Tensor

    def as_floats(self) -> dict:
        return {"cluster": self.cluster.item(), "kl": self.kl.item(), "mse": self.mse.item(),
                "beta": self.beta, "total": self.total.item()}


def total_loss(cluster, kl, y, y_hat, beta: float) -> LossBreakdown:
    """beta * (cluster + kl) + (1 - beta) * mean squared error over the horizon."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    y, y_hat = tn.tensor(y), tn.tensor(y_hat)
    if y.shape != y_hat.shape:
        raise tn.ShapeError(f"targets {y.shape} vs predictions {y_hat.shape}")
    cluster, kl = tn.tensor(cluster), tn.tensor(kl)
    mse = tn.mean(tn.square(tn.sub(y_hat, y)))
    total = tn.add(tn.scalar_mul(tn.add(cluster, kl), beta), tn.scalar_mul(mse, 1.0 - beta))
    return LossBreakdown(cluster=cluster, kl=kl, mse=mse, beta=beta, total=total)


# ---------------------------------------------------------------- composite model

@dataclass
class ForwardResult:
    y_hat: Tensor
    cluster: Tensor
    kl: Tensor
    pi: Tensor | None = None
    a: Tensor | None = None
    s: np.ndarray | None = None
    u_star: Tensor | None = None
    posterior: LatentPosterior | None = None
    pi_hat: Tensor | None = None
    h_vae: Tensor | None = None


class RainBalanceModel(Module):
    """A backbone optionally enhanced by clustering, probability modeling and fusion.

    ``variant`` selects the ablation: ``full``; ``no_cluster`` (uniform
    1/K distribution fed to the VAE, no cluster loss); ``no_vae`` (linear
    map in place of the VAE, no KL); ``none`` (bare backbone).
    """

    def __init__(self, cfg: RunBlock, seed: int | None = None, backbone: Backbone | None = None):
        super().__init__("model")
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        self.variant = cfg.variant
        self.backbone = self.add_child(backbone if backbone is not None else build_backbone(cfg, seed))
        self.tsca = self.prob = None
        if self.variant != "none":
            self.tsca = self.add_child(TemporalClusterAssignment(
                "tsca", cfg.K, self.backbone.dim, stream(seed, "init", "tsca"), sigma=cfg.sigma,
                temperature=cfg.temperature, rounds=cfg.rounds,
                straight_through=cfg.straight_through, detach_assignment=cfg.detach_assignment))
            if self.variant == "no_vae":
                self.prob = self.add_child(LinearProbabilityMap("cpm", cfg.K, stream(seed, "init", "cpm")))
            else:
                self.prob = self.add_child(ProbabilityVAE("cpm", cfg.K, cfg.N, cfg.hidden_dim,
                                                          stream(seed, "init", "cpm")))

    @property
    def beta(self) -> float:
        return 0.0 if self.variant == "none" else self.cfg.beta

    def draw_noise(self, rng: np.random.Generator, batch: int) -> dict | None:
        if self.variant == "none":
            return None
        T, K = self.cfg.l, self.cfg.K
        noise = {"uniform": rng.uniform(size=(self.cfg.rounds, batch, T, K))}
        if self.variant != "no_vae":
            noise["eps"] = rng.standard_normal((batch, T, self.cfg.N))
        return noise

    def forward(self, x, mode: str = "train", noise: dict | None = None,
                zero_fusion: bool = False) -> ForwardResult:
        """``x``: normalized windows (B, T, C).  Eval mode ignores ``noise`` (eps = 0, A = pi)."""
        x = np.asarray(x, dtype=np.float64)
        e = self.backbone.embed(Tensor(x))
        zero = Tensor(0.0)
        if self.variant == "none":
            return ForwardResult(y_hat=self.backbone.predict(e), cluster=zero, kl=zero)
        if mode == "train" and noise is None:
            raise ValueError("train-mode forward needs noise; see draw_noise")
        train = mode == "train"
        state = self.tsca(x, e, mode, noise["uniform"] if train else None,
                          uniform_pi=self.variant == "no_cluster")
        pi_hat, posterior, kl = self.prob(state.pi, noise.get("eps") if train else None)
        h_vae = fuse(pi_hat, state.u_star)
        if zero_fusion:
            h_vae = tn.scalar_mul(h_vae, 0.0)
        y_hat = self.backbone.predict(combine(e, h_vae))
        cl = zero if self.variant == "no_cluster" else cluster_loss(state.a, state.s)
        return ForwardResult(y_hat=y_hat, cluster=cl, kl=kl, pi=state.pi, a=state.a, s=state.s,
                             u_star=state.u_star, posterior=posterior, pi_hat=pi_hat, h_vae=h_vae)

    def loss(self, out: ForwardResult, y, beta: float | None = None) -> LossBreakdown:
        return total_loss(out.cluster, out.kl, y, out.y_hat, self.beta if beta is None else beta)
