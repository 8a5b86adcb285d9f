"""Continuous probability modeling: a bidirectional-GRU VAE over cluster probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import BiGRU, Linear, Module
from .tensor import Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass
class LatentPosterior:
    mu: Tensor
    log_var: Tensor
    z: Tensor | None = None


def reparameterize(mu, log_var, eps) -> Tensor:
    """z = mu + eps * exp(0.5 * log_var) with caller-supplied standard normals."""
    mu, log_var = tn.tensor(mu), tn.tensor(log_var)
    eps = np.asarray(eps, dtype=np.float64)
    if not (mu.shape == log_var.shape == eps.shape):
        raise tn.ShapeError(f"reparameterize: mu {mu.shape}, log_var {log_var.shape}, eps {eps.shape}")
    return tn.add(mu, tn.mul(eps, tn.exp(tn.scalar_mul(log_var, 0.5))))


def kl_divergence(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, 1)), summed over time and latent dims, mean over batch."""
    mu, log_var = tn.tensor(mu), tn.tensor(log_var)
    if mu.shape != log_var.shape:
        raise tn.ShapeError(f"kl_divergence: mu {mu.shape} vs log_var {log_var.shape}")
    terms = tn.sub(tn.sub(tn.add(log_var, 1.0), tn.square(mu)), tn.exp(log_var))
    if mu.ndim <= 2:
        return tn.scalar_mul(tn.sum(terms), -0.5)
    per_item = tn.sum(terms, axis=(-2, -1))
    return tn.scalar_mul(tn.mean(per_item), -0.5)


class ProbabilityVAE(Module):
    """Posterior encoders for mu and log-variance, and a recurrent decoder back to K clusters.

    The mean and variance encoders are separate BiGRUs; both emit one
    latent vector per timestep, so the decoder BiGRU runs over the sampled
    latent sequence.
    """

    def __init__(self, name: str, n_clusters: int, latent_dim: int, hidden_dim: int,
                 rng: np.random.Generator):
        super().__init__(name)
        self.n_clusters = n_clusters
        self.latent_dim = latent_dim
        self.enc_mu = self.add_child(BiGRU(f"{name}.enc_mu", n_clusters, hidden_dim, rng))
        self.enc_sigma = self.add_child(BiGRU(f"{name}.enc_sigma", n_clusters, hidden_dim, rng))
        self.proj_mu = self.add_child(Linear(f"{name}.proj_mu", 2 * hidden_dim, latent_dim, rng))
        self.proj_sigma = self.add_child(Linear(f"{name}.proj_sigma", 2 * hidden_dim, latent_dim, rng))
        self.dec = self.add_child(BiGRU(f"{name}.dec", latent_dim, hidden_dim, rng))
        self.proj_pred = self.add_child(Linear(f"{name}.proj_pred", 2 * hidden_dim, n_clusters, rng))

    def encode(self, pi: Tensor) -> LatentPosterior:
        mu = self.proj_mu(self.enc_mu(pi))
        log_var = tn.clamp(self.proj_sigma(self.enc_sigma(pi)), LOG_VAR_MIN, LOG_VAR_MAX)
        return LatentPosterior(mu=mu, log_var=log_var)

    def decode(self, z: Tensor) -> Tensor:
        return tn.softmax(self.proj_pred(self.dec(z)), axis=-1)

    def __call__(self, pi: Tensor, eps: np.ndarray | None) -> tuple[Tensor, LatentPosterior, Tensor]:
        """Returns (pi_hat, posterior, kl).  ``eps=None`` means eps = 0 (z = mu)."""
        post = self.encode(pi)
        if eps is None:
            post.z = post.mu
        else:
            post.z = reparameterize(post.mu, post.log_var, eps)
        pi_hat = self.decode(post.z)
        return pi_hat, post, kl_divergence(post.mu, post.log_var)


class LinearProbabilityMap(Module):
    """Ablation stand-in for the VAE: per-timestep linear map pi -> softmax logits."""

    def __init__(self, name: str, n_clusters: int, rng: np.random.Generator):
        super().__init__(name)
        self.n_clusters = n_clusters
        self.proj = self.add_child(Linear(f"{name}.proj", n_clusters, n_clusters, rng))

    def __call__(self, pi: Tensor, eps=None) -> tuple[Tensor, None, Tensor]:
        return tn.softmax(self.proj(pi), axis=-1), None, Tensor(0.0)
