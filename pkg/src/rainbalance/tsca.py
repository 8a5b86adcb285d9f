"""Temporal sample cluster assignment.

Timestamps of one input window are softly assigned to K learnable
prototypes by cosine affinity and then stochastically binarised.  Each
prototype is refined by attention restricted to its members.  The
cluster loss pairs the binarised memberships with a Gaussian similarity
matrix computed on the raw window features.

All functions accept an optional leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import Module, uniform_init
from .tensor import NumericalError, Tensor

PROB_CLAMP = 1e-7
MASK_EPS = 1e-8
NORM_EPS = 1e-12


def compute_similarity(x, sigma: float = 1.0) -> np.ndarray:
    """Gaussian similarity of timestamps, ``exp(-sigma * d2 / max(d2))``.

    ``x`` has shape (..., T, C).  A window whose rows are all identical has
    max(d2) == 0 and yields the all-ones matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"similarity needs (T, C) input, got shape {x.shape}")
    if x.shape[-2] < 2:
        raise ValueError(f"similarity needs at least 2 timestamps, got {x.shape[-2]}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite values in similarity input")
    sq = np.sum(x * x, axis=-1)
    d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * np.matmul(x, np.swapaxes(x, -1, -2))
    d2 = np.maximum(d2, 0.0)
    # exact zeros on the diagonal and exact symmetry
    idx = np.arange(x.shape[-2])
    d2[..., idx, idx] = 0.0
    d2 = 0.5 * (d2 + np.swapaxes(d2, -1, -2))
    param = d2.max(axis=(-2, -1), keepdims=True)
    param = np.where(param > 0.0, param, 1.0)
    return np.exp(-sigma * d2 / param)


def _unit_rows(v: Tensor) -> Tensor:
    norm = tn.sqrt(tn.add(tn.sum(tn.square(v), axis=-1, keepdims=True), NORM_EPS))
    return tn.div(v, norm)


def assign_clusters(h, u) -> Tensor:
    """pi[t, k] = softmax_k cos(u_k, h_t).  ``h``: (..., T, d); ``u``: (K, d) or (..., K, d)."""
    h, u = tn.tensor(h), tn.tensor(u)
    if h.shape[-1] != u.shape[-1]:
        raise tn.ShapeError(f"assign_clusters: embedding dim {h.shape} vs prototypes {u.shape}")
    cos = tn.matmul(_unit_rows(h), tn.transpose(_unit_rows(u)))
    return tn.softmax(cos, axis=-1)


def relax_assignment(pi, temperature: float = 0.5, mode: str = "train", noise=None,
                     straight_through: bool = True) -> Tensor:
    """Relaxed Bernoulli memberships A ~ Bernoulli(pi).

    Train mode draws ``sigmoid((logit(pi) + logit(u)) / temperature)`` from
    the supplied uniforms ``u``.  With ``straight_through`` the forward value
    is the hard indicator (soft > 0.5), so E[A] = pi, while gradients flow
    through the soft relaxation.  Eval mode returns ``pi`` itself.
    """
    pi = tn.tensor(pi)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if mode == "eval":
        return pi
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if noise is None:
        raise ValueError("train-mode relaxation needs explicit uniform noise")
    u = np.clip(np.asarray(noise, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    if u.shape != pi.shape:
        raise tn.ShapeError(f"noise shape {u.shape} does not match pi {pi.shape}")
    p = tn.clamp(pi, PROB_CLAMP, 1.0 - PROB_CLAMP)
    logits = tn.sub(tn.log(p), tn.log(tn.sub(1.0, p)))
    logits = tn.add(logits, np.log(u) - np.log1p(-u))
    soft = tn.sigmoid(tn.scalar_mul(logits, 1.0 / temperature))
    if not straight_through:
        return soft
    return tn.straight_through((soft.data > 0.5).astype(np.float64), soft)


def update_centroids(u, h, a, w_q, w_k, w_v, eps: float = MASK_EPS) -> Tensor:
    """Masked cross-attention from prototypes to their member timestamps.

    gamma = (U W_Q)(H W_K)^T / sqrt(d);  weights = row-normalised
    exp(gamma - rowmax) * A^T;  U* = weights (H W_V).  A prototype whose
    masked row sums below ``eps`` keeps its incoming value.
    """
    u, h, a = tn.tensor(u), tn.tensor(h), tn.tensor(a)
    d = u.shape[-1]
    q = tn.matmul(u, w_q)
    k = tn.matmul(h, w_k)
    gamma = tn.scalar_mul(tn.matmul(q, tn.transpose(k)), 1.0 / np.sqrt(d))
    # the shift cancels in the normalisation, so it is held constant
    shift = gamma.data.max(axis=-1, keepdims=True)
    masked = tn.mul(tn.exp(tn.sub(gamma, shift)), tn.transpose(a))
    row = tn.sum(masked, axis=-1, keepdims=True)
    weights = tn.div(masked, tn.add(row, eps))
    refined = tn.matmul(weights, tn.matmul(h, w_v))
    keep = (row.data >= eps).astype(np.float64)
    if keep.all():
        return refined
    return tn.add(tn.mul(refined, keep), tn.mul(u, 1.0 - keep))


def cluster_loss(a, s) -> Tensor:
    """-Tr(A^T S A) + Tr((I - A A^T) S), averaged over any leading batch axes."""
    a = tn.tensor(a)
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if s.shape[-1] != a.shape[-2] or s.shape[-2] != a.shape[-2]:
        raise tn.ShapeError(f"cluster_loss: A {a.shape} vs S {s.shape}")
    within = tn.sum(tn.mul(a, tn.matmul(s, a)), axis=(-2, -1))
    aat = tn.matmul(a, tn.transpose(a))
    trace_s = np.trace(s, axis1=-2, axis2=-1)
    across = tn.sub(trace_s, tn.sum(tn.mul(aat, np.swapaxes(s, -1, -2)), axis=(-2, -1)))
    return tn.mean(tn.add(tn.scalar_mul(within, -1.0), across))


@dataclass
class ClusterState:
    pi: Tensor
    a: Tensor
    u_star: Tensor
    s: np.ndarray


class TemporalClusterAssignment(Module):
    """Prototypes U and the query/key/value projections of the refinement step."""

    def __init__(self, name: str, n_clusters: int, dim: int, rng: np.random.Generator,
                 sigma: float = 1.0, temperature: float = 0.5, rounds: int = 1,
                 straight_through: bool = True, detach_assignment: bool = True):
        super().__init__(name)
        if rounds < 1:
            raise ValueError("at least one assignment round is required")
        self.n_clusters = n_clusters
        self.dim = dim
        self.sigma = sigma
        self.temperature = temperature
        self.rounds = rounds
        self.straight_through = straight_through
        # the assignment reads the embedding as a constant, so the clustering
        # objective trains U and the projections but never reshapes the
        # backbone representation; the fusion path still backpropagates into H
        self.detach_assignment = detach_assignment
        self.u = self.add_param("U", uniform_init(rng, (n_clusters, dim), dim))
        self.w_q = self.add_param("W_Q", uniform_init(rng, (dim, dim), dim))
        self.w_k = self.add_param("W_K", uniform_init(rng, (dim, dim), dim))
        self.w_v = self.add_param("W_V", uniform_init(rng, (dim, dim), dim))

    def __call__(self, x_raw: np.ndarray, h: Tensor, mode: str, noise: np.ndarray | None,
                 uniform_pi: bool = False) -> ClusterState:
        """``noise`` has shape (rounds, B, T, K) in train mode."""
        s = compute_similarity(x_raw, self.sigma)
        centroids: Tensor = self.u
        h_assign = h.detach() if self.detach_assignment else h
        pi = a = None
        for r in range(self.rounds):
            if uniform_pi:
                pi = tn.Tensor(np.full(h.shape[:-1] + (self.n_clusters,), 1.0 / self.n_clusters))
            else:
                pi = assign_clusters(h_assign, centroids)
            a = relax_assignment(pi, self.temperature, mode,
                                 None if noise is None else noise[r],
                                 straight_through=self.straight_through)
            centroids = update_centroids(centroids, h, a, self.w_q, self.w_k, self.w_v)
        return ClusterState(pi=pi, a=a, u_star=centroids, s=s)
