"""Layers, recurrent cells and the optimizer built on :mod:`rainbalance.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Parameter, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container that owns named parameters and child modules."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Parameter] = {}
        self._children: list[Module] = []

    def add_param(self, local: str, data) -> Parameter:
        p = Parameter(f"{self.name}.{local}", np.array(data, dtype=np.float64))
        self._params[local] = p
        return p

    def add_child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params.values())
        for child in self._children:
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise ValueError(f"duplicate parameter names under {self.name!r}")
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__(name)
        self.weight = self.add_param("W", uniform_init(rng, (in_dim, out_dim), in_dim))
        self.bias = self.add_param("b", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.add(tn.matmul(x, self.weight), self.bias)


# ---------------------------------------------------------------- GRU

def gru_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over ``x`` of shape (B, T, I) from a zero state.

    Gate layout along the 3H axis is (reset, update, candidate):

        r = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
        z = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
        n = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h

    Returns all hidden states, shape (B, T, H).  With ``reverse`` the
    sequence is consumed from the last step, and output position t holds
    the state after reading x[T-1], ..., x[t].

    Implemented as one tape primitive with hand-written backpropagation
    through time; :func:`gru_sequence_reference` is the same recurrence
    composed from elementwise primitives.
    """
    x, w_x, w_h, b_x, b_h = (tn.tensor(v) for v in (x, w_x, w_h, b_x, b_h))
    if x.ndim != 3:
        raise tn.ShapeError(f"gru_sequence expects (B, T, I) input, got {x.shape}")
    B, T, I = x.shape
    H = w_h.shape[0]
    if w_x.shape != (I, 3 * H) or w_h.shape != (H, 3 * H):
        raise tn.ShapeError(f"gru_sequence: W_x {w_x.shape}, W_h {w_h.shape} inconsistent with "
                            f"input {x.shape} and hidden {H}")
    # time-major buffers keep per-step slices contiguous
    gx = np.ascontiguousarray(np.swapaxes(x.data @ w_x.data + b_x.data, 0, 1))
    steps = list(range(T - 1, -1, -1) if reverse else range(T))
    hs = np.empty((T, B, H))
    rz = np.empty((T, B, 2 * H))
    ns = np.empty((T, B, H))
    ghn = np.empty((T, B, H))
    prev = np.empty((T, B, H))
    h = np.zeros((B, H))
    wh, bh = w_h.data, b_h.data
    for t in steps:
        gh = h @ wh + bh
        g = gx[t]
        rz[t] = tn._sigmoid_np(g[:, :2 * H] + gh[:, :2 * H])
        ghn[t] = gh[:, 2 * H:]
        ns[t] = np.tanh(g[:, 2 * H:] + rz[t, :, :H] * ghn[t])
        prev[t] = h
        h = ns[t] + rz[t, :, H:] * (h - ns[t])
        hs[t] = h

    def bw(grad_out, acc):
        grad_tm = np.swapaxes(grad_out, 0, 1)
        dgx = np.empty((T, B, 3 * H))
        dgh = np.empty((T, B, 3 * H))
        dh_carry = np.zeros((B, H))
        wh_t = wh.T
        for t in reversed(steps):
            r, z, n = rz[t, :, :H], rz[t, :, H:], ns[t]
            dh = grad_tm[t] + dh_carry
            dan = dh * (1.0 - z) * tn._dtanh(n)
            daz = dh * (prev[t] - n) * tn._dsigmoid(z)
            dar = dan * ghn[t] * tn._dsigmoid(r)
            dgx[t, :, :H] = dar
            dgx[t, :, H:2 * H] = daz
            dgx[t, :, 2 * H:] = dan
            dgh[t, :, :2 * H] = dgx[t, :, :2 * H]
            dgh[t, :, 2 * H:] = dan * r
            dh_carry = dh * z + dgh[t] @ wh_t
        flat_h = dgh.reshape(T * B, 3 * H)
        acc(w_h, prev.reshape(T * B, H).T @ flat_h)
        acc(b_h, flat_h.sum(axis=0))
        flat = dgx.reshape(T * B, 3 * H)
        if x.requires_grad:
            acc(x, np.swapaxes(dgx @ w_x.data.T, 0, 1))
        acc(w_x, np.swapaxes(x.data, 0, 1).reshape(T * B, I).T @ flat)
        acc(b_x, flat.sum(axis=0))

    hs = np.ascontiguousarray(np.swapaxes(hs, 0, 1))
    return tn._make("gru_sequence", hs, (x, w_x, w_h, b_x, b_h), bw)


def gru_sequence_reference(x, w_x, w_h, b_x, b_h, reverse: bool = False) -> Tensor:
    """Same recurrence as :func:`gru_sequence`, composed from tape primitives."""
    x = tn.tensor(x)
    B, T, _ = x.shape
    H = w_h.shape[0]
    gx = tn.add(tn.matmul(x, w_x), b_x)
    h = Tensor(np.zeros((B, H)))
    outs: dict[int, Tensor] = {}
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        g = gx[:, t]
        gh = tn.add(tn.matmul(h, w_h), b_h)
        r = tn.sigmoid(g[:, :H] + gh[:, :H])
        z = tn.sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
        n = tn.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
        h = n + z * (h - n)
        outs[t] = h
    return tn.stack([outs[t] for t in range(T)], axis=1)


class GRU(Module):
    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator,
                 reverse: bool = False):
        super().__init__(name)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.reverse = reverse
        self.w_x = self.add_param("W_x", uniform_init(rng, (input_dim, 3 * hidden_dim), input_dim))
        self.w_h = self.add_param("W_h", uniform_init(rng, (hidden_dim, 3 * hidden_dim), hidden_dim))
        self.b_x = self.add_param("b_x", np.zeros(3 * hidden_dim))
        self.b_h = self.add_param("b_h", np.zeros(3 * hidden_dim))

    def __call__(self, x: Tensor) -> Tensor:
        """(B, T, I) -> (B, T, H); a single (T, I) sequence maps to (T, H)."""
        x = tn.tensor(x)
        if x.ndim == 2:
            out = gru_sequence(tn.reshape(x, (1,) + x.shape), self.w_x, self.w_h, self.b_x, self.b_h,
                               reverse=self.reverse)
            return tn.reshape(out, out.shape[1:])
        return gru_sequence(x, self.w_x, self.w_h, self.b_x, self.b_h, reverse=self.reverse)


class BiGRU(Module):
    """Forward and backward GRU lanes concatenated per timestep: (B, T, 2H)."""

    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__(name)
        self.hidden_dim = hidden_dim
        self.fwd = self.add_child(GRU(f"{name}.fwd", input_dim, hidden_dim, rng))
        self.bwd = self.add_child(GRU(f"{name}.bwd", input_dim, hidden_dim, rng, reverse=True))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.concat([self.fwd(x), self.bwd(x)], axis=-1)


# ---------------------------------------------------------------- optimisation

def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for p in self.params:
            self.m[p.name] = np.array(state["m"][p.name], dtype=np.float64)
            self.v[p.name] = np.array(state["v"][p.name], dtype=np.float64)
