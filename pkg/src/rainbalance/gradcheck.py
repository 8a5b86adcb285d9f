"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    tol: float
    step: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def failures(self) -> list[str]:
        return [name for name, e in self.errors.items() if e > self.tol]

    def lines(self) -> list[str]:
        return [f"{'PASS' if e <= self.tol else 'FAIL'} {name} max_rel_err={e:.3e}"
                for name, e in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare ``backward`` gradients of the scalar ``fn()`` against central differences.

    ``fn`` must be a deterministic function of the current parameter
    values; any noise has to be fixed outside it.  Parameters are perturbed
    in place and restored afterwards.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    params = list(params)
    if len({p.name for p in params}) != len(params):
        raise ValueError("parameter names must be unique")

    first = fn()
    if first.data.size != 1:
        raise ValueError(f"function must return a scalar, got shape {first.shape}")
    again = fn()
    if not np.array_equal(first.data, again.data):
        raise NonDeterministicError(
            f"function is not deterministic: {first.item()!r} vs {again.item()!r}")

    for p in params:
        p.grad = None
    backward(first)
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    report = GradCheckReport(tol=tol, step=step)
    for p in params:
        original = p.data
        numeric = np.zeros_like(original)
        for idx in np.ndindex(original.shape):
            bumped = original.copy()
            bumped[idx] += step
            p.data = bumped
            f_plus = fn().item()
            bumped = original.copy()
            bumped[idx] -= step
            p.data = bumped
            f_minus = fn().item()
            numeric[idx] = (f_plus - f_minus) / (2.0 * step)
        p.data = original
        report.errors[p.name] = float(relative_error(analytic[p.name], numeric).max(initial=0.0))
    for p in params:
        p.grad = None
    return report


def check_model(run, seed: int = 0, batch: int = 2, step: float = 1e-5,
                tol: float = 1e-4) -> GradCheckReport:
    """End-to-end check of the total training loss for every model parameter.

    Inputs, targets, relaxation noise and VAE noise are drawn once and held
    fixed.  The relaxation is checked in its soft form and with the
    embedding gradient through the assignment left on: the straight-through
    estimator and the stop-gradient are surrogates whose derivative differs
    from the forward function by construction.
    """
    import dataclasses

    from .model import RainBalanceModel
    from .rng import stream

    run = dataclasses.replace(run, straight_through=False, detach_assignment=False)
    model = RainBalanceModel(run, seed=seed)
    rng = stream(seed, "gradcheck")
    x = rng.standard_normal((batch, run.l, run.input_dim))
    y = rng.standard_normal((batch, run.h))
    noise = model.draw_noise(rng, batch)

    def fn():
        return model.loss(model.forward(x, "train", noise), y).total

    return grad_check(fn, model.parameters(), step=step, tol=tol)
