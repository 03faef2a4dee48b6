"""The per-node regularized problem ``G(w) = L(w) + lam/2 ||w - anchor||^2``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nets import Batch, GatedBackbone, loss_and_grad
from .tasks import QuadraticTask

__all__ = [
    "NetworkLoss",
    "LocalProblem",
    "StopRule",
    "SolverStall",
    "local_objective",
    "solve_inexact",
    "solve_exact_quadratic",
]

NEURAL_STEP = 0.05
MAX_STEPS = 10_000


class SolverStall(RuntimeError):
    """Tolerance not reached within the step cap."""

    def __init__(self, best_residual, steps, context=""):
        msg = f"local solve stalled after {steps} steps, best residual {best_residual:.3e}"
        super().__init__(f"{context}: {msg}" if context else msg)
        self.best_residual = best_residual
        self.steps = steps


class NetworkLoss:
    """Mean cross-entropy of a network on one node's training data.

    Holds a private copy of the network, so one instance must not be shared
    between threads.
    """

    def __init__(self, net: GatedBackbone, batch: Batch, gating: bool = True, rng=None):
        self.net = net.clone()
        self.batch = batch
        self.gating = gating
        self.rng = rng

    @property
    def dim(self):
        return self.net.n_params

    def value_and_grad(self, w):
        self.net.params[:] = w
        loss, g_theta, g_phi = loss_and_grad(self.net, self.batch, gating=self.gating, rng=self.rng)
        return loss, np.concatenate([g_theta, g_phi])


@dataclass
class LocalProblem:
    loss: object
    lam: float
    anchor: np.ndarray

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        if self.anchor.size != self.loss.dim:
            raise ValueError(f"anchor has {self.anchor.size} entries, loss expects {self.loss.dim}")

    @property
    def is_quadratic(self):
        return isinstance(self.loss, QuadraticTask)

    def default_step(self):
        if self.is_quadratic:
            return 1.0 / (np.linalg.eigvalsh(self.loss.A)[-1] + self.lam)
        return NEURAL_STEP


@dataclass(frozen=True)
class StopRule:
    """``mode="fixed"`` runs ``steps`` GD steps; ``mode="tolerance"`` runs until
    ``||grad G||^2 <= tol``. ``step_size=None`` picks the problem default."""

    mode: str = "fixed"
    steps: int = 1
    tol: float = 1e-8
    step_size: Optional[float] = None
    max_steps: int = MAX_STEPS

    def __post_init__(self):
        if self.mode not in ("fixed", "tolerance"):
            raise ValueError(f"unknown stop mode {self.mode!r}")
        if self.mode == "fixed" and self.steps < 1:
            raise ValueError("fixed mode needs at least one step")
        if self.mode == "tolerance" and not self.tol > 0:
            raise ValueError("tolerance must be positive")

    def with_tol(self, tol):
        return StopRule(self.mode, self.steps, tol, self.step_size, self.max_steps)


def local_objective(p: LocalProblem, w):
    """Value and gradient of ``L(w) + lam/2 ||w - anchor||^2``."""
    w = np.asarray(w, dtype=np.float64)
    value, grad = p.loss.value_and_grad(w)
    diff = w - p.anchor
    return value + 0.5 * p.lam * float(diff @ diff), grad + p.lam * diff


def solve_inexact(p: LocalProblem, stop: StopRule, init=None, context=""):
    """Plain gradient descent on ``G``; returns ``(w, ||grad G(w)||^2)``."""
    w = np.array(p.anchor if init is None else init, dtype=np.float64)
    step = p.default_step() if stop.step_size is None else stop.step_size
    if stop.mode == "fixed":
        for _ in range(stop.steps):
            _, g = local_objective(p, w)
            w -= step * g
        _, g = local_objective(p, w)
        return w, float(g @ g)
    best = np.inf
    for k in range(stop.max_steps + 1):
        _, g = local_objective(p, w)
        r = float(g @ g)
        best = min(best, r)
        if r <= stop.tol:
            return w, r
        if k < stop.max_steps:
            w -= step * g
    raise SolverStall(best, stop.max_steps, context)


def solve_exact_quadratic(p: LocalProblem) -> np.ndarray:
    """``(A + lam I)^{-1} (b + lam anchor)``, the stationary point of a quadratic ``G``."""
    if not p.is_quadratic:
        raise TypeError("closed-form solve needs a quadratic loss")
    A, b = p.loss.A, p.loss.b
    M = A + p.lam * np.eye(b.size)
    try:
        return np.linalg.solve(M, b + p.lam * p.anchor)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"A + lam*I is singular: {exc}") from exc
