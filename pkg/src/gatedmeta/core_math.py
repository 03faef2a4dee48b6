"""Proximal operators, gradient mapping and step-size schedules.

Parameter vectors are plain 1-D ``float64`` NumPy arrays. Every function here
is pure: inputs are never modified and results are fresh arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

__all__ = [
    "GroupLayout",
    "Penalty",
    "ZeroPenalty",
    "L1Penalty",
    "GroupLassoPenalty",
    "Schedule",
    "ScheduleError",
    "ConditionReport",
    "as_param_vector",
    "prox_l1",
    "prox_group_lasso",
    "group_lasso_value",
    "gradient_mapping",
    "schedule_values",
    "check_theorem1_conditions",
]


class ScheduleError(ValueError):
    """Raised when a schedule violates the preconditions of its rule."""


def as_param_vector(values) -> np.ndarray:
    """Return ``values`` as a finite, contiguous 1-D float64 array (copied)."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains NaN or Inf")
    return v


@dataclass(frozen=True)
class GroupLayout:
    """Disjoint index ranges of a parameter vector, each with a weight.

    Indices outside every group are unpenalized.

    Parameters
    ----------
    groups : sequence of (start, stop)
        Half-open index ranges.
    weights : sequence of float, optional
        Per-group weights. Defaults to ``sqrt(group size)``.
    """

    groups: tuple
    weights: tuple = field(default=None)

    def __post_init__(self):
        groups = tuple((int(a), int(b)) for a, b in self.groups)
        for a, b in groups:
            if a < 0 or b <= a:
                raise ValueError(f"invalid group range [{a}, {b})")
        ordered = sorted(groups)
        for (a0, b0), (a1, b1) in zip(ordered, ordered[1:]):
            if a1 < b0:
                raise ValueError(f"groups [{a0}, {b0}) and [{a1}, {b1}) overlap")
        if self.weights is None:
            weights = tuple(math.sqrt(b - a) for a, b in groups)
        else:
            weights = tuple(float(w) for w in self.weights)
            if len(weights) != len(groups):
                raise ValueError("one weight per group is required")
            if any(w < 0 for w in weights):
                raise ValueError("group weights must be nonnegative")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def contiguous(cls, sizes: Sequence[int], offset: int = 0, weights=None) -> "GroupLayout":
        """Back-to-back groups of the given sizes starting at ``offset``."""
        groups = []
        start = offset
        for s in sizes:
            groups.append((start, start + int(s)))
            start += int(s)
        return cls(tuple(groups), weights)

    @property
    def end(self) -> int:
        return max((b for _, b in self.groups), default=0)

    def check(self, n: int) -> None:
        if self.end > n:
            raise ValueError(f"group layout reaches index {self.end} but vector length is {n}")

    def arrays(self):
        """Group ranges and weights as int64/float64 arrays (for the kernels)."""
        g = np.asarray(self.groups, dtype=np.int64).reshape(-1, 2)
        return g[:, 0].copy(), g[:, 1].copy(), np.asarray(self.weights, dtype=np.float64)


def prox_l1(v, threshold: float) -> np.ndarray:
    """Soft-thresholding, the proximal map of ``threshold * ||x||_1``.

    Entries with ``|v_i| <= threshold`` map to exactly zero.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    out = np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)
    # signed zeros from sign(-x) * 0 are normalised so outputs compare bitwise
    out[out == 0.0] = 0.0
    return out


def prox_group_lasso(v, layout: GroupLayout, scale: float) -> np.ndarray:
    """Block soft-thresholding for ``scale * sum_g w_g ||x_g||_2``.

    Each group is shrunk by ``max(0, 1 - scale * w_g / ||v_g||)``; indices not
    covered by the layout pass through unchanged.
    """
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    v = np.array(v, dtype=np.float64)
    layout.check(v.size)
    starts, stops, weights = layout.arrays()
    kernels.group_shrink(v, starts, stops, weights, float(scale))
    return v


def group_lasso_value(v, layout: GroupLayout) -> float:
    """``sum_g w_g ||v_g||_2``."""
    v = np.asarray(v, dtype=np.float64)
    layout.check(v.size)
    return float(sum(w * np.linalg.norm(v[a:b]) for (a, b), w in zip(layout.groups, layout.weights)))


class Penalty:
    """A convex, possibly non-smooth regularizer with a closed-form prox."""

    def value(self, w: np.ndarray) -> float:
        raise NotImplementedError

    def prox(self, v: np.ndarray, c: float) -> np.ndarray:
        """``argmin_x  H(x) + ||x - v||^2 / (2c)``."""
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False


class ZeroPenalty(Penalty):
    def value(self, w):
        return 0.0

    def prox(self, v, c):
        return np.array(v, dtype=np.float64)

    @property
    def is_zero(self):
        return True

    def __repr__(self):
        return "ZeroPenalty()"


@dataclass(frozen=True)
class L1Penalty(Penalty):
    """``strength * ||x[start:stop]||_1``; the rest of the vector is free."""

    strength: float
    start: int = 0
    stop: Optional[int] = None

    def value(self, w):
        return float(self.strength * np.abs(np.asarray(w)[self.start:self.stop]).sum())

    def prox(self, v, c):
        out = np.array(v, dtype=np.float64)
        out[self.start:self.stop] = prox_l1(out[self.start:self.stop], c * self.strength)
        return out

    @property
    def is_zero(self):
        return self.strength == 0.0


@dataclass(frozen=True)
class GroupLassoPenalty(Penalty):
    """``strength * sum_g w_g ||x_g||_2`` over a :class:`GroupLayout`."""

    layout: GroupLayout
    strength: float

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("strength must be nonnegative")

    def value(self, w):
        return self.strength * group_lasso_value(w, self.layout)

    def prox(self, v, c):
        return prox_group_lasso(v, self.layout, c * self.strength)

    @property
    def is_zero(self):
        return self.strength == 0.0


def gradient_mapping(w, g, c: float, penalty: Optional[Penalty] = None) -> np.ndarray:
    """``(w - prox_{cH}(w - c g)) / c``.

    With no penalty the mapping is ``g`` itself, returned as an exact copy.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    g = np.asarray(g, dtype=np.float64)
    if penalty is None or penalty.is_zero:
        return g.copy()
    w = np.asarray(w, dtype=np.float64)
    return (w - penalty.prox(w - c * g, c)) / c


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    """Per-round step sizes for the accelerated meta update.

    ``alpha_t = 2/(t+1)`` and ``Gamma_t = 2/(t(t+1))`` in every rule.

    ``rule="paper-experiment"`` uses ``beta_t = 1`` and ``eta_t = 1/alpha_t``.
    ``rule="theorem1"`` uses a constant ``beta`` (default ``0.9/L`` capped at 1,
    with ``L = lam*rho/(lam+rho)``) and ``eta_t = beta/alpha_t``; it requires
    ``lam > rho``.

    ``beta_fn``/``eta_fn`` override the rule's sequences (callables of ``t``).
    """

    rule: str = "paper-experiment"
    lam: float = 0.2
    T: int = 800
    rho: Optional[float] = None
    beta: Optional[float] = None
    beta_fn: Optional[Callable[[int], float]] = None
    eta_fn: Optional[Callable[[int], float]] = None

    def __post_init__(self):
        if self.rule not in ("paper-experiment", "theorem1"):
            raise ScheduleError(f"unknown schedule rule {self.rule!r}")
        if self.T < 1:
            raise ScheduleError("T must be at least 1")
        if self.rule == "theorem1":
            if self.rho is None or not self.rho > 0:
                raise ScheduleError("theorem1 rule needs a positive rho")
            if not self.lam > self.rho:
                raise ScheduleError(
                    f"theorem1 rule requires lam > rho (got lam={self.lam}, rho={self.rho})"
                )

    @property
    def smoothness(self) -> Optional[float]:
        if self.rho is None:
            return None
        return self.lam * self.rho / (self.lam + self.rho)

    def _beta(self, t: int) -> float:
        if self.beta_fn is not None:
            return float(self.beta_fn(t))
        if self.rule == "paper-experiment":
            return 1.0 if self.beta is None else float(self.beta)
        if self.beta is not None:
            return float(self.beta)
        return min(1.0, 0.9 / self.smoothness)

    def values(self, t: int):
        """``(alpha, beta, eta, Gamma)`` for round ``t`` (1-based)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"round {t} outside [1, {self.T}]")
        alpha = 2.0 / (t + 1)
        gamma = 2.0 / (t * (t + 1))
        beta = self._beta(t)
        if self.eta_fn is not None:
            eta = float(self.eta_fn(t))
        else:
            eta = beta / alpha
        if self.rule == "theorem1":
            bound = (self.lam + self.rho) / (self.lam * self.rho)
            if not beta < bound:
                raise ScheduleError(f"beta_t={beta} at t={t} violates beta < {bound}")
        return alpha, beta, eta, gamma


def schedule_values(s: Schedule, t: int):
    """``(alpha_t, beta_t, eta_t, Gamma_t)``; see :meth:`Schedule.values`."""
    return s.values(t)


def gamma_recurrence(T: int) -> np.ndarray:
    """``Gamma_1..Gamma_T`` by the product recurrence (index 0 is ``Gamma_1``)."""
    out = np.empty(T, dtype=np.float64)
    g = 1.0
    out[0] = g
    for t in range(2, T + 1):
        g = (1.0 - 2.0 / (t + 1)) * g
        out[t - 1] = g
    return out


@dataclass
class ConditionReport:
    satisfied: bool
    first_violation: Optional[int] = None
    condition: Optional[str] = None
    bound: Optional[float] = None

    def __str__(self):
        if self.satisfied:
            return "all satisfied"
        return f"violated at t={self.first_violation}: {self.condition}"


def check_theorem1_conditions(s: Schedule, rho: float) -> ConditionReport:
    """Check the step-size conditions of the accelerated convergence result.

    For every ``t <= T``: ``alpha_t eta_t <= beta_t``, ``beta_t < (lam+rho)/(lam rho)``
    and ``(alpha_t/Gamma_t)(1/eta_t - 1)`` nonincreasing in ``t``. The
    monotonicity test at ``t = T`` looks one round past the horizon.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if s.rule == "theorem1" and not s.lam > rho:
        raise ScheduleError(f"requires lam > rho (got lam={s.lam}, rho={rho})")
    bound = (s.lam + rho) / (s.lam * rho)

    # no horizon clamp here: the monotonicity test needs t = T + 1
    def raw(t):
        alpha = 2.0 / (t + 1)
        gamma = 2.0 / (t * (t + 1))
        beta = s._beta(t)
        eta = float(s.eta_fn(t)) if s.eta_fn is not None else beta / alpha
        return alpha, beta, eta, gamma

    tol = 1e-12
    for t in range(1, s.T + 1):
        a, b, e, g = raw(t)
        if a * e > b * (1 + tol):
            return ConditionReport(False, t, "alpha_t*eta_t <= beta_t", bound)
        if not b < bound:
            return ConditionReport(False, t, "beta_t < (lam+rho)/(lam*rho)", bound)
        a1, _, e1, g1 = raw(t + 1)
        lhs = (a / g) * (1.0 / e - 1.0)
        rhs = (a1 / g1) * (1.0 / e1 - 1.0)
        if lhs < rhs - tol * max(1.0, abs(lhs), abs(rhs)):
            return ConditionReport(False, t, "(alpha_t/Gamma_t)(1/eta_t - 1) nonincreasing", bound)
    return ConditionReport(True, None, None, bound)
