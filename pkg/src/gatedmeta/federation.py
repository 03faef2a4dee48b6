"""Outer federated loop: accelerated proximal meta updates and the FedAvg baseline.

One round of the meta method:

1. extrapolate ``w_pr = alpha w_prev + (1 - alpha) w_ag_prev``
2. broadcast ``w_pr`` to the sampled nodes
3. each node approximately minimizes ``L_i(v) + lam/2 ||v - w_pr||^2``
4. aggregate ``grad = lam/m * sum_i (w_pr - v_i)``
5. ``w = prox_{eta H}(w_prev - eta grad)``, ``w_ag = prox_{beta H}(w_pr - beta grad)``

The penalty ``H`` touches gate parameters only, so backbone coordinates take
plain gradient steps. The meta model returned is ``w_pr`` of the last round.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core_math import Penalty, Schedule, ZeroPenalty, gradient_mapping
from .local_solver import (
    LocalProblem,
    NetworkLoss,
    StopRule,
    local_objective,
    solve_exact_quadratic,
    solve_inexact,
)
from .nets import GatedBackbone
from .tasks import NodeTask

__all__ = [
    "MetaState",
    "FederationConfig",
    "RoundReport",
    "extrapolate",
    "aggregate",
    "global_update",
    "exact_meta_gradient",
    "run_metagater",
    "run_fedavg",
    "sample_nodes",
    "node_rng",
]


@dataclass
class MetaState:
    """Iterates entering round ``t`` (1-based)."""

    w_prev: np.ndarray
    w_ag_prev: np.ndarray
    t: int
    schedule: Schedule
    penalty: Penalty = field(default_factory=ZeroPenalty)

    @classmethod
    def initial(cls, w0, schedule, penalty=None):
        w0 = np.array(w0, dtype=np.float64)
        return cls(w0, w0.copy(), 1, schedule, penalty or ZeroPenalty())


@dataclass
class RoundReport:
    t: int
    grad_norm: float
    q_norm: float
    h_value: float
    max_residual: float
    elapsed_ms: float
    residuals: List[float] = field(default_factory=list)
    nodes: List[int] = field(default_factory=list)
    bytes_sent: int = 0
    q_source: str = "surrogate"
    extra: dict = field(default_factory=dict)

    CSV_COLUMNS = ("t", "grad_norm", "q_norm", "h_value", "max_residual", "elapsed_ms")

    def row(self):
        out = {k: getattr(self, k) for k in self.CSV_COLUMNS}
        out.update(self.extra)
        return out

    def record(self):
        out = self.row()
        out.update(residuals=self.residuals, nodes=self.nodes, bytes_sent=self.bytes_sent, q_source=self.q_source)
        return out


@dataclass
class FederationConfig:
    """Everything one federated run needs.

    ``nodes`` carry either a quadratic loss or train data for ``net``.
    ``tol_fn(t)`` overrides ``stop.tol`` per round in tolerance mode.
    ``exact_local`` solves quadratic nodes in closed form.
    """

    nodes: Sequence[NodeTask]
    T: int
    m: Optional[int] = None
    seed: int = 0
    lam: float = 0.2
    stop: StopRule = field(default_factory=StopRule)
    tol_fn: Optional[Callable[[int], float]] = None
    schedule: Optional[Schedule] = None
    penalty: Penalty = field(default_factory=ZeroPenalty)
    w0: Optional[np.ndarray] = None
    net: Optional[GatedBackbone] = None
    gating: bool = True
    workers: int = 1
    exact_local: bool = False
    warm_start: bool = False
    oracle: bool = True
    fedavg_lr: float = 0.05
    callback: Optional[Callable[[int, np.ndarray], None]] = None

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("federation needs at least one node")
        if self.m is None:
            self.m = len(self.nodes)
        if not 1 <= self.m <= len(self.nodes):
            raise ValueError(f"sample size m={self.m} outside [1, {len(self.nodes)}]")
        if self.schedule is None:
            self.schedule = Schedule(lam=self.lam, T=self.T)
        if self.schedule.T < self.T:
            raise ValueError("schedule horizon shorter than T")

    def initial_params(self):
        if self.w0 is not None:
            return np.array(self.w0, dtype=np.float64)
        if self.net is not None:
            return self.net.params.copy()
        return np.zeros(self.nodes[0].quadratic.dim)


# --------------------------------------------------------------------------
# single-round pieces


def extrapolate(state: MetaState) -> np.ndarray:
    alpha = state.schedule.values(state.t)[0]
    return alpha * state.w_prev + (1.0 - alpha) * state.w_ag_prev


def aggregate(w_pr, local_solutions: Sequence[np.ndarray], lam: float) -> np.ndarray:
    """``lam/m * sum_i (w_pr - v_i)``, summed in the given (ascending node) order."""
    if len(local_solutions) == 0:
        raise ValueError("no local solutions to aggregate")
    total = np.zeros_like(np.asarray(w_pr, dtype=np.float64))
    for v in local_solutions:
        total += w_pr - v
    return (lam / len(local_solutions)) * total


def global_update(state: MetaState, grad, w_pr=None) -> MetaState:
    """Both proximal steps; returns the state entering round ``t + 1``."""
    _, beta, eta, _ = state.schedule.values(state.t)
    if w_pr is None:
        w_pr = extrapolate(state)
    H = state.penalty
    w = H.prox(state.w_prev - eta * grad, eta)
    w_ag = H.prox(w_pr - beta * grad, beta)
    return replace(state, w_prev=w, w_ag_prev=w_ag, t=state.t + 1)


def exact_meta_gradient(w, tasks, lam) -> np.ndarray:
    """Gradient of the averaged Moreau-type envelope for quadratic nodes.

    ``lam/n * sum_i (w - (A_i + lam I)^{-1}(b_i + lam w))``.
    """
    sols = [solve_exact_quadratic(LocalProblem(t, lam, w)) for t in tasks]
    return aggregate(w, sols, lam)


def sample_nodes(n_nodes: int, m: int, seed: int, t: int) -> List[int]:
    """Node positions sampled for round ``t``, ascending."""
    if m == n_nodes:
        return list(range(n_nodes))
    rng = np.random.default_rng([seed, t, 0])
    return sorted(int(i) for i in rng.choice(n_nodes, size=m, replace=False))


def node_rng(seed: int, node_id: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, node_id, t, 1])


def _fan_out(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _node_loss(cfg: FederationConfig, node: NodeTask, t: int):
    if node.quadratic is not None:
        return node.quadratic
    if cfg.net is None:
        raise ValueError(f"node {node.id} has network data but the config has no net")
    rng = node_rng(cfg.seed, node.id, t) if cfg.net.gumbel_noise else None
    return NetworkLoss(cfg.net, node.train, gating=cfg.gating, rng=rng)


# --------------------------------------------------------------------------
# full runs


def run_metagater(cfg: FederationConfig):
    """Run the accelerated proximal meta method; returns ``(w_pr_T, reports)``."""
    state = MetaState.initial(cfg.initial_params(), cfg.schedule, cfg.penalty)
    n = state.w_prev.size
    warm = {}
    reports = []
    w_pr = state.w_prev
    for t in range(1, cfg.T + 1):
        t0 = time.perf_counter()
        _, beta, _, _ = cfg.schedule.values(t)
        w_pr = extrapolate(state)
        chosen = [cfg.nodes[i] for i in sample_nodes(len(cfg.nodes), cfg.m, cfg.seed, t)]
        stop = cfg.stop if cfg.tol_fn is None else cfg.stop.with_tol(cfg.tol_fn(t))

        def solve(node, w_pr=w_pr, stop=stop, t=t):
            p = LocalProblem(_node_loss(cfg, node, t), cfg.lam, w_pr)
            if cfg.exact_local and p.is_quadratic:
                v = solve_exact_quadratic(p)
                g = local_objective(p, v)[1]
                return v, float(g @ g)
            init = warm.get(node.id) if cfg.warm_start else None
            return solve_inexact(p, stop, init=init, context=f"round {t}, node {node.id}")

        results = _fan_out(solve, chosen, cfg.workers)
        sols = [v for v, _ in results]
        residuals = [r for _, r in results]
        if cfg.warm_start:
            warm.update({node.id: v for node, v in zip(chosen, sols)})
        grad = aggregate(w_pr, sols, cfg.lam)

        extra = {}
        q_source = "surrogate"
        g_for_q = grad
        if cfg.oracle and all(node.quadratic is not None for node in chosen):
            exact = exact_meta_gradient(w_pr, [node.quadratic for node in chosen], cfg.lam)
            g_for_q = exact
            q_source = "exact"
            delta = grad - exact
            extra["delta_sq"] = float(delta @ delta)
            extra["xi"] = float(max(residuals))
        q = gradient_mapping(w_pr, g_for_q, beta, cfg.penalty)
        state = global_update(state, grad, w_pr)
        if cfg.callback is not None:
            cfg.callback(t, w_pr)
        reports.append(
            RoundReport(
                t=t,
                grad_norm=float(np.linalg.norm(grad)),
                q_norm=float(np.linalg.norm(q)),
                h_value=float(cfg.penalty.value(w_pr)),
                max_residual=float(max(residuals)),
                elapsed_ms=(time.perf_counter() - t0) * 1e3,
                residuals=residuals,
                nodes=[node.id for node in chosen],
                bytes_sent=2 * len(chosen) * n * 8,
                q_source=q_source,
                extra=extra,
            )
        )
    return w_pr, reports


def run_fedavg(cfg: FederationConfig):
    """FedAvg: ``stop.steps`` local GD steps on the raw loss, size-weighted average."""
    w = cfg.initial_params()
    steps = cfg.stop.steps
    lr = cfg.fedavg_lr
    reports = []
    for t in range(1, cfg.T + 1):
        t0 = time.perf_counter()
        chosen = [cfg.nodes[i] for i in sample_nodes(len(cfg.nodes), cfg.m, cfg.seed, t)]

        def local(node, w=w, t=t):
            loss = _node_loss(cfg, node, t)
            v = w.copy()
            for _ in range(steps):
                v -= lr * loss.value_and_grad(v)[1]
            g = loss.value_and_grad(v)[1]
            return v, float(g @ g)

        results = _fan_out(local, chosen, cfg.workers)
        sizes = np.array([node.n_train if node.quadratic is None else 1 for node in chosen], dtype=np.float64)
        new = np.zeros_like(w)
        for (v, _), s in zip(results, sizes):
            new += (s / sizes.sum()) * v
        direction = w - new
        w = new
        if cfg.callback is not None:
            cfg.callback(t, w)
        residuals = [r for _, r in results]
        reports.append(
            RoundReport(
                t=t,
                grad_norm=float(np.linalg.norm(direction)),
                q_norm=float(np.linalg.norm(direction)),
                h_value=0.0,
                max_residual=float(max(residuals)),
                elapsed_ms=(time.perf_counter() - t0) * 1e3,
                residuals=residuals,
                nodes=[node.id for node in chosen],
                bytes_sent=2 * len(chosen) * w.size * 8,
                q_source="fedavg-step",
            )
        )
    return w, reports
