"""Fast adaptation of a meta model at a target node, plus the pruning baselines."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .nets import Batch, GatedBackbone, forward, loss_and_grad

__all__ = [
    "AdaptationResult",
    "StageOrderError",
    "FastAdapter",
    "stage1_adapt_gate",
    "stage2_finetune_subnet",
    "active_channels",
    "one_step_finetune",
    "snip_prune",
    "metasnip_adapt",
    "evaluate",
    "adapt_and_evaluate",
]

ADAPT_STEP = 0.05


class StageOrderError(RuntimeError):
    pass


@dataclass
class AdaptationResult:
    model: GatedBackbone
    accuracy: float
    sparsity: float
    elapsed_ms: float
    dead_gate_rate: float = 0.0
    method: str = ""
    task_id: int = -1

    COLUMNS = ("task_id", "method", "accuracy", "sparsity", "adapt_ms", "dead_gate_rate")

    def row(self):
        return {
            "task_id": self.task_id,
            "method": self.method,
            "accuracy": self.accuracy,
            "sparsity": self.sparsity,
            "adapt_ms": self.elapsed_ms,
            "dead_gate_rate": self.dead_gate_rate,
        }


def stage1_adapt_gate(net: GatedBackbone, data: Batch, lam: float, step: float = ADAPT_STEP) -> np.ndarray:
    """One gradient step on the gate parameters with the backbone frozen.

    The proximity term ``lam/2 ||phi' - phi||^2`` has zero gradient at the
    starting point, so only the loss gradient moves the gates. ``lam`` is kept
    in the signature for that reason.
    """
    phi = net.params[net.phi_range]
    if step == 0 or net.n_phi == 0:
        return phi.copy()
    _, _, g_phi = loss_and_grad(net, data, gating=True)
    return phi - step * (g_phi + lam * (phi - phi))


def active_channels(net: GatedBackbone, data: Batch):
    """Per gated layer, a boolean vector: mean gate output over ``data`` > 0."""
    _, masks, _ = forward(net, data.inputs, gating=True)
    return {i: m.mean(axis=0) > 0 for i, m in masks.items()}


def _subnet_mask(net: GatedBackbone, active) -> np.ndarray:
    keep = np.ones(net.n_theta)
    for layer, on in active.items():
        for k in np.flatnonzero(~on):
            keep[net.channel_feed_indices(layer, k)] = 0.0
            keep[net.channel_read_indices(layer, k)] = 0.0
    return keep


def stage2_finetune_subnet(net: GatedBackbone, data: Batch, lam: float, step: float = ADAPT_STEP):
    """One gradient step on the backbone parameters of the active subnet.

    ``net`` carries the adapted gates from stage I. Returns ``(theta, active,
    dead)`` where ``dead`` flags a gated layer with no active channel.
    """
    theta = net.params[net.theta_range]
    active = active_channels(net, data) if net.gated_layers else {}
    dead = any(not on.any() for on in active.values())
    if step == 0:
        return theta.copy(), active, dead
    _, g_theta, _ = loss_and_grad(net, data, gating=True)
    g_theta = g_theta * _subnet_mask(net, active)
    return theta - step * (g_theta + lam * (theta - theta)), active, dead


class FastAdapter:
    """Run the two adaptation stages in order on a private copy of the meta model.

    >>> adapter = FastAdapter(meta_net, data, lam=0.2)   # doctest: +SKIP
    >>> adapter.stage1(); adapter.stage2()               # doctest: +SKIP
    """

    def __init__(self, meta: GatedBackbone, data: Batch, lam: float = 0.2,
                 gate_step: float = ADAPT_STEP, backbone_step: float = ADAPT_STEP):
        self.net = meta.clone()
        self.data = data
        self.lam = lam
        self.gate_step = gate_step
        self.backbone_step = backbone_step
        self.updates = {"stage1": 0, "stage2": 0}
        self.dead_gate = False
        self.active = {}

    def stage1(self):
        if self.updates["stage1"]:
            raise StageOrderError("stage I already applied")
        self.net.params[self.net.phi_range] = stage1_adapt_gate(self.net, self.data, self.lam, self.gate_step)
        self.updates["stage1"] += 1
        return self

    def stage2(self):
        if not self.updates["stage1"]:
            raise StageOrderError("stage II requires the stage I gate update first")
        if self.updates["stage2"]:
            raise StageOrderError("stage II already applied")
        theta, self.active, self.dead_gate = stage2_finetune_subnet(
            self.net, self.data, self.lam, self.backbone_step
        )
        self.net.params[self.net.theta_range] = theta
        self.updates["stage2"] += 1
        return self

    def run(self) -> GatedBackbone:
        return self.stage1().stage2().net


def one_step_finetune(net: GatedBackbone, data: Batch, step: float = ADAPT_STEP, gating=False) -> GatedBackbone:
    """Single full-backbone gradient step (ungated meta models, FedAvg output)."""
    out = net.clone()
    if step:
        _, g_theta, _ = loss_and_grad(out, data, gating=gating)
        out.params[out.theta_range] -= step * g_theta
    return out


def snip_prune(net: GatedBackbone, data: Batch, keep_ratio: float, pool=None) -> np.ndarray:
    """Connection-sensitivity pruning mask over the backbone parameters.

    Saliency is ``|g_j * w_j|`` with ``g`` the loss gradient on ``data``. The
    top ``ceil(keep_ratio * |pool|)`` entries of ``pool`` (default: every
    weight tensor, biases excluded) survive; ties go to the lower index.
    Entries outside the pool are always kept.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must be in (0, 1]")
    pool = net.theta_weight_indices() if pool is None else np.asarray(pool, dtype=np.int64)
    mask = np.ones(net.n_theta)
    n_keep = math.ceil(keep_ratio * pool.size - 1e-9)
    if n_keep >= pool.size:
        return mask
    _, g_theta, _ = loss_and_grad(net, data, gating=False)
    theta = net.params[net.theta_range]
    sal = np.abs(g_theta[pool] * theta[pool])
    order = np.lexsort((pool, -sal))
    mask[pool[order[n_keep:]]] = 0.0
    return mask


def evaluate(net: GatedBackbone, test: Batch, gating=True, adapt_ms: float = 0.0,
             method: str = "", task_id: int = -1) -> AdaptationResult:
    """Accuracy and channel sparsity on ``test``; timing adds one full inference."""
    t0 = time.perf_counter()
    gating = gating and bool(net.gated_layers)
    logits, masks, _ = forward(net, test.inputs, gating=gating)
    elapsed = adapt_ms + (time.perf_counter() - t0) * 1e3
    acc = float(np.mean(logits.argmax(axis=1) == test.labels))
    if masks:
        sparsity = float(np.mean([1.0 - m.mean(axis=1) for m in masks.values()]))
        dead = float(np.mean([np.all(m == 0, axis=1).mean() for m in masks.values()]))
    else:
        sparsity, dead = 0.0, 0.0
    return AdaptationResult(net, acc, sparsity, elapsed, dead, method, task_id)


def adapt_and_evaluate(meta: GatedBackbone, train: Batch, test: Batch, lam=0.2,
                       gate_step=ADAPT_STEP, backbone_step=ADAPT_STEP, gating=True,
                       method="metagater", task_id=-1) -> AdaptationResult:
    """Two-stage adaptation for gated models, one full step for ungated ones."""
    t0 = time.perf_counter()
    if gating and meta.gated_layers:
        adapter = FastAdapter(meta, train, lam, gate_step, backbone_step)
        net = adapter.run()
        dead = adapter.dead_gate
    else:
        net = one_step_finetune(meta, train, backbone_step, gating=False)
        dead = False
    res = evaluate(net, test, gating=gating, adapt_ms=(time.perf_counter() - t0) * 1e3,
                   method=method, task_id=task_id)
    if dead:
        res.dead_gate_rate = max(res.dead_gate_rate, 1e-12)
    return res


def metasnip_adapt(meta: GatedBackbone, train: Batch, test: Batch, keep_ratio: float,
                   step: float = ADAPT_STEP, pool=None, task_id: int = -1) -> AdaptationResult:
    """SNIP on the ungated meta backbone, then one masked gradient step."""
    t0 = time.perf_counter()
    net = meta.clone()
    pool = net.theta_weight_indices() if pool is None else np.asarray(pool, dtype=np.int64)
    mask = snip_prune(net, train, keep_ratio, pool)
    theta = net.params[net.theta_range] * mask
    net.params[net.theta_range] = theta
    if step:
        _, g_theta, _ = loss_and_grad(net, train, gating=False)
        net.params[net.theta_range] = theta - step * g_theta * mask
    res = evaluate(net, test, gating=False, adapt_ms=(time.perf_counter() - t0) * 1e3,
                   method="metasnip", task_id=task_id)
    res.sparsity = float(1.0 - mask[pool].mean())
    return res
