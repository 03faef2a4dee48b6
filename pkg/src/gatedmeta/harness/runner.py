"""Experiment dispatch: build data, model and federation from a config, run, emit files."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .. import nets, tasks
from ..adaptation import AdaptationResult, adapt_and_evaluate, evaluate, metasnip_adapt
from ..core_math import GroupLassoPenalty, GroupLayout, L1Penalty, ZeroPenalty
from ..federation import FederationConfig, RoundReport, exact_meta_gradient, run_fedavg, run_metagater
from ..local_solver import StopRule
from .config import ExperimentConfig
from .metrics import MetricsSink, maybe_mean, sample_std, to_jsonable

__all__ = ["RunResult", "run", "repeat_and_summarize", "summarize_runs", "resolve_out_dir", "OUT_ENV"]

OUT_ENV = "GATEDMETA_OUT"
SUMMARY_KEYS = ("method", "mean_accuracy", "std_accuracy", "mean_sparsity", "total_train_ms")
TIMING_COLUMNS = ("elapsed_ms", "adapt_ms")


@dataclass
class RunResult:
    out_dir: Path
    summary: dict
    adaptation: List[AdaptationResult] = field(default_factory=list)
    rounds: List[RoundReport] = field(default_factory=list)
    model: Optional[nets.GatedBackbone] = None


def resolve_out_dir(cfg: ExperimentConfig, out=None) -> Path:
    """``--out`` beats the environment override, which beats the config's ``out``."""
    if out:
        return Path(out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV]) / f"{cfg.kind}-seed{cfg.seed}"
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / f"{cfg.kind}-seed{cfg.seed}"


# --------------------------------------------------------------------------
# builders


def build_net(cfg: ExperimentConfig, gated: Optional[bool] = None) -> nets.GatedBackbone:
    a = cfg.arch
    gated = a["gated"] if gated is None else gated
    kw = dict(
        gate_hidden=a["gate_hidden"],
        grad_mode=a["grad_mode"],
        temperature=a["temperature"],
        gumbel_noise=a["gumbel_noise"],
        gate_bias_init=a["gate_bias_init"],
        seed=cfg.seed,
    )
    if a["type"] == "mlp":
        return nets.mlp(a["n_in"], a["hidden"], a["n_classes"], gated=gated, **kw)
    return nets.small_cnn(a["c_in"], a["n_classes"], a["c1"], a["c2"], gated=gated, **kw)


def load_images(cfg: ExperimentConfig):
    d = cfg.data
    if d["source"] == "mnist-idx":
        images, labels = tasks.load_idx(d["images"], d["labels"])
        images = tasks.downsample(images, d["downsample"])
        if cfg.arch["type"] == "mlp":
            images = images.reshape(len(images), -1)
        else:
            images = images[:, None]
    else:
        images, labels = tasks.synthetic_images(
            n_classes=d["n_classes"],
            n_per_class=d["n_per_class"],
            channels=d["channels"],
            size=d["size"],
            noise=d["image_noise"],
            seed=cfg.seed,
        )
        if d["downsample"] > 1:
            images = tasks.downsample(images, d["downsample"])
        if cfg.arch["type"] == "mlp":
            images = images.reshape(len(images), -1)
    return images, labels


def build_nodes(cfg: ExperimentConfig):
    """``(train_nodes, target_nodes)`` from one non-IID split."""
    d = cfg.data
    images, labels = load_images(cfg)
    n = d["n_train_nodes"] + d["n_target_nodes"]
    nodes = tasks.non_iid_split(
        images,
        labels,
        n,
        classes_per_node=d["classes_per_node"],
        size_range=tuple(d["size_range"]) if d["size_range"] else None,
        seed=cfg.seed,
        train_fraction=d["train_fraction"],
    )
    return nodes[: d["n_train_nodes"]], nodes[d["n_train_nodes"]:]


def build_penalty(cfg: ExperimentConfig, net: Optional[nets.GatedBackbone] = None, dim: Optional[int] = None):
    p = cfg.penalty
    if p["kind"] == "none" or p["strength"] == 0:
        return ZeroPenalty()
    if net is not None:
        start = net.n_theta if p["start"] is None else p["start"]
        stop = net.n_params if p["stop"] is None else p["stop"]
    else:
        start = 0 if p["start"] is None else p["start"]
        stop = dim if p["stop"] is None else p["stop"]
    if p["kind"] == "l1":
        return L1Penalty(p["strength"], start, stop)
    if net is not None and p["start"] is None and p["stop"] is None:
        if not net.gated_layers:
            return ZeroPenalty()
        layout = net.gate_group_layout()
    else:
        gs = p["group_size"]
        sizes = [gs] * ((stop - start) // gs) + ([(stop - start) % gs] if (stop - start) % gs else [])
        layout = GroupLayout.contiguous(sizes, offset=start)
    return GroupLassoPenalty(layout, p["strength"])


def _workers(cfg: ExperimentConfig, workers=None) -> int:
    if workers is not None:
        return int(workers)
    if cfg.federation["workers"] is not None:
        return int(cfg.federation["workers"])
    return os.cpu_count() or 1


def _stop_rule(cfg: ExperimentConfig) -> StopRule:
    f = cfg.federation
    return StopRule(
        mode=f["local_mode"],
        steps=f["local_steps"],
        tol=f["tol0"],
        step_size=f["local_lr"],
    )


def _tol_fn(cfg: ExperimentConfig):
    if cfg.federation["local_mode"] != "tolerance":
        return None
    tol0 = float(cfg.federation["tol0"])
    return lambda t: tol0 / (t * t)


def build_federation(cfg: ExperimentConfig, nodes, net=None, workers=None, penalty=None) -> FederationConfig:
    f = cfg.federation
    return FederationConfig(
        nodes=nodes,
        T=f["T"],
        m=min(f["m"], len(nodes)) if f["m"] else None,
        seed=cfg.seed,
        lam=float(cfg.schedule["lam"]),
        stop=_stop_rule(cfg),
        tol_fn=_tol_fn(cfg),
        schedule=cfg.build_schedule(),
        penalty=penalty if penalty is not None else ZeroPenalty(),
        net=net,
        gating=bool(net is not None and net.gated_layers),
        workers=_workers(cfg, workers),
        exact_local=f["exact_local"],
        warm_start=f["warm_start"],
        fedavg_lr=f["local_lr"],
    )


# --------------------------------------------------------------------------
# experiment kinds


def _summary(method, results: List[AdaptationResult], reports: List[RoundReport], **extra):
    acc = [r.accuracy for r in results]
    sp = [r.sparsity for r in results]
    out = {
        "method": method,
        "mean_accuracy": maybe_mean(acc),
        "std_accuracy": sample_std(acc) if acc else None,
        "mean_sparsity": maybe_mean(sp),
        "std_sparsity": sample_std(sp) if sp else None,
        "mean_dead_gate_rate": maybe_mean([r.dead_gate_rate for r in results]),
        "total_train_ms": float(sum(r.elapsed_ms for r in reports)),
        "n_targets": len(results),
    }
    out.update(extra)
    return out


def _write_rounds(out_dir, reports, stem="rounds"):
    extra = sorted({k for r in reports for k in r.extra})
    with MetricsSink(out_dir, stem, list(RoundReport.CSV_COLUMNS) + extra) as sink:
        for r in reports:
            sink.write(r.record())


def _write_adaptation(out_dir, results):
    with MetricsSink(out_dir, "adaptation", AdaptationResult.COLUMNS) as sink:
        for r in results:
            sink.write(r.row())


def _train(cfg, train_nodes, net, workers, fedavg=False):
    penalty = build_penalty(cfg, net=net)
    fc = build_federation(cfg, train_nodes, net=net, workers=workers, penalty=penalty)
    runner = run_fedavg if fedavg else run_metagater
    w, reports = runner(fc)
    return net.clone(w), reports


def _run_training(cfg: ExperimentConfig, out_dir: Path, workers) -> RunResult:
    train_nodes, targets = build_nodes(cfg)
    tasks.write_manifest(out_dir / "nodes.json", train_nodes + targets)
    a = cfg.adaptation
    lam = float(cfg.schedule["lam"])
    if cfg.kind == "metasnip":
        meta, reports = _train(cfg, train_nodes, build_net(cfg, gated=False), workers)
        results = [
            metasnip_adapt(meta, node.train, node.test, a["keep_ratio"], step=a["backbone_step"], task_id=node.id)
            for node in targets
        ]
        extra = {"keep_ratio": a["keep_ratio"]}
    else:
        net = build_net(cfg)
        meta, reports = _train(cfg, train_nodes, net, workers, fedavg=cfg.kind == "fedavg")
        gating = bool(meta.gated_layers)
        results = [
            adapt_and_evaluate(
                meta, node.train, node.test, lam=lam, gate_step=a["gate_step"],
                backbone_step=a["backbone_step"], gating=gating, method=cfg.kind, task_id=node.id,
            )
            for node in targets
        ]
        raw = [evaluate(meta, node.test, gating=gating).accuracy for node in targets]
        extra = {"meta_accuracy": maybe_mean(raw), "gated": gating}
    _write_rounds(out_dir, reports)
    _write_adaptation(out_dir, results)
    nets.save_checkpoint(out_dir / "model.mgtr", meta)
    summary = _summary(cfg.kind, results, reports, seed=cfg.seed, **extra)
    return RunResult(out_dir, summary, results, reports, meta)


def _federations(cfg: ExperimentConfig):
    d = cfg.data
    for k in range(cfg.diagnostics["federations"]):
        yield k, tasks.gen_quadratic_federation(
            d["n_train_nodes"], d["dim"], d["rho"], d["heterogeneity"], seed=[cfg.seed, k]
        )


def _require_lam_above_rho(cfg):
    lam, rho = float(cfg.schedule["lam"]), cfg.rho
    if not lam > rho:
        raise ValueError(f"this diagnostic needs lam > rho (lam={lam}, rho={rho})")
    return lam, rho


def _run_lemma3(cfg: ExperimentConfig, out_dir: Path, workers) -> RunResult:
    """Per round: measured ``||grad_t - grad G(w_pr)||^2`` against ``lam^2 xi/(lam-rho)^2``."""
    lam, rho = _require_lam_above_rho(cfg)
    cols = ("federation", "t", "delta_sq", "xi", "bound", "ok", "elapsed_ms")
    violations, rows, all_reports, worst = 0, 0, [], 0.0
    with MetricsSink(out_dir, "lemma3", cols) as sink:
        for k, quads in _federations(cfg):
            nodes = [tasks.NodeTask(i, quadratic=q) for i, q in enumerate(quads)]
            fc = build_federation(cfg, nodes, workers=workers)
            fc.exact_local = False
            _, reports = run_metagater(fc)
            all_reports.extend(reports)
            for r in reports:
                xi = r.extra["xi"]
                bound = lam * lam * xi / (lam - rho) ** 2
                ok = r.extra["delta_sq"] <= bound
                violations += not ok
                worst = max(worst, r.extra["delta_sq"] / bound if bound > 0 else 0.0)
                rows += 1
                sink.write({"federation": k, "t": r.t, "delta_sq": r.extra["delta_sq"], "xi": xi,
                            "bound": bound, "ok": int(ok), "elapsed_ms": r.elapsed_ms})
    summary = _summary(cfg.kind, [], all_reports, seed=cfg.seed, rows=rows, violations=violations,
                       max_ratio_to_bound=worst)
    return RunResult(out_dir, summary, [], all_reports)


def _run_smoothness(cfg: ExperimentConfig, out_dir: Path, workers) -> RunResult:
    """Lipschitz ratios of the averaged envelope gradient over random pairs."""
    lam = float(cfg.schedule["lam"])
    rho = cfg.rho
    bound = lam * rho / (lam + rho)
    n_fed = cfg.diagnostics["federations"]
    per = max(1, cfg.diagnostics["pairs"] // n_fed)
    cols = ("federation", "pair", "ratio", "bound", "ok", "elapsed_ms")
    worst, violations, rows = 0.0, 0, 0
    t_start = time.perf_counter()
    with MetricsSink(out_dir, "smoothness", cols) as sink:
        for k, quads in _federations(cfg):
            rng = np.random.default_rng([cfg.seed, k, 7])
            for j in range(per):
                t0 = time.perf_counter()
                u = rng.normal(size=cfg.data["dim"]) * rng.uniform(0.01, 10.0)
                v = u + rng.normal(size=u.size) * 10.0 ** rng.uniform(-4, 1)
                gu = exact_meta_gradient(u, quads, lam)
                gv = exact_meta_gradient(v, quads, lam)
                ratio = float(np.linalg.norm(gu - gv) / np.linalg.norm(u - v))
                ok = ratio <= bound * (1 + 1e-9)
                violations += not ok
                worst = max(worst, ratio / bound)
                rows += 1
                sink.write({"federation": k, "pair": j, "ratio": ratio, "bound": bound, "ok": int(ok),
                            "elapsed_ms": (time.perf_counter() - t0) * 1e3})
    summary = _summary(cfg.kind, [], [], seed=cfg.seed, rows=rows, violations=violations,
                       max_ratio_to_bound=worst, bound=bound)
    summary["total_train_ms"] = (time.perf_counter() - t_start) * 1e3
    return RunResult(out_dir, summary)


def _run_convergence(cfg: ExperimentConfig, out_dir: Path, workers) -> RunResult:
    """Gradient-mapping norm along the accelerated proximal iterates of one federation."""
    k, quads = next(iter(_federations(cfg)))
    nodes = [tasks.NodeTask(i, quadratic=q) for i, q in enumerate(quads)]
    penalty = build_penalty(cfg, dim=cfg.data["dim"])
    fc = build_federation(cfg, nodes, workers=workers, penalty=penalty)
    _, reports = run_metagater(fc)
    running = np.inf
    for r in reports:
        q_sq = r.q_norm ** 2
        running = min(running, q_sq)
        r.extra.update(q_sq=q_sq, running_min=running, t_running_min=r.t * running)
    _write_rounds(out_dir, reports, stem="convergence")
    summary = _summary(
        cfg.kind, [], reports, seed=cfg.seed,
        min_q_sq=float(min(r.extra["q_sq"] for r in reports)),
        max_t_running_min=float(max(r.extra["t_running_min"] for r in reports)),
        final_h=float(reports[-1].h_value),
    )
    return RunResult(out_dir, summary, [], reports)


_DISPATCH = {
    "metagater": _run_training,
    "fedavg": _run_training,
    "metasnip": _run_training,
    "diagnostics-lemma3": _run_lemma3,
    "diagnostics-smoothness": _run_smoothness,
    "diagnostics-convergence": _run_convergence,
}


def run(cfg: ExperimentConfig, seed: Optional[int] = None, workers: Optional[int] = None, out=None) -> RunResult:
    """Run one experiment and write its metrics, checkpoint and ``summary.json``."""
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    out_dir = resolve_out_dir(cfg, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.glob("*.csv"):
        stale.unlink()
    for stale in out_dir.glob("*.jsonl"):
        stale.unlink()
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    result = _DISPATCH[cfg.kind](cfg, out_dir, workers)
    (out_dir / "summary.json").write_text(json.dumps(to_jsonable(result.summary), indent=1, sort_keys=True))
    return result


# --------------------------------------------------------------------------
# repeats and summaries


def summarize_runs(summaries: List[dict]) -> dict:
    """Mean and sample standard deviation of every numeric summary field."""
    if not summaries:
        raise ValueError("no summaries to aggregate")
    out = {"method": summaries[0].get("method"), "repeats": len(summaries)}
    keys = sorted({k for s in summaries for k, v in s.items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
    for k in keys:
        vals = [s[k] for s in summaries if isinstance(s.get(k), (int, float))]
        if len(vals) == len(summaries):
            out[f"{k}_mean"] = float(np.mean(vals))
            out[f"{k}_std"] = sample_std(vals)
    return out


def repeat_and_summarize(cfg: ExperimentConfig, repeats: int, workers=None, out=None, force_seed: bool = False):
    """Run ``repeats`` times with seeds ``base + i`` (or the base seed for all when
    ``force_seed``); returns ``(aggregate, per_run_results)``."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    base = resolve_out_dir(cfg, out)
    results = []
    for i in range(repeats):
        seed = cfg.seed if force_seed else cfg.seed + i
        results.append(run(cfg, seed=seed, workers=workers, out=base / f"repeat{i}"))
    agg = summarize_runs([r.summary for r in results])
    base.mkdir(parents=True, exist_ok=True)
    (base / "aggregate.json").write_text(json.dumps(to_jsonable(agg), indent=1, sort_keys=True))
    return agg, results
