import numpy as np
import pytest

from gatedmeta import federation as fed
from gatedmeta import nets, tasks
from gatedmeta.core_math import L1Penalty, Schedule, ZeroPenalty
from gatedmeta.local_solver import StopRule
from gatedmeta.tasks import NodeTask

from oracles import envelope_gradient


def _quad_nodes(n=4, dim=3, rho=1.0, seed=0):
    return [NodeTask(i, quadratic=q) for i, q in enumerate(tasks.gen_quadratic_federation(n, dim, rho, seed=seed))]


def test_extrapolate_by_hand():
    s = Schedule(lam=1.0, T=10)
    state = fed.MetaState(np.array([1.0, 0.0]), np.array([0.0, 1.0]), t=3, schedule=s)
    # alpha_3 = 1/2
    np.testing.assert_allclose(fed.extrapolate(state), [0.5, 0.5])
    state.t = 1
    np.testing.assert_allclose(fed.extrapolate(state), [1.0, 0.0])


def test_aggregate_by_hand():
    g = fed.aggregate(np.array([1.0, 1.0]), [np.array([0.0, 1.0]), np.array([1.0, 3.0])], lam=2.0)
    np.testing.assert_allclose(g, [1.0, -2.0])
    with pytest.raises(ValueError):
        fed.aggregate(np.zeros(2), [], 1.0)


def test_global_update_experiment_rule():
    s = Schedule(lam=1.0, T=10)  # t=1: alpha 1, beta 1, eta 1
    state = fed.MetaState.initial([2.0, -0.05], s, L1Penalty(0.1))
    nxt = fed.global_update(state, np.array([1.0, 0.0]))
    np.testing.assert_allclose(nxt.w_prev, [0.9, 0.0])
    np.testing.assert_allclose(nxt.w_ag_prev, [0.9, 0.0])
    assert nxt.t == 2 and state.t == 1


def test_exact_meta_gradient_matches_eigen_oracle():
    qs = tasks.gen_quadratic_federation(5, 6, 1.5, seed=4)
    w = np.random.default_rng(0).normal(size=6)
    g = fed.exact_meta_gradient(w, qs, 2.0)
    ref = envelope_gradient(w, [q.A for q in qs], [q.b for q in qs], 2.0)
    np.testing.assert_allclose(g, ref, rtol=1e-10, atol=1e-12)


def test_sampling_deterministic_and_sorted():
    a = fed.sample_nodes(20, 5, seed=3, t=7)
    assert a == fed.sample_nodes(20, 5, seed=3, t=7) and a == sorted(a) and len(set(a)) == 5
    assert fed.sample_nodes(4, 4, seed=0, t=1) == [0, 1, 2, 3]
    assert len({tuple(fed.sample_nodes(20, 5, 3, t)) for t in range(1, 20)}) > 1


def test_config_validation():
    with pytest.raises(ValueError):
        fed.FederationConfig(nodes=[], T=1)
    with pytest.raises(ValueError):
        fed.FederationConfig(nodes=_quad_nodes(2), T=1, m=3)
    with pytest.raises(ValueError):
        fed.FederationConfig(nodes=_quad_nodes(2), T=5, schedule=Schedule(T=2))


def test_quadratic_run_reports_exact_q_and_converges():
    nodes = _quad_nodes(4, 3, rho=1.0)
    cfg = fed.FederationConfig(
        nodes=nodes, T=60, lam=2.0, schedule=Schedule("theorem1", lam=2.0, T=60, rho=1.0), exact_local=True
    )
    w, reports = fed.run_metagater(cfg)
    assert all(r.q_source == "exact" for r in reports)
    assert reports[-1].q_norm < 1e-3 * reports[0].q_norm
    assert reports[0].extra["delta_sq"] < 1e-20
    # stationary point of the averaged envelope
    g = fed.exact_meta_gradient(w, [n.quadratic for n in nodes], 2.0)
    assert np.linalg.norm(g) < 1e-3


def test_worker_count_does_not_change_results():
    nodes = _quad_nodes(6, 4, seed=1)
    runs = []
    for workers in (1, 4):
        cfg = fed.FederationConfig(nodes=nodes, T=15, m=3, lam=1.5, seed=2, workers=workers,
                                   stop=StopRule("tolerance", tol=1e-6))
        w, reps = fed.run_metagater(cfg)
        runs.append((w, [(r.grad_norm, r.q_norm, r.nodes) for r in reps]))
    assert np.array_equal(runs[0][0], runs[1][0]) and runs[0][1] == runs[1][1]


def test_network_run_and_fedavg_weighting():
    rng = np.random.default_rng(0)
    net = nets.mlp(n_in=4, hidden=3, n_classes=2, seed=0)
    nodes = []
    for i, n in enumerate((2, 6)):
        b = nets.Batch(rng.normal(size=(n, 4)), rng.integers(0, 2, size=n))
        nodes.append(NodeTask(i, train=b))
    w, reps = fed.run_metagater(fed.FederationConfig(nodes=nodes, T=3, net=net, gating=False))
    assert all(r.q_source == "surrogate" and "delta_sq" not in r.extra for r in reps)
    assert w.shape == net.params.shape

    cfg = fed.FederationConfig(nodes=nodes, T=1, net=net, gating=False, stop=StopRule("fixed", steps=1), fedavg_lr=0.1)
    w_avg, reps = fed.run_fedavg(cfg)
    locals_ = []
    for node in nodes:
        _, gt, gp = nets.loss_and_grad(net, node.train, gating=False)
        locals_.append(net.params - 0.1 * np.concatenate([gt, gp]))
    np.testing.assert_allclose(w_avg, 0.25 * locals_[0] + 0.75 * locals_[1], rtol=1e-12)
    assert reps[0].q_source == "fedavg-step"


def test_network_nodes_need_a_net():
    node = NodeTask(0, train=nets.Batch(np.zeros((1, 2)), [0]))
    with pytest.raises(ValueError, match="no net"):
        fed.run_metagater(fed.FederationConfig(nodes=[node], T=1, w0=np.zeros(3), penalty=ZeroPenalty()))
