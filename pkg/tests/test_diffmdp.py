"""Trajectory statistics, Hessian strategies, cross terms, gradient assembly.

The heavyweight oracles live in enum_mdp: a 16-path enumerable MDP whose
exact objectives are differentiated by finite differences, fully independent
of the estimator code under test.
"""
import numpy as np
import pytest

import enum_mdp as em
from dfmdp import environments as envs
from dfmdp.diffmdp import (BellmanTrajStats, LowRankHessian, bellman_stats,
                           build_lowrank, collect_stats, cross_vjp,
                           decision_gradient, fd_jacobians, full_hessian,
                           identity_solve, mean_policy_grad_fn, pg_stats,
                           woodbury_solve)
from dfmdp.mdp_core import Trajectory
from dfmdp.solvers import TabularSoftPolicy

BETA = 1.3


def _setup(theta_seed=0, q_seed=1, theta=None):
    theta = em.default_theta(theta_seed) if theta is None else theta
    rng = np.random.default_rng(q_seed)
    q = rng.normal(0.0, 0.7, size=4)
    pol = TabularSoftPolicy(q.reshape(2, 2), BETA)
    paths = em.all_paths()
    trajs = [em.make_traj(p, theta) for p in paths]
    rgl = [em.reward_grads(p) for p in paths]
    weights = em.path_weights(q, theta, BETA)
    return theta, q, pol, trajs, rgl, weights


def _stats(mode, theta, pol, trajs, rgl):
    return collect_stats(trajs, theta, pol, em.GAMMA, em.D, mode,
                         reward_grads_list=rgl,
                         latent_score_fn=envs.latent_score)


# -- per-trajectory statistics ---------------------------------------------------


def test_pg_phi_hand_value():
    # two steps, rewards (1, 2), log pi = log 0.5 at both:
    # c1 = 0.95 + 2*0.9025, c2 = 2*0.9025, phi = (c1 + c2) ln 0.5
    pol = TabularSoftPolicy(np.zeros((2, 2)), beta=1.0)
    traj = Trajectory(np.array([0, 1], dtype=np.int64), [0, 1], [1.0, 2.0],
                      [0.5, 0.5], [[], []], final_state=0)
    s = pg_stats(traj, np.zeros(1), pol, 0.95, 1)
    assert np.isclose(s.phi, 4.56 * np.log(0.5))
    assert abs(s.phi - (-3.1606)) < 5e-4
    assert np.allclose(s.c_weights, [2.755, 1.805])


def test_pg_zero_rewards():
    pol = TabularSoftPolicy(np.array([[0.3, -0.2], [0.1, 0.4]]), beta=2.0)
    traj = Trajectory(np.array([0, 1], dtype=np.int64), [1, 0], [0.0, 0.0],
                      [0.5, 0.5], [[], []], final_state=1)
    s = pg_stats(traj, np.zeros(1), pol, 0.95, 1)
    assert s.phi == 0.0
    assert np.allclose(s.g_phi, 0.0)
    assert not np.allclose(s.g_logp_pi, 0.0)


def test_pg_phi_definition_invariant():
    theta, q, pol, trajs, rgl, _ = _setup()
    for traj, s in zip(trajs, _stats("pg", theta, pol, trajs, rgl)):
        lp = [np.log(pol.action_probs(int(st))[a])
              for st, a in zip(traj.states, traj.actions)]
        assert np.isclose(s.phi, float(s.c_weights @ lp))


def test_pg_missing_latents_rejected():
    pol = TabularSoftPolicy(np.zeros((2, 2)), beta=1.0)
    traj = Trajectory(np.array([0, 1], dtype=np.int64), [0, 1], [1.0, 2.0],
                      [0.5, 0.5], events=None, final_state=0)
    with pytest.raises(ValueError, match="latent event records"):
        pg_stats(traj, np.full(8, 0.5), pol, 0.95, 8,
                 latent_score_fn=envs.latent_score)


def test_bellman_delta_hand_value():
    # Q(s0, a0) = 3, next-state soft-expected Q = 2, r = 1:
    # delta = 3 - 1 - 0.95 * 2 = 0.1
    q = np.array([[3.0, -1.0], [2.0, 2.0]])
    pol = TabularSoftPolicy(q, beta=0.7)
    traj = Trajectory(np.array([0], dtype=np.int64), [0], [1.0], [0.5],
                      [[]], final_state=1)
    s = bellman_stats(traj, np.zeros(1), pol, 0.95, 1)
    assert np.isclose(s.delta, 0.1)


def test_bellman_delta_matches_independent_formula():
    theta, q, pol, trajs, rgl, _ = _setup(theta_seed=3, q_seed=4)
    for path, traj in zip(em.all_paths(), trajs):
        s = bellman_stats(traj, theta, pol, em.GAMMA, em.D,
                          reward_grads=em.reward_grads(path))
        assert np.isclose(s.delta, em.path_delta(path, q, theta, BETA))


def test_bellman_delta_zero_at_consistent_q():
    theta = em.symmetric_theta(2)
    q = em.consistent_q(theta, BETA)
    pol = TabularSoftPolicy(q, BETA)
    for path in em.all_paths():
        traj = em.make_traj(path, theta)
        s = bellman_stats(traj, theta, pol, em.GAMMA, em.D,
                          reward_grads=em.reward_grads(path))
        assert abs(s.delta) < 1e-9


# -- unbiasedness against the enumeration oracle ----------------------------------


@pytest.mark.parametrize("mode", ["pg", "bellman"])
def test_estimator_mean_matches_exact_gradient(mode):
    theta, q, pol, trajs, rgl, weights = _setup()
    grad_fn = mean_policy_grad_fn(trajs, mode, pol, em.GAMMA, em.D,
                                  reward_grads_list=rgl,
                                  latent_score_fn=envs.latent_score,
                                  weights=weights)
    est = grad_fn(q, theta)
    exact = em.fd_grad_pi(mode, q, theta, BETA)
    assert np.linalg.norm(est - exact) < 1e-6 * max(1.0,
                                                    np.linalg.norm(exact))


@pytest.mark.parametrize("mode", ["pg", "bellman"])
def test_full_hessian_matches_exact(mode):
    theta, q, pol, trajs, rgl, weights = _setup()
    stats = _stats(mode, theta, pol, trajs, rgl)
    grad_fn = mean_policy_grad_fn(trajs, mode, pol, em.GAMMA, em.D,
                                  reward_grads_list=rgl,
                                  latent_score_fn=envs.latent_score,
                                  weights=weights)
    h_est, c_est = full_hessian(stats, mode, grad_fn, q, theta,
                                weights=weights)
    h_exact = em.fd_hessian_pi(mode, q, theta, BETA)
    c_exact = em.fd_cross(mode, q, theta, BETA)
    assert np.linalg.norm(h_est - h_exact) < 1e-4 * max(
        1.0, np.linalg.norm(h_exact))
    assert np.linalg.norm(c_est - c_exact) < 1e-4 * max(
        1.0, np.linalg.norm(c_exact))
    assert np.abs(h_est - h_est.T).max() < 1e-6


def test_lowrank_hessian_exact_at_zero_delta():
    # with delta == 0 on every path the dropped terms vanish and the plain
    # outer-product estimate is the whole Hessian
    theta = em.symmetric_theta(5)
    q2 = em.consistent_q(theta, BETA)
    q = q2.ravel()
    pol = TabularSoftPolicy(q2, BETA)
    paths = em.all_paths()
    trajs = [em.make_traj(p, theta) for p in paths]
    rgl = [em.reward_grads(p) for p in paths]
    weights = em.path_weights(q, theta, BETA)
    stats = _stats("bellman", theta, pol, trajs, rgl)
    lr = build_lowrank(stats, "bellman", c_mag=1.0, weights=weights)
    outer = lr.dense() - np.eye(4)
    h_exact = em.fd_hessian_pi("bellman", q, theta, BETA)
    assert np.linalg.norm(outer - h_exact) < 1e-4 * max(
        1.0, np.linalg.norm(h_exact))


def test_full_hessian_nsd_at_interior_optimum():
    # equal rewards everywhere make every policy optimal: the exact Hessian
    # is zero, an interior stationary point, and the estimate must agree
    theta = em.default_theta(7)
    theta[:4] = 0.8
    theta_q = np.zeros(4)
    pol = TabularSoftPolicy(theta_q.reshape(2, 2), BETA)
    paths = em.all_paths()
    trajs = [em.make_traj(p, theta) for p in paths]
    rgl = [em.reward_grads(p) for p in paths]
    weights = em.path_weights(theta_q, theta, BETA)
    stats = _stats("pg", theta, pol, trajs, rgl)
    grad_fn = mean_policy_grad_fn(trajs, "pg", pol, em.GAMMA, em.D,
                                  reward_grads_list=rgl,
                                  latent_score_fn=envs.latent_score,
                                  weights=weights)
    h_est, _ = full_hessian(stats, "pg", grad_fn, theta_q, theta,
                            weights=weights)
    eigs = np.linalg.eigvalsh(0.5 * (h_est + h_est.T))
    assert eigs.max() <= 1e-8


@pytest.mark.parametrize("mode", ["pg", "bellman"])
def test_cross_vjp_matches_exact(mode):
    if mode == "pg":
        theta, q, pol, trajs, rgl, weights = _setup()
        include = False
    else:
        theta = em.symmetric_theta(5)
        q2 = em.consistent_q(theta, BETA)
        q = q2.ravel()
        pol = TabularSoftPolicy(q2, BETA)
        paths = em.all_paths()
        trajs = [em.make_traj(p, theta) for p in paths]
        rgl = [em.reward_grads(p) for p in paths]
        weights = em.path_weights(q, theta, BETA)
        include = False
    stats = _stats(mode, theta, pol, trajs, rgl)
    c_exact = em.fd_cross(mode, q, theta, BETA)
    c_est = np.stack([
        cross_vjp(stats, mode, e, em.D, weights=weights,
                  include_delta_terms=include)
        for e in np.eye(4)])
    assert np.linalg.norm(c_est - c_exact) < 1e-4 * max(
        1.0, np.linalg.norm(c_exact))


def test_cross_vjp_delta_terms_reduce_error():
    # away from Bellman consistency the delta-weighted terms recover part of
    # the exact cross derivative; only the O(delta^2) term stays dropped
    theta, q, pol, trajs, rgl, weights = _setup(theta_seed=6, q_seed=8)
    stats = _stats("bellman", theta, pol, trajs, rgl)
    c_exact = em.fd_cross("bellman", q, theta, BETA)
    errs = {}
    for include in (False, True):
        c_est = np.stack([
            cross_vjp(stats, "bellman", e, em.D, weights=weights,
                      include_delta_terms=include)
            for e in np.eye(4)])
        errs[include] = np.linalg.norm(c_est - c_exact)
    assert errs[True] < errs[False]


def test_footnote_shortcut_equals_default_cross():
    # differentiating the frozen-sample Bellman gradient sum w_i delta_i
    # grad delta_i in theta gives exactly the default cross product
    theta, q, pol, trajs, rgl, weights = _setup(theta_seed=9, q_seed=10)
    stats = _stats("bellman", theta, pol, trajs, rgl)
    rng = np.random.default_rng(0)
    y = rng.normal(size=4)

    def footnote_target(th):
        total = 0.0
        for w, path, s in zip(weights, em.all_paths(), stats):
            total += w * em.path_delta(path, q, th, BETA) * float(
                y @ s.g_delta_pi)
        return total

    step = 1e-6
    fd = np.empty(em.D)
    for j in range(em.D):
        e = np.zeros(em.D)
        e[j] = step
        fd[j] = (footnote_target(theta + e)
                 - footnote_target(theta - e)) / (2 * step)
    direct = cross_vjp(stats, "bellman", y, em.D, weights=weights)
    assert np.linalg.norm(direct - fd) < 1e-6 * max(1.0, np.linalg.norm(fd))


def test_gridworld_cross_structure():
    # reward-parameter domain: score part zero, reward part nonzero
    inst = envs.generate_instance("gridworld", seed=0)
    from dfmdp.solvers import solve_instance

    res = solve_instance("gridworld", inst.true_params, inst.structure,
                         iters=500)
    beh = envs.behavior_policy("random", inst)
    trajs = envs.simulate_trajectories("gridworld", inst.true_params,
                                       inst.structure, beh, 4, seed=3)
    rgl = [envs.reward_theta_grads(t, "gridworld", inst.structure)
           for t in trajs]
    stats = collect_stats(trajs, inst.true_params, res.policy, 0.95, 25,
                          "bellman", reward_grads_list=rgl)
    for s in stats:
        assert np.allclose(s.g_logp_theta, 0.0)
        assert not np.allclose(s.g_delta_theta, 0.0)
    y = np.ones(125)
    out = cross_vjp(stats, "bellman", y, 25)
    assert out.shape == (25,) and np.any(out != 0.0)


# -- linear algebra ----------------------------------------------------------------


def test_woodbury_zero_rank_is_identity_scale():
    lr = LowRankHessian(np.zeros((4, 2)), np.zeros((4, 2)), 2.0)
    g = np.array([2.0, -4.0, 0.0, 6.0])
    assert np.allclose(woodbury_solve(lr, g), g / 2.0)


def test_woodbury_sherman_morrison_case():
    u = np.array([[1.0], [0.0]])
    lr = LowRankHessian(u, u, 1.0)
    y = woodbury_solve(lr, np.array([1.0, 1.0]))
    assert np.allclose(y, [0.5, 1.0])


def test_woodbury_matches_dense_inverse():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(5, 51))
        k = int(rng.integers(1, 11))
        c = float(rng.choice([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]))
        u = rng.normal(size=(n, k))
        v = rng.normal(size=(n, k))
        lr = LowRankHessian(u, v, c)
        g = rng.normal(size=n)
        dense = np.linalg.solve(lr.dense(), g)
        assert np.abs(woodbury_solve(lr, g) - dense).max() < 1e-8


def test_woodbury_ridge_flag():
    # v^T u = -c makes the k x k core exactly singular; the ridge must kick
    # in and be reported
    u = np.array([[1.0], [0.0]])
    v = np.array([[-1.0], [0.0]])
    lr = LowRankHessian(u, v, 1.0)
    y, diag = woodbury_solve(lr, np.array([1.0, 1.0]), with_diagnostics=True)
    assert diag["ridge_applied"]
    assert np.all(np.isfinite(y))
    with pytest.raises(ValueError, match="zero diagonal"):
        woodbury_solve(LowRankHessian(u, v, 0.0), np.ones(2))


def test_identity_solve_signs():
    g = np.array([2.0, 4.0])
    assert np.allclose(identity_solve("pg", g, 1.0), -g)
    assert np.allclose(identity_solve("bellman", g, 2.0), [1.0, 2.0])
    lr = LowRankHessian(np.zeros((2, 1)), np.zeros((2, 1)), 1.0)
    assert np.allclose(identity_solve("bellman", g, 1.0),
                       woodbury_solve(lr, g))
    with pytest.raises(ValueError, match="zero"):
        identity_solve("pg", g, 0.0)


def test_build_lowrank_construction():
    e1 = np.zeros(3)
    e1[0] = 1.0
    s = BellmanTrajStats(0.0, e1, np.zeros(2), e1, np.zeros(2))
    lr = build_lowrank([s], "bellman", c_mag=1.0)
    assert np.allclose(lr.dense(), np.eye(3) + np.outer(e1, e1))
    assert lr.u is lr.v  # bellman mode shares the columns
    assert lr.c > 0


def test_build_lowrank_average_scaling():
    rng = np.random.default_rng(1)
    stats = [BellmanTrajStats(0.0, rng.normal(size=6), np.zeros(2),
                              rng.normal(size=6), np.zeros(2))
             for _ in range(3)]
    lr = build_lowrank(stats, "bellman", c_mag=0.5)
    explicit = sum(np.outer(s.g_delta_pi, s.g_delta_pi)
                   for s in stats) / 3 + 0.5 * np.eye(6)
    assert np.abs(lr.dense() - explicit).max() < 1e-12


def test_build_lowrank_pg_sign_and_errors():
    rng = np.random.default_rng(2)
    from dfmdp.diffmdp import PgTrajStats

    mk = lambda n: PgTrajStats(0.0, rng.normal(size=n), rng.normal(size=n),
                               np.zeros(2), np.zeros(2), None, None)
    lr = build_lowrank([mk(4), mk(4)], "pg", c_mag=2.0)
    assert lr.c == -2.0
    with pytest.raises(ValueError):
        build_lowrank([mk(4), mk(5)], "pg")
    with pytest.raises(ValueError, match="no trajectory"):
        build_lowrank([], "pg")
    with pytest.raises(ValueError, match="weights"):
        build_lowrank([mk(4)], "pg", weights=np.ones(3))


def test_fd_jacobian_dim_limit():
    with pytest.raises(ValueError, match="2000"):
        fd_jacobians(lambda p, t: p, np.zeros(2001), np.zeros(1))


# -- assembly -------------------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["identity", "woodbury", "full"])
def test_decision_gradient_zero_eval_grad(strategy):
    theta, q, pol, trajs, rgl, weights = _setup()
    stats = _stats("bellman", theta, pol, trajs, rgl)
    parts = None
    if strategy == "full":
        grad_fn = mean_policy_grad_fn(trajs, "bellman", pol, em.GAMMA, em.D,
                                      reward_grads_list=rgl,
                                      latent_score_fn=envs.latent_score,
                                      weights=weights)
        parts = full_hessian(stats, "bellman", grad_fn, q, theta,
                             weights=weights)
    out, diag = decision_gradient(np.zeros(4), stats, "bellman", strategy,
                                  em.D, weights=weights, full_parts=parts)
    assert np.allclose(out, 0.0)


def test_decision_gradient_full_requires_parts():
    theta, q, pol, trajs, rgl, weights = _setup()
    stats = _stats("bellman", theta, pol, trajs, rgl)
    with pytest.raises(ValueError, match="full strategy"):
        decision_gradient(np.ones(4), stats, "bellman", "full", em.D)
    with pytest.raises(ValueError, match="strategy"):
        decision_gradient(np.ones(4), stats, "bellman", "cg", em.D)
