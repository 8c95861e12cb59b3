"""Differentiating the evaluation through the policy-optimality conditions.

The chain rule used throughout:

    d Eval / d w = -(d Eval / d pi) (H_pi)^{-1} C (d theta / d w)

where H_pi is the Hessian of the planning objective J in the policy
parameters and C its mixed second derivative in (policy, theta). Both are
estimated from trajectories in one of two modes:

* ``pg``: J is the policy-gradient surrogate; per trajectory
  Phi = sum_i c_i log pi(a_i | s_i) with c_i the discounted
  reward-to-go, and H = E[grad Phi grad logp^T + hess Phi].
* ``bellman``: J is half the squared sum of Bellman residuals
  delta = sum_t [Q(s_t,a_t) - r_t - gamma * E_{a'}Q(s_{t+1},a')],
  and H = E[grad delta grad delta^T] plus terms that vanish as
  delta -> 0.

Hessian strategies: ``identity`` (signed scaled identity), ``woodbury``
(low-rank plus scaled identity, inverted by the Woodbury identity), and
``full`` (dense estimate combining finite differences of the mean
first-order gradient at frozen trajectories with analytic score outer
products).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward_grad

MODES = ("pg", "bellman")
STRATEGIES = ("identity", "woodbury", "full")

WOODBURY_COND_LIMIT = 1e12
WOODBURY_RIDGE = 1e-6


@dataclass
class PgTrajStats:
    phi: float
    g_phi: np.ndarray            # (n,)
    g_logp_pi: np.ndarray        # (n,)
    g_logp_theta: np.ndarray     # (d,)
    c_weights: np.ndarray        # (h,): discounted reward-to-go per step
    step_logp_grads: np.ndarray | None      # (h, n), reward-theta domains
    reward_suffix: np.ndarray | None        # (h, d): sum_{j>=i} gamma^j dr_j


@dataclass
class BellmanTrajStats:
    delta: float
    g_delta_pi: np.ndarray       # (n,)
    g_delta_theta: np.ndarray    # (d,)
    g_logp_pi: np.ndarray        # (n,)
    g_logp_theta: np.ndarray     # (d,)


def _next_states(traj):
    s = np.asarray(traj.states)
    final = np.asarray(traj.final_state)
    if s.ndim == 1:
        return np.concatenate([s[1:], [int(final)]])
    return np.concatenate([s[1:], final[None, :]], axis=0)


def _traj_rewards(traj, theta, reward_grads):
    """Rewards as a function of theta when the linear map is available."""
    if reward_grads is None:
        return np.asarray(traj.rewards, dtype=np.float64)
    return reward_grads @ theta


def pg_stats(traj, theta, policy, gamma, theta_dim,
             reward_grads=None, latent_score_fn=None) -> PgTrajStats:
    theta = np.asarray(theta, dtype=np.float64)
    rewards = _traj_rewards(traj, theta, reward_grads)
    h = traj.horizon
    disc = gamma ** np.arange(1, h + 1)
    c = np.cumsum((disc * rewards)[::-1])[::-1]          # c_i = sum_{j>=i}

    tape = Tape()
    refs = policy.register(tape)
    lp = policy.tape_log_probs(tape, refs, np.asarray(traj.states),
                               np.asarray(traj.actions))
    phi = tape.reduce_sum(tape.mul(lp, c))
    logp_sum = tape.reduce_sum(lp)

    pv = policy.param_vector()
    g_phi = pv.grads_to_flat(backward_grad(tape, phi))
    g_logp_pi = pv.grads_to_flat(backward_grad(tape, logp_sum))

    g_logp_theta = _score_or_zeros(latent_score_fn, traj, theta, theta_dim)

    step_grads = None
    suffix = None
    if reward_grads is not None:
        step_grads = policy.step_log_prob_grads(np.asarray(traj.states),
                                                np.asarray(traj.actions))
        suffix = np.cumsum((disc[:, None] * reward_grads)[::-1], axis=0)[::-1]
    return PgTrajStats(float(tape.value(phi)), g_phi, g_logp_pi,
                       g_logp_theta, c, step_grads, suffix)


def _score_or_zeros(latent_score_fn, traj, theta, theta_dim):
    if latent_score_fn is None:
        return np.zeros(theta_dim)
    if traj.events is None:
        raise ValueError(
            "trajectory has no latent event records; simulate with "
            "record_latents=True when theta parameterizes transitions")
    return np.asarray(latent_score_fn(traj, theta, theta_dim),
                      dtype=np.float64)


def bellman_stats(traj, theta, policy, gamma, theta_dim,
                  reward_grads=None, latent_score_fn=None) -> BellmanTrajStats:
    theta = np.asarray(theta, dtype=np.float64)
    rewards = _traj_rewards(traj, theta, reward_grads)
    states = np.asarray(traj.states)
    actions = np.asarray(traj.actions)
    nxt = _next_states(traj)
    h = traj.horizon

    tape = Tape()
    refs = policy.register(tape)
    q_s = policy.tape_q_rows(tape, refs, states)          # (h, A)
    q_n = policy.tape_q_rows(tape, refs, nxt)             # (h, A)
    n_actions = tape.value(q_s).shape[1]
    onehot = np.zeros((h, n_actions))
    onehot[np.arange(h), actions] = 1.0

    qsa = tape.reduce_sum(tape.mul(q_s, onehot), axis=1)
    pi_n = tape.softmax(q_n, policy.beta)
    eq = tape.reduce_sum(tape.mul(pi_n, q_n), axis=1)
    body = tape.add(tape.reduce_sum(qsa),
                    tape.mul(tape.reduce_sum(eq), np.array(-gamma)))
    delta = tape.affine(body, None, np.array(-float(rewards.sum())))

    lp_rows = tape.log_softmax(q_s, policy.beta)
    logp_sum = tape.reduce_sum(tape.mul(lp_rows, onehot))

    pv = policy.param_vector()
    g_delta_pi = pv.grads_to_flat(backward_grad(tape, delta))
    g_logp_pi = pv.grads_to_flat(backward_grad(tape, logp_sum))

    if reward_grads is not None:
        g_delta_theta = -reward_grads.sum(axis=0)
    else:
        g_delta_theta = np.zeros(theta_dim)
    g_logp_theta = _score_or_zeros(latent_score_fn, traj, theta, theta_dim)
    return BellmanTrajStats(float(tape.value(delta)), g_delta_pi,
                            np.asarray(g_delta_theta, dtype=np.float64),
                            g_logp_pi, g_logp_theta)


def collect_stats(trajectories, theta, policy, gamma, theta_dim, mode,
                  reward_grads_list=None, latent_score_fn=None):
    """Per-trajectory statistics for one instance in the given mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    fn = pg_stats if mode == "pg" else bellman_stats
    out = []
    for i, traj in enumerate(trajectories):
        rg = None if reward_grads_list is None else reward_grads_list[i]
        out.append(fn(traj, theta, policy, gamma, theta_dim,
                      reward_grads=rg, latent_score_fn=latent_score_fn))
    return out


@dataclass
class LowRankHessian:
    u: np.ndarray        # (n, k), columns already weight-scaled
    v: np.ndarray        # (n, k)
    c: float             # signed diagonal magnitude

    @property
    def n(self):
        return self.u.shape[0]

    @property
    def k(self):
        return self.u.shape[1]

    def dense(self):
        return self.u @ self.v.T + self.c * np.eye(self.n)


def _weights(stats, weights):
    k = len(stats)
    if weights is None:
        return np.full(k, 1.0 / k)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValueError("weights length does not match statistics")
    return w


def build_lowrank(stats, mode, c_mag=1.0, weights=None) -> LowRankHessian:
    """Low-rank-plus-identity Hessian estimate.

    pg: sum_i w_i grad Phi_i grad logp_i^T - |c| I
    bellman: sum_i w_i grad delta_i grad delta_i^T + |c| I
    """
    if not stats:
        raise ValueError("no trajectory statistics")
    w = _weights(stats, weights)
    sq = np.sqrt(w)
    if mode == "pg":
        u = np.stack([s.g_phi for s in stats], axis=1) * sq
        v = np.stack([s.g_logp_pi for s in stats], axis=1) * sq
        c = -abs(c_mag)
    elif mode == "bellman":
        u = np.stack([s.g_delta_pi for s in stats], axis=1) * sq
        v = u
        c = abs(c_mag)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return LowRankHessian(u, v, float(c))


def woodbury_solve(lr: LowRankHessian, g, with_diagnostics=False):
    """Solve (U V^T + c I) y = g via the k x k Woodbury system

        y = g/c - (1/c) U (c I_k + V^T U)^{-1} V^T g.
    """
    if lr.c == 0.0:
        raise ValueError("woodbury_solve: zero diagonal term")
    g = np.asarray(g, dtype=np.float64)
    m = lr.c * np.eye(lr.k) + lr.v.T @ lr.u
    ridge_applied = False
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > WOODBURY_COND_LIMIT:
        m = m + WOODBURY_RIDGE * np.eye(lr.k)
        ridge_applied = True
    vg = lr.v.T @ g
    try:
        inner = np.linalg.solve(m, vg)
    except np.linalg.LinAlgError:
        m = m + WOODBURY_RIDGE * np.eye(lr.k)
        ridge_applied = True
        inner = np.linalg.solve(m, vg)
    y = g / lr.c - (lr.u @ inner) / lr.c
    if with_diagnostics:
        return y, {"ridge_applied": ridge_applied, "cond": float(cond)}
    return y


def identity_solve(mode, g, c_mag=1.0):
    """Hessian approximated by its signed diagonal term alone."""
    if c_mag == 0.0:
        raise ValueError("identity_solve: zero diagonal term")
    g = np.asarray(g, dtype=np.float64)
    return g / (-abs(c_mag)) if mode == "pg" else g / abs(c_mag)


def cross_vjp(stats, mode, y, theta_dim, weights=None,
              include_delta_terms=False):
    """y^T (d^2 J / d theta d pi) as a length-d vector.

    pg: per trajectory (y . grad Phi) score_theta plus the exact
    second-order term sum_i (y . grad logpi_i) (reward suffix_i).
    bellman: per trajectory (y . grad delta) grad_theta delta; the
    optional delta-weighted score terms matter when theta enters the
    transition probabilities rather than the rewards.
    """
    y = np.asarray(y, dtype=np.float64)
    w = _weights(stats, weights)
    out = np.zeros(theta_dim)
    if mode == "pg":
        for wi, s in zip(w, stats):
            out += wi * (y @ s.g_phi) * s.g_logp_theta
            if s.step_logp_grads is not None:
                out += wi * ((s.step_logp_grads @ y) @ s.reward_suffix)
    elif mode == "bellman":
        for wi, s in zip(w, stats):
            out += wi * (y @ s.g_delta_pi) * s.g_delta_theta
            if include_delta_terms:
                out += wi * s.delta * ((y @ s.g_delta_pi) * s.g_logp_theta
                                       + (y @ s.g_logp_pi) * s.g_delta_theta)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def mean_policy_grad_fn(trajectories, mode, policy, gamma, theta_dim,
                        reward_grads_list=None, latent_score_fn=None,
                        weights=None):
    """Weighted mean of the per-trajectory first-order policy gradient,
    as a function of (pi_flat, theta) at frozen trajectories.

    pg: sum_i w_i grad Phi_i; bellman: sum_i w_i (delta_i grad delta_i
    + 0.5 delta_i^2 grad logp_i), i.e. the gradient of the expected
    planning objective with the sampling distribution held fixed.
    """
    k = len(trajectories)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights)

    def grad_fn(pi_flat, theta):
        pol = policy.with_flat(np.asarray(pi_flat, dtype=np.float64))
        acc = None
        for i, traj in enumerate(trajectories):
            rg = None if reward_grads_list is None else reward_grads_list[i]
            if mode == "pg":
                s = pg_stats(traj, theta, pol, gamma, theta_dim,
                             reward_grads=rg, latent_score_fn=latent_score_fn)
                term = s.g_phi
            else:
                s = bellman_stats(traj, theta, pol, gamma, theta_dim,
                                  reward_grads=rg,
                                  latent_score_fn=latent_score_fn)
                term = s.delta * s.g_delta_pi + 0.5 * s.delta ** 2 * s.g_logp_pi
            acc = w[i] * term if acc is None else acc + w[i] * term
        return acc

    return grad_fn


FULL_DIM_LIMIT = 2000


def fd_jacobians(grad_fn, pi0, theta0, step=1e-5):
    """Central-difference Jacobians of grad_fn in pi (n x n) and theta
    (n x d). grad_fn must be deterministic in its arguments."""
    pi0 = np.asarray(pi0, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    n, d = pi0.size, theta0.size
    if n > FULL_DIM_LIMIT:
        raise ValueError(
            f"dense Hessian limited to {FULL_DIM_LIMIT} policy parameters, "
            f"got {n}")
    h_pi = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        h_pi[:, i] = (grad_fn(pi0 + e, theta0)
                      - grad_fn(pi0 - e, theta0)) / (2 * step)
    c = np.empty((n, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        c[:, j] = (grad_fn(pi0, theta0 + e)
                   - grad_fn(pi0, theta0 - e)) / (2 * step)
    return h_pi, c


def full_hessian(stats, mode, grad_fn, pi0, theta0, weights=None,
                 step=1e-5):
    """Dense (H, C) combining the frozen-trajectory FD Jacobians with the
    analytic score outer products, so the sampling distribution's own
    dependence on (pi, theta) is included."""
    w = _weights(stats, weights)
    h_fd, c_fd = fd_jacobians(grad_fn, pi0, theta0, step=step)
    n = h_fd.shape[0]
    d = c_fd.shape[1]
    h_outer = np.zeros((n, n))
    c_outer = np.zeros((n, d))
    for wi, s in zip(w, stats):
        if mode == "pg":
            term = s.g_phi
        else:
            term = s.delta * s.g_delta_pi + 0.5 * s.delta ** 2 * s.g_logp_pi
        h_outer += wi * np.outer(term, s.g_logp_pi)
        c_outer += wi * np.outer(term, s.g_logp_theta)
    return h_fd + h_outer, c_fd + c_outer


def _dense_solve(h, g):
    try:
        return np.linalg.solve(h, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(h, g, rcond=None)[0]


def decision_gradient(g_pi, stats, mode, strategy, theta_dim, *,
                      c_mag=1.0, weights=None, include_delta_terms=False,
                      full_parts=None):
    """theta-space ascent direction -(H^{-1} g_pi)^T C.

    ``full_parts`` must be the (H, C) pair from :func:`full_hessian` when
    strategy is "full". Returns (g_theta, diagnostics).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    g_pi = np.asarray(g_pi, dtype=np.float64)
    diag = {"ridge_applied": False}
    if strategy == "identity":
        y = identity_solve(mode, g_pi, c_mag)
    elif strategy == "woodbury":
        lr = build_lowrank(stats, mode, c_mag=c_mag, weights=weights)
        y, wd = woodbury_solve(lr, g_pi, with_diagnostics=True)
        diag.update(wd)
    else:
        if full_parts is None:
            raise ValueError("full strategy needs precomputed (H, C)")
        h, c = full_parts
        y = _dense_solve(h, g_pi)
        g_theta = -(c.T @ y)
        return g_theta, diag
    g_theta = -cross_vjp(stats, mode, y, theta_dim, weights=weights,
                         include_delta_terms=include_delta_terms)
    return g_theta, diag
