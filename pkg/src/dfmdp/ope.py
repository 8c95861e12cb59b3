"""Off-policy evaluation: consistent weighted per-decision importance
sampling (CWPDIS) with an effective-sample-size penalty.

    V      = sum_t gamma^t * (sum_i r_it rho_it) / (sum_i rho_it)
    ESS    = sum_t (sum_i rho_it)^2 / (sum_i rho_it^2)
    Eval   = V - lambda_ess / sqrt(ESS)

with rho_it the cumulative importance ratio of trajectory i up to step t
(candidate probability over logged behavior probability). Both V and ESS
are invariant to rescaling all rho at a fixed timestep, so ratios are
computed in log space and shifted by the per-timestep max before
exponentiating; the shift is constant under differentiation because the
scale direction has zero directional derivative.

A candidate probability of zero on a logged action zeroes that
trajectory's weight from that step onward; the metric stays defined as
long as each timestep keeps at least one positive weight. The gradient
path is stricter: eval_tape/eval_grad refuse zero probabilities, where
the metric is not differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward_grad
from .mdp_core import Trajectory


@dataclass
class OpeReport:
    value: float            # V - lambda_ess / sqrt(ESS)
    v_cwpdis: float
    ess: float
    lambda_ess: float
    horizon: int
    n_trajectories: int
    rho_min: float = np.nan
    rho_max: float = np.nan
    ess_per_t: np.ndarray | None = None


def _stacked(trajectories: list[Trajectory]):
    h = trajectories[0].horizon
    for t in trajectories:
        if t.horizon != h:
            raise ValueError("eval_metric: trajectories of mixed horizon")
    states = [np.asarray(t.states) for t in trajectories]
    actions = np.stack([t.actions for t in trajectories])
    rewards = np.stack([t.rewards for t in trajectories])
    bps = np.stack([t.behavior_probs for t in trajectories])
    return states, actions, rewards, bps, h


def _log_step_ratios(policy, states, actions, bps):
    """(k, h) per-step log ratios; -inf rows mark logged actions the
    candidate policy gives zero probability (that trajectory's weight is
    zero from there on)."""
    k, h = actions.shape
    if np.any(bps <= 0.0):
        raise ValueError("importance ratios need positive behavior "
                         "probabilities")
    flat_states = np.concatenate([np.asarray(s) for s in states], axis=0)
    probs = policy.action_probs_batch(flat_states)
    pi = probs[np.arange(k * h), actions.ravel()].reshape(k, h)
    with np.errstate(divide="ignore"):
        return np.log(pi) - np.log(bps)


def importance_ratios(policy, trajectories: list[Trajectory]) -> np.ndarray:
    """(k, h) cumulative per-decision importance ratios, unshifted."""
    states, actions, _, bps, _ = _stacked(trajectories)
    return np.exp(
        np.cumsum(_log_step_ratios(policy, states, actions, bps), axis=1))


def eval_metric(policy, trajectories: list[Trajectory], gamma: float,
                lambda_ess: float = 1.0,
                ratio_cap: float | None = None) -> OpeReport:
    """CWPDIS value with ESS penalty against logged trajectories.

    ``ratio_cap`` optionally clips per-step ratios (diagnostics only; the
    default evaluation never clips).
    """
    states, actions, rewards, bps, h = _stacked(trajectories)
    k = actions.shape[0]
    step = _log_step_ratios(policy, states, actions, bps)
    if ratio_cap is not None:
        step = np.minimum(step, np.log(ratio_cap))
    logc = np.cumsum(step, axis=1)
    shift = logc.max(axis=0, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise FloatingPointError(
            "eval_metric: every logged trajectory has zero weight at some "
            "timestep (metric undefined)")
    rho = np.exp(logc - shift)
    w = rho.sum(axis=0)
    v_t = (rewards * rho).sum(axis=0) / w
    disc = gamma ** np.arange(1, h + 1)
    v = float(disc @ v_t)
    ess_t = w * w / (rho * rho).sum(axis=0)
    ess = float(ess_t.sum())
    value = v - (lambda_ess / np.sqrt(ess) if lambda_ess else 0.0)
    raw = np.exp(logc)
    return OpeReport(float(value), v, ess, lambda_ess, h, k,
                     rho_min=float(raw.min()), rho_max=float(raw.max()),
                     ess_per_t=ess_t)


def eval_tape(policy, trajectories: list[Trajectory], gamma: float,
              lambda_ess: float = 1.0):
    """Record Eval on a tape; returns (tape, refs, out_ref)."""
    states, actions, rewards, bps, h = _stacked(trajectories)
    k = actions.shape[0]
    flat_states = np.concatenate([np.asarray(s) for s in states], axis=0)

    chosen = policy.action_probs_batch(flat_states)[np.arange(k * h),
                                                    actions.ravel()]
    if np.any(chosen <= 0.0):
        raise FloatingPointError(
            "eval_grad: candidate policy gives a logged action zero "
            "probability; the metric is not differentiable there")

    tape = Tape()
    refs = policy.register(tape)
    lp = policy.tape_log_probs(tape, refs, flat_states, actions.ravel())
    lp = tape.reshape(lp, (k, h))
    diff = tape.affine(lp, None, -np.log(bps))
    cum = tape.affine(diff, np.triu(np.ones((h, h))))

    shift = tape.value(cum).max(axis=0)          # constant: scale direction
    centered = tape.affine(cum, None, -shift)    # has zero derivative
    rho = tape.exp(centered)

    w = tape.reduce_sum(rho, axis=0)
    rw = tape.reduce_sum(tape.mul(rho, rewards), axis=0)
    v_t = tape.div(rw, w)
    disc = gamma ** np.arange(1, h + 1)
    v = tape.reduce_sum(tape.mul(v_t, disc))

    if lambda_ess:
        r2 = tape.reduce_sum(tape.square(rho), axis=0)
        ess = tape.reduce_sum(tape.div(tape.square(w), r2))
        inv_sqrt = tape.exp(tape.mul(tape.log(ess), np.array(-0.5)))
        out = tape.affine(v, None, tape.mul(inv_sqrt, np.array(-lambda_ess)))
    else:
        out = v
    return tape, refs, out


def eval_grad(policy, trajectories: list[Trajectory], gamma: float,
              lambda_ess: float = 1.0):
    """(Eval value, gradient map by policy segment)."""
    tape, _, out = eval_tape(policy, trajectories, gamma, lambda_ess)
    grads = backward_grad(tape, out)
    return float(tape.value(out)), grads
