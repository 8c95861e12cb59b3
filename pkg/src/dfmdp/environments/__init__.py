"""Benchmark MDP families: generation, simulation, behavior policies.

Latent event records follow one convention across domains: a record
(entity, outcome, param_index) with param_index >= 0 is a Bernoulli draw
whose success probability is theta[param_index] (outcome 1 = success);
param_index -1 marks a known-constant event (snare removal rolls) that
contributes to the trajectory likelihood but not to d log p / d theta.
"""
from __future__ import annotations

import numpy as np

from ..mdp_core import MdpInstance, Trajectory, generate_features
from . import gridworld, snare, tb

_MODULES = {"gridworld": gridworld, "snare": snare, "tb": tb}
_ENVS = {"gridworld": gridworld.GridworldEnv, "snare": snare.SnareEnv,
         "tb": tb.TbEnv}


def default_structure(domain: str, **overrides) -> dict:
    if domain not in _MODULES:
        raise ValueError(f"unknown domain {domain!r}")
    if domain == "gridworld":
        s = gridworld.default_structure(overrides.pop("side", 5))
    else:
        s = _MODULES[domain].default_structure()
    s.update(overrides)
    return s


def generate_instance(domain: str, seed: int, structure: dict | None = None,
                      noise_scale: float = 3.0,
                      feature_seed: int | None = None) -> MdpInstance:
    """Draw true parameters and attach noisy features, all seed-determined.

    ``feature_seed`` pins the feature network; passing the same value for
    several instances gives them a common feature-parameter relationship
    (the corruption noise stays per-instance). Default: a fresh network per
    instance.
    """
    if domain not in _MODULES:
        raise ValueError(f"unknown domain {domain!r}")
    structure = dict(structure or default_structure(domain))
    rng = np.random.default_rng(seed)
    theta, meta = _MODULES[domain].sample_params(structure, rng)
    inst_seed = int(rng.integers(2 ** 31))
    net_seed = inst_seed if feature_seed is None else int(feature_seed)
    features = generate_features(_feature_inputs(domain, theta, structure),
                                 net_seed, noise_scale=noise_scale,
                                 noise_seed=inst_seed)
    return MdpInstance(domain=domain, seed=seed, true_params=theta,
                       features=features, structure=structure, meta=meta)


def _feature_inputs(domain: str, theta: np.ndarray, structure: dict):
    if domain == "tb":
        return np.asarray(theta).reshape(structure["n_patients"], 8)
    return np.asarray(theta)[:, None]


def make_env(domain: str, theta: np.ndarray, structure: dict):
    return _ENVS[domain](theta, structure)


def simulate_trajectories(domain: str, theta: np.ndarray, structure: dict,
                          policy, count: int, seed: int,
                          record_latents: bool = True) -> list[Trajectory]:
    """Roll out ``count`` episodes under ``policy`` on the theta-simulator.

    Per-trajectory RNG streams are spawned from the seed, so results do not
    depend on simulation order. Each step stores the acting policy's
    probability of the chosen action.
    """
    env = make_env(domain, theta, structure)
    h = structure["horizon"]
    int_states = domain == "gridworld"
    streams = np.random.SeedSequence(seed).spawn(count)
    out = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        obs = env.reset(rng)
        states = (np.empty(h, dtype=np.int64) if int_states
                  else np.empty((h, len(obs))))
        actions = np.empty(h, dtype=np.int64)
        rewards = np.empty(h)
        bps = np.empty(h)
        events = []
        for t in range(h):
            probs = policy.action_probs(obs)
            a = _sample_action(probs, rng)
            if probs[a] <= 0.0:
                raise ValueError(
                    "simulate_trajectories: chosen action has zero probability")
            states[t] = obs
            actions[t] = a
            bps[t] = probs[a]
            obs, r, ev = env.step(a, rng, record=record_latents)
            rewards[t] = r
            events.append(ev)
        out.append(Trajectory(states, actions, rewards, bps,
                              events if record_latents else None,
                              obs if not int_states else int(obs)))
    return out


def _sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"),
                   len(probs) - 1))


def behavior_policy(kind: str, instance: MdpInstance, seed: int = 0):
    """random -> uniform; near_optimal -> extended solver run on theta*."""
    from .. import solvers

    if kind == "random":
        return solvers.UniformPolicy(instance.structure["n_actions"])
    if kind == "near_optimal":
        if instance.true_params is None:
            raise ValueError("near_optimal behavior needs true parameters")
        return solvers.solve_near_optimal(instance, seed).policy
    raise ValueError(f"unknown behavior kind {kind!r}")


def build_dataset(domain: str, regime: str, seed: int,
                  counts: tuple[int, int, int] = (7, 1, 2),
                  n_trajectories: int = 100,
                  structure: dict | None = None):
    """Generate instances with logged trajectories and assign splits.

    ``counts`` gives (train, val, test) instance counts; every instance logs
    ``n_trajectories`` episodes under the chosen behavior regime. All
    randomness derives from ``seed``, so identical arguments reproduce the
    dataset exactly. One feature network is sampled per dataset and shared
    by every instance: the feature-parameter relationship is a fixed (if
    noisy) map across the splits, which is what makes a model fitted on the
    train split meaningful on held-out instances.
    """
    from ..mdp_core import Dataset, DatasetEntry

    if any(c < 0 for c in counts) or counts[0] < 1:
        raise ValueError("counts must be non-negative with >= 1 train")
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory per instance")
    splits = (["train"] * counts[0] + ["val"] * counts[1]
              + ["test"] * counts[2])
    feature_seed = int(
        np.random.SeedSequence([seed, 0, 3]).generate_state(1)[0])
    entries = []
    for i, split in enumerate(splits):
        inst_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        inst = generate_instance(domain, inst_seed, structure,
                                 feature_seed=feature_seed)
        beh = behavior_policy(
            regime, inst,
            seed=int(np.random.SeedSequence([seed, i, 2]).generate_state(1)[0]))
        trajs = simulate_trajectories(
            domain, inst.true_params, inst.structure, beh, n_trajectories,
            seed=int(np.random.SeedSequence([seed, i, 1]).generate_state(1)[0]))
        entries.append(DatasetEntry(inst, trajs, split))
    return Dataset(domain, regime, seed, entries,
                   config={"counts": list(counts),
                           "n_trajectories": n_trajectories})


def latent_log_prob(traj: Trajectory, theta: np.ndarray, domain: str) -> float:
    """Log-likelihood of the recorded latent transition events under theta."""
    theta = np.asarray(theta, dtype=np.float64)
    total = 0.0
    for step in traj.events:
        for _, outcome, pidx in step:
            if pidx >= 0:
                p = theta[pidx]
                total += np.log(p) if outcome else np.log1p(-p)
            elif domain == "snare":
                total += snare.known_event_log_prob(outcome)
            else:
                raise ValueError(
                    f"domain {domain!r} has no known-constant events")
    return float(total)


def latent_score(traj: Trajectory, theta: np.ndarray, d: int) -> np.ndarray:
    """d log p / d theta of the recorded events, as a flat length-d vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros(d)
    for step in traj.events:
        for _, outcome, pidx in step:
            if pidx >= 0:
                g[pidx] += 1.0 / theta[pidx] if outcome \
                    else -1.0 / (1.0 - theta[pidx])
    return g


def reward_theta_grads(traj: Trajectory, domain: str, structure: dict):
    """Per-step d(reward)/d(theta) rows; None when rewards are theta-free."""
    if domain == "gridworld":
        return gridworld.reward_theta_grads(traj, structure)
    return None


def theta_dim(domain: str, structure: dict) -> int:
    if domain == "gridworld":
        return structure["side"] ** 2
    if domain == "snare":
        return structure["n_sites"]
    return structure["n_patients"] * 8
