"""MDP solvers producing soft policies: tabular value iteration and DDQN.

Both solvers return a SolveResult whose policy is softmax(beta * Q). The
tabular path serves the deterministic gridworld; belief-state domains train
a Q-network (state-dim -> 64 -> 64 -> actions) with soft double-DQN
targets. Hot loops run in the selected kernel backend.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import _kernels
from .autodiff import ParamVector, Tape
from .mdp_core import save_checkpoint

DOMAIN_SOLVE = {
    "gridworld": {"beta": 0.1, "iters": 10000,
                  "near_beta": 1.0, "near_iters": 50000},
    "snare": {"beta": 1.0, "random_steps": 1000, "train_steps": 10000,
              "near_beta": 5.0, "near_steps": 50000},
    "tb": {"beta": 5.0, "random_steps": 1000, "train_steps": 10000,
           "near_beta": 20.0, "near_steps": 100000},
}

DDQN_DEFAULTS = {"batch": 32, "target_refresh": 100, "lr": 1e-3,
                 "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "hidden": 64}


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class UniformPolicy:
    """Equal probability over actions; the random behavior regime."""

    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def action_probs(self, state) -> np.ndarray:
        return np.full(self.n_actions, 1.0 / self.n_actions)

    def action_probs_batch(self, states) -> np.ndarray:
        n = len(states)
        return np.full((n, self.n_actions), 1.0 / self.n_actions)


class TabularSoftPolicy:
    """softmax(beta * Q[s, :]) over a dense Q-table."""

    def __init__(self, q: np.ndarray, beta: float):
        self.q = np.asarray(q, dtype=np.float64)
        self.beta = float(beta)
        self.n_actions = self.q.shape[1]

    def action_probs(self, state) -> np.ndarray:
        return _softmax(self.beta * self.q[int(state)])

    def action_probs_batch(self, states) -> np.ndarray:
        return _softmax(self.beta * self.q[np.asarray(states, dtype=np.int64)])

    def param_vector(self) -> ParamVector:
        return ParamVector({"q": self.q})

    def with_flat(self, flat: np.ndarray) -> "TabularSoftPolicy":
        return TabularSoftPolicy(flat.reshape(self.q.shape), self.beta)

    def step_log_prob_grads(self, states, actions) -> np.ndarray:
        """(T, S*A) rows of d log pi(a_t|s_t) / d q, analytic:
        beta * (onehot(a_t) - pi(s_t, .)) in the s_t block."""
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        n_states, n_actions = self.q.shape
        out = np.zeros((states.shape[0], n_states * n_actions))
        probs = self.action_probs_batch(states)
        for t, (s, a) in enumerate(zip(states, actions)):
            row = -probs[t].copy()
            row[a] += 1.0
            out[t, s * n_actions:(s + 1) * n_actions] = self.beta * row
        return out

    # -- tape hooks ------------------------------------------------------

    def register(self, tape: Tape) -> dict:
        return {"q": tape.param("q", self.q)}

    def tape_q_rows(self, tape: Tape, refs: dict, states) -> int:
        """(T, A) node of Q rows for integer states."""
        sel = np.zeros((len(states), self.q.shape[0]))
        sel[np.arange(len(states)), np.asarray(states, dtype=np.int64)] = 1.0
        return tape.affine(tape.const(sel), refs["q"])

    def tape_log_probs(self, tape: Tape, refs: dict, states, actions) -> int:
        """(T,) node of log pi(a_t | s_t)."""
        rows = self.tape_q_rows(tape, refs, states)
        ls = tape.log_softmax(rows, beta=self.beta)
        onehot = np.zeros((len(states), self.n_actions))
        onehot[np.arange(len(states)), np.asarray(actions, dtype=np.int64)] = 1.0
        return tape.reduce_sum(tape.mul(ls, onehot), axis=1)


class MlpSoftPolicy:
    """softmax(beta * Q_w(s)) with a two-hidden-layer Q-network."""

    def __init__(self, flat: np.ndarray, dims: tuple, beta: float):
        self.flat = np.asarray(flat, dtype=np.float64)
        self.dims = tuple(int(d) for d in dims)
        self.beta = float(beta)
        self.n_actions = self.dims[3]

    def action_probs(self, state) -> np.ndarray:
        q = _kernels.mlp_q(np.asarray(state, dtype=np.float64)[None, :],
                           self.flat, self.dims)[0]
        return _softmax(self.beta * q)

    def action_probs_batch(self, states) -> np.ndarray:
        q = _kernels.mlp_q(np.asarray(states, dtype=np.float64),
                           self.flat, self.dims)
        return _softmax(self.beta * q)

    def param_vector(self) -> ParamVector:
        from ._kernels.reference import mlp_slices
        slices, total = mlp_slices(*self.dims)
        return ParamVector({name: self.flat[sl].reshape(shape)
                            for name, sl, shape in slices})

    def with_flat(self, flat: np.ndarray) -> "MlpSoftPolicy":
        return MlpSoftPolicy(flat, self.dims, self.beta)

    def step_log_prob_grads(self, states, actions) -> np.ndarray:
        raise NotImplementedError(
            "per-step analytic log-prob gradients are only kept for "
            "tabular policies")

    # -- tape hooks ------------------------------------------------------

    def register(self, tape: Tape) -> dict:
        pv = self.param_vector()
        return {name: tape.param(name, pv.get(name)) for name in pv.names}

    def tape_q_rows(self, tape: Tape, refs: dict, states) -> int:
        x = tape.const(np.asarray(states, dtype=np.float64))
        h = tape.relu(tape.affine(x, refs["w1"], refs["b1"]))
        h = tape.relu(tape.affine(h, refs["w2"], refs["b2"]))
        return tape.affine(h, refs["w3"], refs["b3"])

    def tape_log_probs(self, tape: Tape, refs: dict, states, actions) -> int:
        rows = self.tape_q_rows(tape, refs, states)
        ls = tape.log_softmax(rows, beta=self.beta)
        onehot = np.zeros((len(states), self.n_actions))
        onehot[np.arange(len(states)), np.asarray(actions, dtype=np.int64)] = 1.0
        return tape.reduce_sum(tape.mul(ls, onehot), axis=1)


class SolveResult:
    """Converged policy plus solve diagnostics."""

    def __init__(self, policy, domain: str, iterations: int,
                 final_residual: float, residual_tail: np.ndarray,
                 meta: dict | None = None):
        self.policy = policy
        self.domain = domain
        self.beta = policy.beta
        self.iterations = iterations
        self.final_residual = float(final_residual)
        self.residual_tail = residual_tail
        self.meta = dict(meta or {})

    def checksum(self) -> str:
        if isinstance(self.policy, TabularSoftPolicy):
            payload = self.policy.q.tobytes()
        else:
            payload = self.policy.flat.tobytes()
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        if isinstance(self.policy, TabularSoftPolicy):
            segments = {"q": self.policy.q}
            meta = {"policy": "tabular"}
        else:
            segments = self.policy.param_vector().segments()
            meta = {"policy": "mlp", "dims": list(self.policy.dims)}
        meta.update({"beta": self.beta, "iterations": self.iterations,
                     "final_residual": self.final_residual})
        save_checkpoint(path, "solve", self.domain, segments, meta)


# -- tabular soft value iteration -------------------------------------------


def soft_value_iteration(rewards: np.ndarray, next_idx: np.ndarray,
                         gamma: float, beta: float, iters: int = 10000,
                         q0: np.ndarray | None = None,
                         domain: str = "gridworld") -> SolveResult:
    """Iterate Q <- r + gamma * softmax-weighted next Q to a fixed budget.

    ``rewards`` holds one entry per state (reward of entering that state);
    ``next_idx`` is the (S, A) deterministic successor table.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    next_idx = np.ascontiguousarray(next_idx, dtype=np.int64)
    if iters < 1:
        raise ValueError("soft_value_iteration: iters must be >= 1")
    reward_next = rewards[next_idx]
    q = (np.zeros_like(reward_next) if q0 is None
         else np.array(q0, dtype=np.float64))
    tail = np.zeros(min(100, iters))
    _kernels.soft_vi_loop(reward_next, next_idx, float(gamma), float(beta),
                          int(iters), q, tail)
    return SolveResult(TabularSoftPolicy(q, beta), domain, int(iters),
                       tail[-1], tail)


# -- soft double DQN ----------------------------------------------------------


class _Replay:
    """Unbounded append-only replay buffer over flat float states."""

    def __init__(self, state_dim: int, capacity: int):
        self.s = np.empty((capacity, state_dim))
        self.a = np.empty(capacity, dtype=np.int64)
        self.r = np.empty(capacity)
        self.sn = np.empty((capacity, state_dim))
        self.d = np.empty(capacity)
        self.size = 0

    def push(self, s, a, r, sn, done):
        if self.size == self.s.shape[0]:
            for name in ("s", "a", "r", "sn", "d"):
                arr = getattr(self, name)
                grown = np.empty((arr.shape[0] * 2,) + arr.shape[1:],
                                 dtype=arr.dtype)
                grown[:arr.shape[0]] = arr
                setattr(self, name, grown)
        i = self.size
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.sn[i] = sn
        self.d[i] = done
        self.size += 1


def init_mlp_flat(dims: tuple, rng: np.random.Generator) -> np.ndarray:
    from ._kernels.reference import mlp_slices
    slices, total = mlp_slices(*dims)
    flat = np.zeros(total)
    for name, sl, shape in slices:
        if name.startswith("w"):
            flat[sl] = rng.normal(scale=shape[0] ** -0.5,
                                  size=int(np.prod(shape)))
    return flat


def soft_ddqn(env, gamma: float, beta: float, seed: int,
              random_steps: int = 1000, train_steps: int = 10000,
              warm_start: np.ndarray | None = None,
              hidden: int | None = None) -> SolveResult:
    """Train a soft double-DQN policy on the environment's belief states.

    Rollout actions are sampled from the current soft policy (uniform during
    the warm-up phase); the target network refreshes every 100 updates.
    Deterministic given (env parameters, seed) for a fixed backend.
    """
    cfg = DDQN_DEFAULTS
    h = hidden or cfg["hidden"]
    rng = np.random.default_rng(seed)
    probe = env.reset(rng)
    state_dim = probe.shape[0]
    dims = (state_dim, h, h, env.n_actions)

    flat = (init_mlp_flat(dims, rng) if warm_start is None
            else np.array(warm_start, dtype=np.float64))
    target = flat.copy()
    adam_m = np.zeros_like(flat)
    adam_v = np.zeros_like(flat)

    replay = _Replay(state_dim, max(1024, random_steps + train_steps + 1))
    batch = cfg["batch"]
    if random_steps < batch:
        raise ValueError("soft_ddqn: need at least one minibatch of warm-up")

    obs = env.reset(rng)
    t_ep = 0
    for _ in range(random_steps):
        a = int(rng.integers(env.n_actions))
        nxt, r, _ = env.step(a, rng)
        t_ep += 1
        done = t_ep == env.horizon
        replay.push(obs, a, r, nxt, float(done))
        obs = nxt
        if done:
            obs = env.reset(rng)
            t_ep = 0

    tail = np.zeros(min(100, max(train_steps, 1)))
    loss = 0.0
    for step in range(train_steps):
        q = _kernels.mlp_q(obs[None, :], flat, dims)[0]
        probs = _softmax(beta * q)
        a = int(min(np.searchsorted(np.cumsum(probs), rng.random(),
                                    side="right"), env.n_actions - 1))
        nxt, r, _ = env.step(a, rng)
        t_ep += 1
        done = t_ep == env.horizon
        replay.push(obs, a, r, nxt, float(done))
        obs = nxt
        if done:
            obs = env.reset(rng)
            t_ep = 0

        idx = rng.integers(0, replay.size, batch)
        loss = _kernels.ddqn_step(
            flat, target, adam_m, adam_v, step + 1,
            np.ascontiguousarray(replay.s[idx]),
            np.ascontiguousarray(replay.a[idx]),
            np.ascontiguousarray(replay.r[idx]),
            np.ascontiguousarray(replay.sn[idx]),
            np.ascontiguousarray(replay.d[idx]),
            float(gamma), float(beta), cfg["lr"], cfg["beta1"], cfg["beta2"],
            cfg["eps"], dims)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"soft_ddqn: non-finite loss at training step {step}")
        if train_steps - step <= tail.shape[0]:
            tail[tail.shape[0] - (train_steps - step)] = loss
        if (step + 1) % cfg["target_refresh"] == 0:
            target[:] = flat

    return SolveResult(MlpSoftPolicy(flat, dims, beta), "", train_steps,
                       loss, tail)


# -- dispatch -----------------------------------------------------------------


def solve_instance(domain: str, theta: np.ndarray, structure: dict,
                   seed: int = 0, warm_start: np.ndarray | None = None,
                   iters: int | None = None, random_steps: int | None = None,
                   train_steps: int | None = None,
                   beta: float | None = None) -> SolveResult:
    """Forward solve pi*(theta) with the domain's defaults."""
    cfg = DOMAIN_SOLVE[domain]
    if domain == "gridworld":
        from .environments.gridworld import next_state_table

        res = soft_value_iteration(
            theta, next_state_table(structure["side"]), structure["gamma"],
            beta if beta is not None else cfg["beta"],
            iters if iters is not None else cfg["iters"],
            q0=warm_start)
        res.domain = domain
        return res
    from .environments import make_env

    env = make_env(domain, theta, structure)
    res = soft_ddqn(
        env, structure["gamma"], beta if beta is not None else cfg["beta"],
        seed,
        random_steps if random_steps is not None else cfg["random_steps"],
        train_steps if train_steps is not None else cfg["train_steps"],
        warm_start=warm_start)
    res.domain = domain
    return res


def solve_near_optimal(instance, seed: int = 0) -> SolveResult:
    """Extended-budget solve on true parameters (behavior-policy generation)."""
    cfg = DOMAIN_SOLVE[instance.domain]
    if instance.domain == "gridworld":
        return solve_instance(instance.domain, instance.true_params,
                              instance.structure, seed,
                              beta=cfg["near_beta"], iters=cfg["near_iters"])
    return solve_instance(instance.domain, instance.true_params,
                          instance.structure, seed, beta=cfg["near_beta"],
                          train_steps=cfg["near_steps"])


def policy_log_prob(policy, state, action: int):
    """(log pi(a|s), gradient by parameter segment) at one state-action."""
    tape = Tape()
    refs = policy.register(tape)
    out = tape.reduce_sum(
        policy.tape_log_probs(tape, refs, [state], [action]))
    from .autodiff import backward_grad

    grads = backward_grad(tape, out)
    return float(tape.value(out)), grads
