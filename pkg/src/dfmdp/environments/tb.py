"""Medication-adherence POMDP: 5 patients, hidden per-patient transitions.

Each step a worker intervenes on one patient, observing that patient's true
adherence state. All patients then transition through their 2x2x2 tensor
T[state, action, next]; the step reward is the number of patients adhering
after the transition. The policy observes per-patient adherence beliefs,
filtered with the simulator's theta.

Flat parameter layout: theta[p*8 + s*4 + a*2 + ns] = T_p(ns | s, a).
"""
import numpy as np


def default_structure() -> dict:
    return {"n_patients": 5, "horizon": 30, "gamma": 0.95, "n_actions": 5}


def flat_index(patient: int, s: int, a: int, ns: int) -> int:
    return patient * 8 + s * 4 + a * 2 + ns


def sample_params(structure: dict, rng: np.random.Generator):
    """Base passive adherence rows plus an intervention effect e ~ U(0, 0.4)
    per (patient, state): added to P(adhere | action), subtracted from
    P(adhere | no action), clipped to [0.05, 0.95], complements implied."""
    n = structure["n_patients"]
    tensors = np.empty((n, 2, 2, 2))
    for p in range(n):
        base = np.array([rng.uniform(0.1, 0.5), rng.uniform(0.4, 0.9)])
        effect = rng.uniform(0.0, 0.4, size=2)
        for s in range(2):
            p1_passive = np.clip(base[s] - effect[s], 0.05, 0.95)
            p1_active = np.clip(base[s] + effect[s], 0.05, 0.95)
            tensors[p, s, 0] = (1.0 - p1_passive, p1_passive)
            tensors[p, s, 1] = (1.0 - p1_active, p1_active)
    return tensors.ravel(), {}


def belief_step(b: np.ndarray, theta_flat: np.ndarray, action: int,
                observed_state: int) -> np.ndarray:
    """Set the intervened patient's belief to the observation, then advance
    everyone through their transition row mixture."""
    n = b.shape[0]
    if not 0 <= action < n:
        raise IndexError(f"belief_step: patient {action} out of range")
    t = np.asarray(theta_flat, dtype=np.float64).reshape(n, 2, 2, 2)
    b = b.astype(np.float64).copy()
    b[action] = float(observed_state)
    out = np.empty_like(b)
    for i in range(n):
        a = 1 if i == action else 0
        out[i] = b[i] * t[i, 1, a, 1] + (1.0 - b[i]) * t[i, 0, a, 1]
    return out


class TbEnv:
    """Belief observations over 5 patients; true adherence underneath."""

    def __init__(self, theta: np.ndarray, structure: dict):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.structure = structure
        self.n_patients = structure["n_patients"]
        self.n_actions = self.n_patients
        self.horizon = structure["horizon"]
        self.tensor = self.theta.reshape(self.n_patients, 2, 2, 2)
        self.state = np.zeros(self.n_patients, dtype=np.int64)
        self.belief = np.zeros(self.n_patients)

    def reset(self, rng=None):
        self.state[:] = 0
        self.belief[:] = 0.0
        return self.belief.copy()

    def step(self, action: int, rng: np.random.Generator,
             record: bool = False):
        observed = int(self.state[action])
        events = []
        new_state = np.empty_like(self.state)
        for i in range(self.n_patients):
            a = 1 if i == action else 0
            p1 = self.tensor[i, self.state[i], a, 1]
            ns = int(rng.random() < p1)
            new_state[i] = ns
            if record:
                # parameter index always points at the P(next=1) entry; the
                # outcome picks between it and its complement
                events.append((i, ns, flat_index(i, int(self.state[i]), a, 1)))
        reward = float(new_state.sum())
        self.belief = belief_step(self.belief, self.theta, action, observed)
        self.state = new_state
        return self.belief.copy(), reward, events
