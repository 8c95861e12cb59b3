"""Snare-removal POMDP: 20 sites, hidden arrival probabilities.

A ranger visits one site per step. A present snare is found and removed
with probability 0.9 (reward +1); any other visit outcome earns -1. Empty
sites gain a snare with the site's arrival probability each step (at most
one snare per site). The policy observes a per-site belief of snare
presence, filtered with the same theta the simulator runs on.
"""
import numpy as np

REMOVAL_SUCCESS = 0.9
MISS_LIKELIHOOD = 0.1  # chance a present snare goes unnoticed at a visit


def default_structure() -> dict:
    return {"n_sites": 20, "horizon": 20, "gamma": 0.95, "n_actions": 20}


def sample_params(structure: dict, rng: np.random.Generator):
    """Arrival probabilities: 4 high-risk sites ~ N(0.8, 0.1), the other 16
    ~ N(0.1, 0.05), all clipped to [0.01, 0.99]."""
    n = structure["n_sites"]
    n_high = max(1, int(round(0.2 * n)))
    theta = rng.normal(0.1, 0.05, size=n)
    high = rng.choice(n, size=n_high, replace=False)
    theta[high] = rng.normal(0.8, 0.1, size=n_high)
    theta = np.clip(theta, 0.01, 0.99)
    return theta, {"high_risk_sites": sorted(int(s) for s in high)}


def posterior_not_found(b: float | np.ndarray):
    """Belief after visiting and not finding a snare (miss likelihood 0.1)."""
    return MISS_LIKELIHOOD * b / (MISS_LIKELIHOOD * b + (1.0 - b))


def belief_step(b: np.ndarray, p: np.ndarray, action: int, found: bool):
    """Exact filter update: visit resolution at the acted site, then the
    arrival mixture b' = b + (1 - b) p everywhere."""
    if not 0 <= action < b.shape[0]:
        raise IndexError(f"belief_step: site {action} out of range")
    b = b.astype(np.float64).copy()
    b[action] = 0.0 if found else posterior_not_found(b[action])
    return b + (1.0 - b) * p


class SnareEnv:
    """Belief-state observations; true occupancy evolves underneath."""

    def __init__(self, theta: np.ndarray, structure: dict):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.structure = structure
        self.n_sites = structure["n_sites"]
        self.n_actions = self.n_sites
        self.horizon = structure["horizon"]
        self.occupancy = np.zeros(self.n_sites, dtype=bool)
        self.belief = np.zeros(self.n_sites)

    def reset(self, rng=None):
        self.occupancy[:] = False
        self.belief[:] = 0.0
        return self.belief.copy()

    def step(self, action: int, rng: np.random.Generator,
             record: bool = False):
        events = []
        found = False
        if self.occupancy[action]:
            found = bool(rng.random() < REMOVAL_SUCCESS)
            if record:
                events.append((action, int(found), -1))
            if found:
                self.occupancy[action] = False
        reward = 1.0 if found else -1.0

        vacant = ~self.occupancy
        arrivals = rng.random(self.n_sites) < self.theta
        if record:
            for s in np.flatnonzero(vacant):
                events.append((int(s), int(arrivals[s]), int(s)))
        self.occupancy[vacant] = arrivals[vacant]

        self.belief = belief_step(self.belief, self.theta, action, found)
        return self.belief.copy(), reward, events


def known_event_log_prob(outcome: int) -> float:
    """Log-probability of a recorded constant-probability (removal) event."""
    return float(np.log(REMOVAL_SUCCESS if outcome else 1.0 - REMOVAL_SUCCESS))
