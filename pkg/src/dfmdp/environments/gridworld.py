"""5x5 cliff gridworld with hidden cell rewards and deterministic moves.

Cells index row-major from the bottom-left: cell = y * side + x. The agent
starts at cell 0; the safe cell is the top-right corner. Rewards are the
hidden parameter vector theta (one entry per cell) and each step earns the
reward of the cell occupied after the move. Moves off the grid leave the
agent in place.
"""
import numpy as np

N_ACTIONS = 5  # north, south, east, west, stay


def default_structure(side: int = 5) -> dict:
    return {"side": side, "horizon": 20, "gamma": 0.95, "n_actions": N_ACTIONS}


def next_state_table(side: int) -> np.ndarray:
    table = np.empty((side * side, N_ACTIONS), dtype=np.int64)
    for s in range(side * side):
        y, x = divmod(s, side)
        table[s, 0] = s + side if y < side - 1 else s   # north
        table[s, 1] = s - side if y > 0 else s          # south
        table[s, 2] = s + 1 if x < side - 1 else s      # east
        table[s, 3] = s - 1 if x > 0 else s             # west
        table[s, 4] = s                                 # stay
    return table


def sample_params(structure: dict, rng: np.random.Generator):
    """Cell rewards: safe ~ N(5,1), an exact 20% cliff share ~ N(-10,1),
    the rest ~ N(0,1). Start and safe cells are never cliffs."""
    side = structure["side"]
    n = side * side
    start, safe = 0, n - 1
    n_cliffs = int(round(0.2 * n))
    theta = rng.normal(0.0, 1.0, size=n)
    theta[safe] = rng.normal(5.0, 1.0)
    candidates = np.setdiff1d(np.arange(n), [start, safe])
    cliffs = rng.choice(candidates, size=n_cliffs, replace=False)
    theta[cliffs] = rng.normal(-10.0, 1.0, size=n_cliffs)
    meta = {"start_cell": start, "safe_cell": safe,
            "cliff_cells": sorted(int(c) for c in cliffs)}
    return theta, meta


class GridworldEnv:
    """Deterministic walk; reward of the entered cell; integer observations."""

    def __init__(self, theta: np.ndarray, structure: dict):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.structure = structure
        self.table = next_state_table(structure["side"])
        self.n_actions = N_ACTIONS
        self.horizon = structure["horizon"]
        self.state = 0

    def reset(self, rng=None):
        self.state = 0
        return self.state

    def step(self, action: int, rng=None, record: bool = False):
        ns = int(self.table[self.state, action])
        self.state = ns
        return ns, float(self.theta[ns]), []


def reward_theta_grads(traj, structure: dict) -> np.ndarray:
    """(h, n_cells) rows: d(reward at step t)/d(theta) = onehot(entered cell)."""
    side = structure["side"]
    h = traj.horizon
    out = np.zeros((h, side * side))
    states = np.asarray(traj.states)
    for t in range(h):
        entered = int(states[t + 1]) if t + 1 < h else int(traj.final_state)
        out[t, entered] = 1.0
    return out
