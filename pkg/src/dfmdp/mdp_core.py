"""Problem instances, feature generation, the predictive model, persistence.

A dataset holds benchmark instances (true parameters, per-entity features,
known structure) plus logged trajectory sets with split labels. Files are a
single self-describing JSON tree with typed float arrays; datasets are
versioned "dfmdp-dataset/1" and model checkpoints "dfmdp-model/1".
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamVector, Tape, backward_grad

DOMAINS = ("gridworld", "snare", "tb")
FEATURE_DIM = 16
DATASET_FORMAT = "dfmdp-dataset/1"
MODEL_FORMAT = "dfmdp-model/1"


class DatasetFormatError(ValueError):
    """File is not a readable dataset/checkpoint of a supported version."""


class DatasetInvariantError(ValueError):
    """File parsed but carries values that violate domain invariants."""


class TestSplitAccessError(RuntimeError):
    """Trainer code path touched test-split trajectories."""

    __test__ = False  # bare exception, not a pytest collectable


# -- trajectories ----------------------------------------------------------


class Trajectory:
    """One logged episode, stored column-wise.

    states: (h,) int64 cell indices (gridworld) or (h, dim) float64 belief
    vectors; events: per-step list of latent records (entity id, outcome,
    parameter index), parameter index -1 for known-constant events.
    """

    __slots__ = ("states", "actions", "rewards", "behavior_probs", "events",
                 "final_state")

    def __init__(self, states, actions, rewards, behavior_probs, events,
                 final_state):
        self.states = states
        self.actions = np.asarray(actions, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.behavior_probs = np.asarray(behavior_probs, dtype=np.float64)
        self.events = events
        self.final_state = final_state

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass
class MdpInstance:
    """One benchmark problem: hidden true parameters plus observable parts."""

    domain: str
    seed: int
    true_params: np.ndarray          # flat layout, see environments
    features: np.ndarray             # (entities, 16)
    structure: dict                  # known structure: horizon, gamma, counts
    meta: dict = field(default_factory=dict)  # generation record, not model input


@dataclass
class DatasetEntry:
    instance: MdpInstance
    trajectories: list[Trajectory]
    split: str                       # train | val | test


class Dataset:
    """Instances plus logged trajectories, with split-aware access.

    Trainer code obtains trajectories only through :meth:`trajectories_for`,
    which refuses test-split entries outside an explicit
    :meth:`test_access` scope. With ``audit=True`` every access is logged as
    (index, split) for the audit tests.
    """

    def __init__(self, domain: str, regime: str, seed: int,
                 entries: list[DatasetEntry], config: dict | None = None):
        self.domain = domain
        self.regime = regime
        self.seed = seed
        self.entries = entries
        self.config = dict(config or {})
        self.audit = False
        self.audit_log: list[tuple[int, str]] = []
        self._test_unlocked = False

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def instance(self, i: int) -> MdpInstance:
        return self.entries[i].instance

    def split_of(self, i: int) -> str:
        return self.entries[i].split

    def trajectories_for(self, i: int) -> list[Trajectory]:
        entry = self.entries[i]
        if self.audit:
            self.audit_log.append((i, entry.split))
        if entry.split == "test" and not self._test_unlocked:
            raise TestSplitAccessError(
                f"instance {i} is in the test split; wrap evaluation code in "
                "Dataset.test_access()")
        return entry.trajectories

    @contextmanager
    def test_access(self):
        prev = self._test_unlocked
        self._test_unlocked = True
        try:
            yield self
        finally:
            self._test_unlocked = prev


# -- feature generation ----------------------------------------------------


def generate_features(theta_entries: np.ndarray, seed: int,
                      noise_scale: float = 3.0,
                      noise_seed: int | None = None) -> np.ndarray:
    """Map per-entity parameter blocks to noisy 16-dim feature rows.

    Each entity's block runs through a freshly sampled random network
    (two ReLU layers of 64 units, linear 16-dim output). Columns are
    standardized across entities, corrupted as x <- x + noise_scale * eps
    with unit Gaussian eps, and re-standardized. ``seed`` fixes the
    network; ``noise_seed`` (default: same stream as the network) draws
    the corruption, so one network can serve many parameter vectors with
    independent noise.
    """
    theta_entries = np.asarray(theta_entries, dtype=np.float64)
    if not np.all(np.isfinite(theta_entries)):
        raise ValueError("generate_features: non-finite parameter entries")
    if theta_entries.ndim == 1:
        theta_entries = theta_entries[:, None]
    n_entities, in_dim = theta_entries.shape
    if n_entities < 2:
        raise ValueError(
            "generate_features: need at least 2 entities to standardize")

    rng = np.random.default_rng(seed)
    w1 = rng.normal(scale=in_dim ** -0.5, size=(in_dim, 64))
    b1 = rng.normal(scale=1.0, size=64)
    w2 = rng.normal(scale=64 ** -0.5, size=(64, 64))
    b2 = rng.normal(scale=1.0, size=64)
    w3 = rng.normal(scale=64 ** -0.5, size=(64, FEATURE_DIM))

    h = np.maximum(theta_entries @ w1 + b1, 0.0)
    h = np.maximum(h @ w2 + b2, 0.0)
    x = h @ w3

    x = _standardize(x)
    noise_rng = rng if noise_seed is None else np.random.default_rng(noise_seed)
    x = x + noise_scale * noise_rng.standard_normal(x.shape)
    return _standardize(x)


def _standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (x - mean) / std


# -- predictive model -------------------------------------------------------


_HEADS = {"gridworld": ("linear", 1), "snare": ("sigmoid", 1),
          "tb": ("sigmoid-pairs", 8)}
_HIDDEN = 16


@dataclass
class PredictiveModel:
    """Shared per-entity network m_w: feature(16) -> hidden(16, ReLU) -> head."""

    domain: str
    head: str
    params: ParamVector

    @classmethod
    def init(cls, domain: str, seed: int) -> "PredictiveModel":
        head, out = _HEADS[domain]
        rng = np.random.default_rng(seed)
        segs = {
            "w1": rng.normal(scale=FEATURE_DIM ** -0.5,
                             size=(FEATURE_DIM, _HIDDEN)),
            "b1": np.zeros(_HIDDEN),
            "w2": rng.normal(scale=_HIDDEN ** -0.5, size=(_HIDDEN, out)),
            "b2": np.zeros(out),
        }
        return cls(domain, head, ParamVector(segs))


def _tb_pair_sum_matrix() -> np.ndarray:
    """(8, 8) constant: right-multiplying a (5, 8) block gives, at each
    (state, action, next) slot, the sum over next of that (state, action) pair."""
    m = np.zeros((8, 8))
    for s in range(2):
        for a in range(2):
            i0 = s * 4 + a * 2
            m[i0, i0] = m[i0 + 1, i0] = 1.0
            m[i0, i0 + 1] = m[i0 + 1, i0 + 1] = 1.0
    return m


_TB_PAIR_SUM = _tb_pair_sum_matrix()


def predict_tape(model: PredictiveModel, features: np.ndarray):
    """Record theta = m_w(x) on a tape; returns (tape, theta_ref).

    theta is flat: (25,) rewards, (20,) probabilities, or (40,) tb tensor
    entries ordered patient-major as (state, action, next).
    """
    if not np.all(np.isfinite(model.params.flat)):
        raise ValueError("predict_params: non-finite model weights")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
        raise ValueError("predict_params: features must be (entities, 16)")

    tape = Tape()
    for name in model.params.names:
        tape.param(name, model.params.get(name))
    x = tape.const(features)
    h = tape.relu(tape.affine(x, tape.param_ref("w1"), tape.param_ref("b1")))
    z = tape.affine(h, tape.param_ref("w2"), tape.param_ref("b2"))
    n = features.shape[0]

    if model.head == "linear":
        theta = tape.reshape(z, (n,))
    elif model.head == "sigmoid":
        theta = tape.reshape(tape.sigmoid(z), (n,))
    elif model.head == "sigmoid-pairs":
        p = tape.sigmoid(z)                      # (5, 8) raw probabilities
        pair = tape.affine(p, _TB_PAIR_SUM)      # per-slot pair sums
        theta = tape.reshape(tape.div(p, pair), (n * 8,))
    else:
        raise ValueError(f"unknown head {model.head!r}")
    return tape, theta


def predict_params(model: PredictiveModel, features: np.ndarray) -> np.ndarray:
    """theta = m_w(x) as a plain array."""
    tape, theta = predict_tape(model, features)
    return tape.value(theta).copy()


def predict_vjp(tape: Tape, theta_ref: int, g_theta: np.ndarray,
                model: PredictiveModel) -> np.ndarray:
    """Flat d(g_theta . theta)/dw through a recorded prediction tape."""
    cot = tape.reduce_sum(tape.mul(theta_ref, np.asarray(g_theta)))
    grads = backward_grad(tape, cot)
    return model.params.grads_to_flat(grads)


# -- persistence -------------------------------------------------------------


def _arr_to_json(a: np.ndarray) -> dict:
    a = np.asarray(a)
    kind = "i8" if a.dtype.kind == "i" else "f64"
    data = a.ravel().tolist()
    return {"dtype": kind, "shape": list(a.shape), "data": data}


def _arr_from_json(d) -> np.ndarray:
    try:
        dtype = np.int64 if d["dtype"] == "i8" else np.float64
        return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetFormatError(f"malformed array record: {err}") from err


def _traj_to_json(t: Trajectory) -> dict:
    return {
        "states": _arr_to_json(np.asarray(t.states)),
        "actions": _arr_to_json(t.actions),
        "rewards": _arr_to_json(t.rewards),
        "behavior_probs": _arr_to_json(t.behavior_probs),
        "events": None if t.events is None else
                  [[[int(e), int(o), int(p)] for e, o, p in step]
                   for step in t.events],
        "final_state": _arr_to_json(np.asarray(t.final_state)),
    }


def _traj_from_json(d) -> Trajectory:
    states = _arr_from_json(d["states"])
    final = _arr_from_json(d["final_state"])
    if states.ndim == 1 and states.dtype == np.int64:
        final = int(final)
    return Trajectory(
        states,
        _arr_from_json(d["actions"]),
        _arr_from_json(d["rewards"]),
        _arr_from_json(d["behavior_probs"]),
        None if d["events"] is None else
        [[(int(e), int(o), int(p)) for e, o, p in step] for step in d["events"]],
        final,
    )


def save_dataset(dataset: Dataset, path) -> None:
    doc = {
        "format": DATASET_FORMAT,
        "domain": dataset.domain,
        "regime": dataset.regime,
        "seed": dataset.seed,
        "config": dataset.config,
        "entries": [
            {
                "split": e.split,
                "instance": {
                    "domain": e.instance.domain,
                    "seed": e.instance.seed,
                    "true_params": _arr_to_json(e.instance.true_params),
                    "features": _arr_to_json(e.instance.features),
                    "structure": e.instance.structure,
                    "meta": e.instance.meta,
                },
                "trajectories": [_traj_to_json(t) for t in e.trajectories],
            }
            for e in dataset.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_dataset(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetFormatError(f"unreadable dataset file: {err}") from err
    if not isinstance(doc, dict) or doc.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(
            f"expected format {DATASET_FORMAT!r}, got {doc.get('format')!r}")
    try:
        entries = []
        for e in doc["entries"]:
            inst = e["instance"]
            entries.append(DatasetEntry(
                MdpInstance(
                    domain=inst["domain"],
                    seed=int(inst["seed"]),
                    true_params=_arr_from_json(inst["true_params"]),
                    features=_arr_from_json(inst["features"]),
                    structure=inst["structure"],
                    meta=inst.get("meta", {}),
                ),
                [_traj_from_json(t) for t in e["trajectories"]],
                e["split"],
            ))
        ds = Dataset(doc["domain"], doc["regime"], int(doc["seed"]), entries,
                     doc.get("config"))
    except (KeyError, TypeError) as err:
        raise DatasetFormatError(f"missing dataset field: {err}") from err
    validate_dataset(ds)
    return ds


def validate_dataset(ds: Dataset) -> None:
    """Domain invariants; raises DatasetInvariantError on violation."""
    for i, e in enumerate(ds.entries):
        theta = e.instance.true_params
        if not np.all(np.isfinite(theta)):
            raise DatasetInvariantError(f"instance {i}: non-finite parameters")
        if e.instance.domain in ("snare", "tb"):
            if np.any(theta < 0.0) or np.any(theta > 1.0):
                raise DatasetInvariantError(
                    f"instance {i}: probability parameter outside [0, 1]")
        if e.split not in ("train", "val", "test"):
            raise DatasetInvariantError(f"instance {i}: bad split {e.split!r}")
        for j, t in enumerate(e.trajectories):
            bp = t.behavior_probs
            if np.any(bp <= 0.0) or np.any(bp > 1.0):
                raise DatasetInvariantError(
                    f"instance {i} trajectory {j}: behavior prob outside (0, 1]")
            if np.asarray(t.states).dtype != np.int64:
                s = np.asarray(t.states)
                if np.any(s < -1e-9) or np.any(s > 1 + 1e-9):
                    raise DatasetInvariantError(
                        f"instance {i} trajectory {j}: belief outside [0, 1]")


# -- model checkpoints -------------------------------------------------------


def save_checkpoint(path, kind: str, domain: str, segments: dict,
                    meta: dict | None = None) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "kind": kind,
        "domain": domain,
        "segments": {k: _arr_to_json(np.asarray(v)) for k, v in segments.items()},
        "meta": dict(meta or {}),
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetFormatError(f"unreadable checkpoint: {err}") from err
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DatasetFormatError(
            f"expected format {MODEL_FORMAT!r}, got {doc.get('format')!r}")
    doc["segments"] = {k: _arr_from_json(v) for k, v in doc["segments"].items()}
    return doc


def model_to_checkpoint(model: PredictiveModel, path, meta: dict | None = None):
    meta = dict(meta or {})
    meta["head"] = model.head
    save_checkpoint(path, "predictive", model.domain,
                    model.params.segments(), meta)


def model_from_checkpoint(path) -> PredictiveModel:
    doc = load_checkpoint(path)
    if doc["kind"] != "predictive":
        raise DatasetFormatError("checkpoint does not hold a predictive model")
    return PredictiveModel(doc["domain"], doc["meta"]["head"],
                           ParamVector(doc["segments"]))
