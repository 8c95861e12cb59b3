"""Trainers: two-stage supervised and decision-focused end-to-end.

Both trainers share one forward-solve path (predict, then the domain
solver, warm-started across epochs) and one logging format. The
decision-focused trainer pushes the OPE gradient through the solved
policy's stationarity conditions: solve a Hessian strategy against the
evaluation gradient, contract with the cross derivative, and chain into
the predictive network.
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import environments as envs
from .diffmdp import (collect_stats, decision_gradient, full_hessian,
                      mean_policy_grad_fn)
from .mdp_core import (Dataset, PredictiveModel, predict_params,
                       predict_tape, predict_vjp)
from .ope import eval_grad, eval_metric
from .solvers import TabularSoftPolicy, solve_instance

METHODS = ("ts", "pg-id", "pg-w", "bellman-id", "bellman-w",
           "pg-full", "bellman-full")
_STRATEGY_SUFFIX = {"id": "identity", "w": "woodbury", "full": "full"}
PROB_CLIP = 1e-6


@dataclass
class TrainConfig:
    """Hyperparameters shared by both trainers."""

    method: str = "ts"
    epochs: int = 100
    lr: float = 0.01                 # gradient step size
    reg: float = 0.1                 # predictive-loss weight in the update
    lambda_ess: float = 1.0
    k: int = 100                     # fresh rollouts per derivative estimate
    grad_draws: int = 1              # independent rollout sets averaged per step
    c_mag: float = 1.0
    seed: int = 0
    select: str = "best_val"         # or "last"
    log_ope: bool = True             # per-epoch train/val OPE rows
    include_delta_terms: bool | None = None   # None = per-domain default
    resolve_iters: int = 2000        # warm-started re-solve budgets
    resolve_random: int = 200
    resolve_train: int = 1500

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; "
                             f"choose from {METHODS}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.reg < 0:
            raise ValueError("regularization weight must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.k < 1:
            raise ValueError("derivative sample count k must be >= 1")
        if self.grad_draws < 1:
            raise ValueError("grad_draws must be >= 1")
        if self.select not in ("best_val", "last"):
            raise ValueError("select must be 'best_val' or 'last'")

    def mode_strategy(self) -> tuple[str | None, str | None]:
        if self.method == "ts":
            return None, None
        mode, suffix = self.method.rsplit("-", 1)
        return mode, _STRATEGY_SUFFIX[suffix]


@dataclass
class TrainRow:
    epoch: int
    instance: int
    split: str
    loss: float
    ope: float
    wallclock_backward_ms: float


class TrainLog:
    """Per-epoch per-instance records plus the model-selection outcome."""

    COLUMNS = ("epoch", "instance", "split", "loss", "ope",
               "wallclock_backward_ms")

    def __init__(self):
        self.rows: list[TrainRow] = []
        self.chosen_epoch: int = -1
        self.selection: str = "last"
        self.clipped_loss: bool = False

    def extend(self, rows: list[TrainRow]) -> None:
        self.rows.extend(sorted(rows, key=lambda r: r.instance))

    def epoch_rows(self, epoch: int, split: str | None = None):
        return [r for r in self.rows if r.epoch == epoch
                and (split is None or r.split == split)]

    def mean_loss(self, epoch: int, split: str = "train") -> float:
        rows = self.epoch_rows(epoch, split)
        return float(np.mean([r.loss for r in rows])) if rows else np.nan

    def mean_ope(self, epoch: int, split: str) -> float:
        vals = [r.ope for r in self.epoch_rows(epoch, split)
                if np.isfinite(r.ope)]
        return float(np.mean(vals)) if vals else np.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, r.instance, r.split,
                            f"{r.loss:.10g}", f"{r.ope:.10g}",
                            f"{r.wallclock_backward_ms:.3f}"])
            w.writerow(["# chosen_epoch", self.chosen_epoch,
                        "selection", self.selection, "", ""])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise ValueError(f"{path}: not a training log")
        for row in rows[1:]:
            if row[0].startswith("#"):
                log.chosen_epoch = int(row[1])
                log.selection = row[3]
                continue
            log.rows.append(TrainRow(int(row[0]), int(row[1]), row[2],
                                     float(row[3]), float(row[4]),
                                     float(row[5])))
        return log


# -- predictive loss ---------------------------------------------------------


def _loss_terms(theta: np.ndarray, trajectories, domain: str,
                structure: dict | None):
    """(loss, d loss / d theta, clipped?) for one instance's trajectories."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    if domain == "gridworld":
        if structure is None:
            raise ValueError("gridworld loss needs the instance structure")
        sq, n = 0.0, 0
        for traj in trajectories:
            rg = envs.reward_theta_grads(traj, domain, structure)
            resid = rg @ theta - traj.rewards
            sq += float(resid @ resid)
            g += 2.0 * (resid @ rg)
            n += resid.shape[0]
        return sq / n, g / n, False

    # transition domains: Bernoulli negative log-likelihood of the recorded
    # latent events, averaged over trajectories
    clipped = bool(np.any(theta < PROB_CLIP) or np.any(theta > 1 - PROB_CLIP))
    p = np.clip(theta, PROB_CLIP, 1.0 - PROB_CLIP)
    nll = 0.0
    for traj in trajectories:
        if traj.events is None:
            raise ValueError("predictive loss needs latent event records; "
                             "simulate with record_latents=True")
        for step in traj.events:
            for _, outcome, pidx in step:
                if pidx < 0:
                    continue
                if outcome:
                    nll -= np.log(p[pidx])
                    g[pidx] -= 1.0 / p[pidx]
                else:
                    nll -= np.log1p(-p[pidx])
                    g[pidx] += 1.0 / (1.0 - p[pidx])
    k = len(trajectories)
    return nll / k, g / k, clipped


def two_stage_loss(theta: np.ndarray, trajectories, domain: str,
                   structure: dict | None = None) -> float:
    """Supervised loss of predicted parameters against logged trajectories.

    Gridworld: mean squared error between the predicted reward of each
    entered cell and the observed per-step reward. Transition domains:
    negative log-likelihood of the recorded latent events (probabilities
    clipped to [1e-6, 1 - 1e-6]), averaged over trajectories.
    """
    loss, _, _ = _loss_terms(theta, trajectories, domain, structure)
    return float(loss)


# -- shared forward path -------------------------------------------------------


def _seed_for(run_seed: int, epoch: int, instance: int, tag: int) -> int:
    ss = np.random.SeedSequence([run_seed, epoch, instance, tag])
    return int(ss.generate_state(1)[0])


def _forward_solve(domain, theta, structure, seed, cache, idx, cfg):
    """Solve pi*(theta), warm-starting from this instance's previous solve."""
    warm = cache.get(idx)
    if warm is None:
        res = solve_instance(domain, theta, structure, seed=seed)
    elif domain == "gridworld":
        res = solve_instance(domain, theta, structure, seed=seed,
                             warm_start=warm, iters=cfg.resolve_iters)
    else:
        res = solve_instance(domain, theta, structure, seed=seed,
                             warm_start=warm,
                             random_steps=cfg.resolve_random,
                             train_steps=cfg.resolve_train)
    pol = res.policy
    cache[idx] = pol.q.copy() if isinstance(pol, TabularSoftPolicy) \
        else pol.flat.copy()
    return res


def _predict(model: PredictiveModel, instance):
    tape, theta_ref = predict_tape(model, instance.features)
    return tape, theta_ref, tape.value(theta_ref).copy()


# -- decision-focused backward ---------------------------------------------------


def _eval_policy_grad(policy, trajectories, gamma, lambda_ess):
    value, grads = eval_grad(policy, trajectories, gamma, lambda_ess)
    return value, policy.param_vector().grads_to_flat(grads)


def _backward(domain, structure, theta, policy, logged, cfg, mode, strategy,
              sim_seed):
    """d Eval / d theta through the solved policy's optimality conditions."""
    gamma = structure["gamma"]
    d = envs.theta_dim(domain, structure)
    ope_value, g_pi = _eval_policy_grad(policy, logged, gamma,
                                        cfg.lambda_ess)

    include = cfg.include_delta_terms
    if include is None:
        include = domain != "gridworld" and mode == "bellman"
    score_fn = None if domain == "gridworld" else envs.latent_score

    # average the simulation-based part over independent rollout sets;
    # the logged-data term (g_pi) is deterministic and computed once
    g_sum = None
    diag = None
    for draw in range(cfg.grad_draws):
        seed = sim_seed if draw == 0 else _seed_for(sim_seed, draw, 0, 1)
        fresh = envs.simulate_trajectories(domain, theta, structure, policy,
                                           cfg.k, seed=seed)
        rgl = [envs.reward_theta_grads(t, domain, structure) for t in fresh]
        if rgl[0] is None:
            rgl = None
        stats = collect_stats(fresh, theta, policy, gamma, d, mode,
                              reward_grads_list=rgl,
                              latent_score_fn=score_fn)
        parts = None
        if strategy == "full":
            grad_fn = mean_policy_grad_fn(fresh, mode, policy, gamma, d,
                                          reward_grads_list=rgl,
                                          latent_score_fn=score_fn)
            pi0 = policy.q.ravel() if isinstance(policy, TabularSoftPolicy) \
                else policy.flat
            parts = full_hessian(stats, mode, grad_fn, pi0, theta)
        g_theta, diag = decision_gradient(g_pi, stats, mode, strategy, d,
                                          c_mag=cfg.c_mag,
                                          include_delta_terms=include,
                                          full_parts=parts)
        g_sum = g_theta if g_sum is None else g_sum + g_theta
    return ope_value, g_sum / cfg.grad_draws, diag


# -- trainers ----------------------------------------------------------------------


def _run_training(dataset: Dataset, cfg: TrainConfig,
                  decision_focused: bool,
                  initial_model: PredictiveModel | None = None):
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if not train_idx:
        raise ValueError("training requires a non-empty train split")
    domain = dataset.domain
    model = PredictiveModel.init(domain, seed=cfg.seed)
    if initial_model is not None:
        if initial_model.domain != domain:
            raise ValueError(
                f"initial model is for domain {initial_model.domain!r}, "
                f"dataset is {domain!r}")
        model.params.flat[:] = initial_model.params.flat
    mode, strategy = cfg.mode_strategy()
    log = TrainLog()
    log.selection = cfg.select if cfg.log_ope else "last"

    cache: dict[int, np.ndarray] = {}
    best = (-np.inf, -1, None)      # (val ope, epoch, weights copy)

    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])).permutation(train_idx)
        epoch_rows = []
        consecutive_failures = 0
        for idx in order:
            inst = dataset.instance(int(idx))
            logged = dataset.trajectories_for(int(idx))
            tape, theta_ref, theta = _predict(model, inst)
            t_loss = time.perf_counter()
            loss, g_loss_theta, clipped = _loss_terms(
                theta, logged, domain, inst.structure)
            back_ms = (time.perf_counter() - t_loss) * 1e3
            if clipped:
                log.clipped_loss = True
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite predictive loss at epoch {epoch}, "
                    f"instance {idx}")

            ope_value = np.nan
            if decision_focused or cfg.log_ope:
                try:
                    res = _forward_solve(
                        domain, theta, inst.structure,
                        _seed_for(cfg.seed, epoch, int(idx), 2),
                        cache, int(idx), cfg)
                    if decision_focused:
                        t0 = time.perf_counter()
                        ope_value, g_theta_eval, _ = _backward(
                            domain, inst.structure, theta, res.policy,
                            logged, cfg, mode, strategy,
                            _seed_for(cfg.seed, epoch, int(idx), 1))
                        back_ms += (time.perf_counter() - t0) * 1e3
                    else:
                        ope_value = eval_metric(
                            res.policy, logged, inst.structure["gamma"],
                            cfg.lambda_ess).value
                except (np.linalg.LinAlgError, FloatingPointError) as exc:
                    consecutive_failures += 1
                    warnings.warn(
                        f"epoch {epoch}: skipping instance {idx} "
                        f"({type(exc).__name__}: {exc})", stacklevel=2)
                    epoch_rows.append(TrainRow(epoch, int(idx), "train",
                                               float(loss), np.nan, 0.0))
                    if consecutive_failures >= 3:
                        warnings.warn(
                            f"epoch {epoch} aborted after 3 consecutive "
                            "instance failures; remaining instances skipped",
                            stacklevel=2)
                        break
                    continue
            consecutive_failures = 0

            if decision_focused:
                step_theta = g_theta_eval - cfg.reg * g_loss_theta
            else:
                step_theta = -g_loss_theta
            t0 = time.perf_counter()
            dw = predict_vjp(tape, theta_ref, step_theta, model)
            back_ms += (time.perf_counter() - t0) * 1e3
            model.params.flat += cfg.lr * dw
            epoch_rows.append(TrainRow(epoch, int(idx), "train",
                                       float(loss), float(ope_value),
                                       back_ms))

        if cfg.log_ope:
            for idx in val_idx:
                inst = dataset.instance(idx)
                logged = dataset.trajectories_for(idx)
                _, _, theta = _predict(model, inst)
                loss, _, _ = _loss_terms(theta, logged, domain,
                                         inst.structure)
                try:
                    res = _forward_solve(domain, theta, inst.structure,
                                         _seed_for(cfg.seed, epoch, idx, 2),
                                         cache, idx, cfg)
                    ope = eval_metric(res.policy, logged,
                                      inst.structure["gamma"],
                                      cfg.lambda_ess).value
                except (np.linalg.LinAlgError, FloatingPointError) as exc:
                    warnings.warn(
                        f"epoch {epoch}: validation eval failed on "
                        f"instance {idx} ({type(exc).__name__}: {exc})",
                        stacklevel=2)
                    ope = np.nan
                epoch_rows.append(TrainRow(epoch, idx, "val", float(loss),
                                           float(ope), 0.0))
        log.extend(epoch_rows)

        if cfg.log_ope and cfg.select == "best_val" and val_idx:
            val_ope = log.mean_ope(epoch, "val")
            if np.isfinite(val_ope) and val_ope > best[0]:
                best = (val_ope, epoch, model.params.flat.copy())

    if log.selection == "best_val" and best[2] is not None:
        model.params.flat[:] = best[2]
        log.chosen_epoch = best[1]
    else:
        log.selection = "last"
        log.chosen_epoch = cfg.epochs - 1
    return model, log


def train_two_stage(dataset: Dataset, cfg: TrainConfig,
                    initial_model: PredictiveModel | None = None):
    """Gradient descent on the mean supervised loss over training instances.

    One update per instance per epoch, in a seed-shuffled order; the
    regularization weight plays no role here.
    """
    if cfg.method != "ts":
        cfg = replace(cfg, method="ts")
    return _run_training(dataset, cfg, decision_focused=False,
                         initial_model=initial_model)


def train_decision_focused(dataset: Dataset, cfg: TrainConfig,
                           initial_model: PredictiveModel | None = None):
    """End-to-end training through the solved policy.

    Per instance and epoch: predict parameters, solve the MDP, estimate
    d Eval / d theta on the instance's logged trajectories via the chosen
    Hessian strategy over fresh rollouts, and step the predictive weights
    along lr * (eval gradient - reg * loss gradient).

    ``initial_model`` sets the starting weights (copied, the argument is
    not mutated); the common use is warm-starting from a two-stage fit.
    """
    mode, strategy = cfg.mode_strategy()
    if mode is None:
        raise ValueError("train_decision_focused needs a decision-focused "
                         "method, not 'ts'")
    if strategy == "full" and dataset.domain != "gridworld":
        raise ValueError("the dense Hessian strategy is limited to tabular "
                         "policies; use identity or woodbury here")
    return _run_training(dataset, cfg, decision_focused=True,
                         initial_model=initial_model)


def train(dataset: Dataset, cfg: TrainConfig,
          initial_model: PredictiveModel | None = None):
    if cfg.method == "ts":
        return train_two_stage(dataset, cfg, initial_model=initial_model)
    return train_decision_focused(dataset, cfg, initial_model=initial_model)


# -- evaluation ---------------------------------------------------------------------


@dataclass
class SplitScore:
    split: str
    mean: float
    stderr: float
    per_instance: list[float] = field(default_factory=list)


def evaluate_split(model: PredictiveModel, dataset: Dataset, split: str,
                   lambda_ess: float = 1.0, seed: int = 0) -> SplitScore:
    """Mean +/- standard error of the OPE metric across a split's instances.

    Each instance is solved fresh at full budget from the model's predicted
    parameters and scored against that instance's held-out trajectories.
    Test-split trajectories are read inside the dataset's audited unlock
    scope; this function is the intended access point.
    """
    idxs = dataset.indices(split)
    if not idxs:
        raise ValueError(f"split {split!r} is empty")
    values = []
    for idx in idxs:
        inst = dataset.instance(idx)
        theta = predict_params(model, inst.features)
        res = solve_instance(dataset.domain, theta, inst.structure,
                             seed=_seed_for(seed, 0, idx, 3))
        if split == "test":
            with dataset.test_access():
                trajs = dataset.trajectories_for(idx)
        else:
            trajs = dataset.trajectories_for(idx)
        values.append(eval_metric(res.policy, trajs,
                                  inst.structure["gamma"],
                                  lambda_ess).value)
    arr = np.asarray(values)
    stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 \
        else 0.0
    return SplitScore(split, float(arr.mean()), stderr, values)
