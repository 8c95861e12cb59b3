"""Experiment harness: dataset generation, training runs, tables, benchmarks.

Every command writes a frozen resolved config next to its outputs so a run
can be re-executed from the output directory alone. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import environments as envs
from .mdp_core import (PredictiveModel, load_dataset, model_to_checkpoint,
                       save_dataset)
from .training import METHODS, TrainConfig, evaluate_split, train

DEFAULT_LAMBDAS = (0.0, 0.01, 0.1, 1.0, 10.0)
FULL_SIZE_LIMIT = 2000
_THREAD_LIMIT = None


def _apply_thread_cap():
    """Honor DFMDP_THREADS as a cap on BLAS worker threads."""
    global _THREAD_LIMIT
    cap = os.environ.get("DFMDP_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMIT = threadpool_limits(limits=max(1, int(cap)))
    except (ImportError, ValueError):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(
            f"output directory {out} is non-empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_file(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.json"
    if not p.exists():
        raise FileNotFoundError(f"dataset not found at {p}")
    return p


# -- generate -------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = _prepare_out(args.out, args.force)
    counts = tuple(int(c) for c in args.counts.split(","))
    if len(counts) != 3:
        print("error: --counts must be train,val,test", file=sys.stderr)
        return 2
    structure = None
    if args.domain == "gridworld" and args.side is not None:
        structure = envs.default_structure("gridworld", side=args.side)
    ds = envs.build_dataset(args.domain, args.regime, args.seed,
                            counts=counts, n_trajectories=args.trajectories,
                            structure=structure)
    data_path = out / "dataset.json"
    save_dataset(ds, data_path)
    _write_json(out / "config.json", {
        "command": "generate", "domain": args.domain, "regime": args.regime,
        "seed": args.seed, "counts": list(counts),
        "trajectories": args.trajectories, "side": args.side,
        "dataset_sha256": _sha256(data_path),
    })
    print(f"wrote {data_path} ({len(ds.entries)} instances, "
          f"{args.trajectories} trajectories each)")
    return 0


# -- train ---------------------------------------------------------------------


def _config_from_args(args) -> TrainConfig:
    kwargs = dict(method=args.method, epochs=args.epochs, lr=args.lr,
                  reg=args.reg, lambda_ess=args.lambda_ess, k=args.k,
                  grad_draws=args.grad_draws, c_mag=args.c_mag,
                  seed=args.seed, select=args.select,
                  log_ope=not args.no_log_ope)
    for name in ("resolve_iters", "resolve_random", "resolve_train"):
        v = getattr(args, name)
        if v is not None:
            kwargs[name] = v
    return TrainConfig(**kwargs)


def _run_one_training(dataset, cfg: TrainConfig, out: Path,
                      dataset_path: Path) -> dict:
    model, log = train(dataset, cfg)
    log.to_csv(out / "trainlog.csv")
    model_to_checkpoint(model, out / "model.ckpt", meta={
        "method": cfg.method, "seed": cfg.seed,
        "selection": log.selection, "chosen_epoch": log.chosen_epoch})
    result = {
        "domain": dataset.domain, "regime": dataset.regime,
        "method": cfg.method, "seed": cfg.seed,
        "lambda_ess": cfg.lambda_ess, "reg": cfg.reg,
        "selection": log.selection, "chosen_epoch": log.chosen_epoch,
        "clipped_loss": log.clipped_loss,
    }
    if dataset.indices("test"):
        score = evaluate_split(model, dataset, "test", cfg.lambda_ess,
                               seed=cfg.seed)
        result.update(test_ope_mean=score.mean, test_ope_stderr=score.stderr,
                      test_per_instance=score.per_instance)
    else:
        result.update(test_ope_mean=None, test_ope_stderr=None,
                      test_per_instance=[])
    _write_json(out / "result.json", result)
    _write_json(out / "config.json", {
        "command": "train", "dataset": str(dataset_path),
        "dataset_sha256": _sha256(dataset_path),
        **{k: getattr(cfg, k) for k in (
            "method", "epochs", "lr", "reg", "lambda_ess", "k", "c_mag",
            "seed", "select", "log_ope", "resolve_iters", "resolve_random",
            "resolve_train")},
    })
    return result


def cmd_train(args) -> int:
    data_path = _dataset_file(args.dataset)
    out = _prepare_out(args.out, args.force)
    dataset = load_dataset(data_path)
    cfg = _config_from_args(args)
    result = _run_one_training(dataset, cfg, out, data_path)
    mean = result["test_ope_mean"]
    shown = "n/a" if mean is None else f"{mean:.4f}"
    print(f"{dataset.domain}/{dataset.regime} {cfg.method} seed={cfg.seed}: "
          f"test OPE {shown} (epoch {result['chosen_epoch']})")
    return 0


# -- table ---------------------------------------------------------------------


def _method_rank(m: str) -> int:
    return METHODS.index(m) if m in METHODS else len(METHODS)


def cmd_table(args) -> int:
    runs = Path(args.runs)
    results = []
    for path in sorted(runs.rglob("result.json")):
        with open(path) as fh:
            results.append(json.load(fh))
    results = [r for r in results if r.get("test_ope_mean") is not None]
    if not results:
        print(f"error: no completed runs with test scores under {runs}",
              file=sys.stderr)
        return 1

    cells: dict[tuple, list] = {}
    for r in results:
        cells.setdefault((r["domain"], r["regime"], r["method"]), []).append(r)

    domains = sorted({k[0] for k in cells})
    regimes = sorted({k[1] for k in cells})
    methods = sorted({k[2] for k in cells}, key=_method_rank)
    rows, missing = [], []
    for dom in domains:
        for reg in regimes:
            for meth in methods:
                got = cells.get((dom, reg, meth))
                if not got:
                    missing.append(f"{dom}/{reg}/{meth}")
                    rows.append([dom, reg, meth, 0, "", "", "", ""])
                    continue
                vals = np.array([r["test_ope_mean"] for r in got])
                stderr = (float(vals.std(ddof=1) / np.sqrt(vals.size))
                          if vals.size > 1 else 0.0)
                lam = {r["lambda_ess"] for r in got}
                sel = {r["selection"] for r in got}
                rows.append([
                    dom, reg, meth, vals.size, f"{vals.mean():.6g}",
                    f"{stderr:.6g}",
                    str(lam.pop()) if len(lam) == 1 else "mixed",
                    sel.pop() if len(sel) == 1 else "mixed"])

    out_path = Path(args.out) if args.out else runs / "table.csv"
    header = ["domain", "regime", "method", "n_seeds", "mean", "stderr",
              "lambda_ess", "selection"]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(",".join(header))
    for row in rows:
        print(",".join(str(c) for c in row))
    if missing:
        print("missing cells: " + ", ".join(missing), file=sys.stderr)
    return 0


# -- runtime -------------------------------------------------------------------


def _bench_setup(domain: str, size: int, k: int, seed: int):
    """A solved-ish policy plus k rollouts at the requested policy size."""
    from .diffmdp import collect_stats
    from .solvers import MlpSoftPolicy, init_mlp_flat, solve_instance

    if domain == "gridworld":
        structure = envs.default_structure("gridworld", side=size)
        inst = envs.generate_instance(domain, seed, structure)
        res = solve_instance(domain, inst.true_params, structure, iters=200)
        policy = res.policy
        n = policy.q.size
    else:
        structure = envs.default_structure(domain)
        inst = envs.generate_instance(domain, seed, structure)
        state_dim = envs.theta_dim(domain, structure) \
            if domain == "snare" else structure["n_patients"]
        dims = (state_dim, size, size, structure["n_actions"])
        rng = np.random.default_rng(seed)
        policy = MlpSoftPolicy(init_mlp_flat(dims, rng), dims, beta=1.0)
        n = policy.flat.size
    trajs = envs.simulate_trajectories(domain, inst.true_params, structure,
                                       policy, k, seed=seed + 1)
    d = envs.theta_dim(domain, structure)
    score_fn = None if domain == "gridworld" else envs.latent_score
    rgl = [envs.reward_theta_grads(t, domain, structure) for t in trajs]
    if rgl[0] is None:
        rgl = None
    return (inst, structure, policy, trajs, rgl, score_fn, d, n,
            collect_stats)


def _one_backward(domain, structure, policy, trajs, rgl, score_fn, d,
                  strategy, mode, g_pi, theta, collect_stats_fn):
    from .diffmdp import decision_gradient, full_hessian, mean_policy_grad_fn
    from .solvers import TabularSoftPolicy

    gamma = structure["gamma"]
    stats = collect_stats_fn(trajs, theta, policy, gamma, d, mode,
                             reward_grads_list=rgl, latent_score_fn=score_fn)
    parts = None
    if strategy == "full":
        grad_fn = mean_policy_grad_fn(trajs, mode, policy, gamma, d,
                                      reward_grads_list=rgl,
                                      latent_score_fn=score_fn)
        pi0 = policy.q.ravel() if isinstance(policy, TabularSoftPolicy) \
            else policy.flat
        parts = full_hessian(stats, mode, grad_fn, pi0, theta)
    include = domain != "gridworld" and mode == "bellman"
    return decision_gradient(g_pi, stats, mode, strategy, d,
                             include_delta_terms=include, full_parts=parts)


def cmd_runtime(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    out = _prepare_out(args.out, args.force)
    rows = []
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - present in the tested env
        from contextlib import nullcontext

        threadpool_limits = lambda limits: nullcontext()

    with threadpool_limits(limits=1):
        for size in sizes:
            setup = _bench_setup(args.domain, size, args.k, args.seed)
            (inst, structure, policy, trajs, rgl, score_fn, d, n,
             collect_stats_fn) = setup
            if args.strategy == "full" and n > FULL_SIZE_LIMIT:
                print(f"error: size {size} gives n={n} > {FULL_SIZE_LIMIT}; "
                      "the full strategy is dense in n", file=sys.stderr)
                return 2
            rng = np.random.default_rng(args.seed + 7)
            g_pi = rng.normal(size=n)
            run = lambda: _one_backward(
                args.domain, structure, policy, trajs, rgl, score_fn, d,
                args.strategy, args.mode, g_pi, inst.true_params,
                collect_stats_fn)

            start = time.perf_counter()
            run()                                     # warm-up, untimed
            times = []
            status = "ok"
            for _ in range(args.reps):
                if time.perf_counter() - start > args.timeout:
                    status = "timeout"
                    break
                t0 = time.perf_counter()
                run()
                times.append((time.perf_counter() - t0) * 1e3)
            median = f"{np.median(times):.3f}" if times else ""
            rows.append([args.domain, args.strategy, size, n, args.k,
                         median, len(times), status])
            print(f"{args.strategy} n={n}: median "
                  f"{median or 'n/a'} ms over {len(times)} reps [{status}]")

    path = out / "runtime.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "strategy", "size", "n", "k", "median_ms",
                    "reps", "status"])
        w.writerows(rows)
    _write_json(out / "config.json", {
        "command": "runtime", "domain": args.domain,
        "strategy": args.strategy, "mode": args.mode, "sizes": sizes,
        "k": args.k, "reps": args.reps, "timeout_s": args.timeout,
        "seed": args.seed})
    return 0


# -- sweep ---------------------------------------------------------------------


def cmd_sweep(args) -> int:
    data_path = _dataset_file(args.dataset)
    out = _prepare_out(args.out, args.force)
    dataset = load_dataset(data_path)
    lambdas = ([float(s) for s in args.lambdas.split(",")]
               if args.lambdas else list(DEFAULT_LAMBDAS))
    rows = []
    for lam in lambdas:
        args.reg = lam
        cfg = _config_from_args(args)
        sub = out / f"lambda_{lam:g}"
        sub.mkdir(exist_ok=True)
        result = _run_one_training(dataset, cfg, sub, data_path)
        rows.append([lam, result["test_ope_mean"],
                     result["test_ope_stderr"], result["chosen_epoch"]])
        print(f"lambda={lam:g}: test OPE {result['test_ope_mean']}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reg_lambda", "test_ope_mean", "test_ope_stderr",
                    "chosen_epoch"])
        w.writerows(rows)
    _write_json(out / "config.json", {
        "command": "sweep", "dataset": str(data_path),
        "dataset_sha256": _sha256(data_path), "method": args.method,
        "lambdas": lambdas, "epochs": args.epochs, "seed": args.seed,
        "k": args.k, "lambda_ess": args.lambda_ess})
    return 0


# -- parser --------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, method_required: bool):
    if method_required:
        p.add_argument("--method", required=True, choices=METHODS)
    else:
        p.add_argument("--method", default="bellman-w", choices=METHODS)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--reg", type=float, default=0.1)
    p.add_argument("--lambda-ess", type=float, default=1.0,
                   dest="lambda_ess")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--grad-draws", type=int, default=1, dest="grad_draws")
    p.add_argument("--c-mag", type=float, default=1.0, dest="c_mag")
    p.add_argument("--select", choices=("best_val", "last"),
                   default="best_val")
    p.add_argument("--no-log-ope", action="store_true")
    p.add_argument("--resolve-iters", type=int, default=None)
    p.add_argument("--resolve-random", type=int, default=None)
    p.add_argument("--resolve-train", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfmdp",
        description="Predict-then-optimize experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a benchmark dataset")
    g.add_argument("--domain", required=True,
                   choices=("gridworld", "snare", "tb"))
    g.add_argument("--regime", required=True,
                   choices=("random", "near_optimal"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--counts", default="7,1,2",
                   help="train,val,test instance counts")
    g.add_argument("--trajectories", type=int, default=100)
    g.add_argument("--side", type=int, default=None,
                   help="gridworld side length override")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--dataset", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    _add_train_flags(t, method_required=True)
    t.set_defaults(func=cmd_train)

    tb = sub.add_parser("table", help="aggregate run results into a table")
    tb.add_argument("--runs", required=True)
    tb.add_argument("--out", default=None)
    tb.set_defaults(func=cmd_table)

    r = sub.add_parser("runtime", help="backward-pass runtime benchmark")
    r.add_argument("--domain", default="gridworld",
                   choices=("gridworld", "snare", "tb"))
    r.add_argument("--strategy", required=True,
                   choices=("identity", "woodbury", "full"))
    r.add_argument("--mode", default="bellman", choices=("pg", "bellman"))
    r.add_argument("--sizes", required=True,
                   help="comma list: gridworld side lengths or MLP widths")
    r.add_argument("--k", type=int, default=100)
    r.add_argument("--reps", type=int, default=5)
    r.add_argument("--timeout", type=float, default=600.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_runtime)

    s = sub.add_parser("sweep", help="regularization-weight sweep")
    s.add_argument("--dataset", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--lambdas", default=None,
                   help="comma list of regularization weights")
    _add_train_flags(s, method_required=False)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (FileExistsError, FileNotFoundError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
