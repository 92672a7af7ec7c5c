"""Command-line entry point: train, evaluate, and gradient-check runs.

Artifacts are plain CSV/JSON so they can be diffed and plotted with anything:

* ``train``      training_record.csv, checkpoint.json, final_state.csv,
                 tv_history.csv (evaluation rollout of the trained model),
                 manifest.json
* ``eval``       final_state.csv, tv_history.csv, comparison.csv,
                 metrics.json, optional strided snapshots
* ``gradcheck``  finite-difference and adjoint-vs-tape gradient comparisons
                 on a shrunken instance; nonzero exit when over tolerance

Option precedence: command-line flags override a --config JSON file, which
overrides built-in defaults.  The output root honors $TVDNN_OUT_ROOT.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fluxes, network, solver, training
from .network import ConfigError, NetSpec
from .scenarios import SCENARIOS, Scenario, make_scenario
from .solver import Grid
from .tape import grad_check
from .training import TrainConfig

log = logging.getLogger("tvdnn")

FLUX_KINDS = ("unconstrained", "tvd", "tvd-generalized")


def _flux_arg_to_kind(value):
    return value.replace("-", "_")


def _out_dir(args):
    root = os.environ.get("TVDNN_OUT_ROOT", ".")
    out = Path(args.out) if args.out else Path(root) / f"{args.scenario}_{args.flux}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def _resolve(args, parser):
    """Merge defaults < config file < explicit flags into the namespace."""
    file_values = _load_config_file(getattr(args, "config", None))
    merged = vars(args).copy()
    for key, value in file_values.items():
        key = key.replace("-", "_")
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        # only adopt the file value where the flag was left at its default
        if merged[key] == parser.get_default(key):
            merged[key] = value
    ns = argparse.Namespace(**merged)
    return ns


def _train_config(args) -> TrainConfig:
    penalty = None
    if args.penalty:
        lo, hi = (float(v) for v in args.penalty.split(","))
        penalty = (lo, hi)
    return TrainConfig(
        optimizer=args.optimizer,
        base_lr=args.lr,
        l2_lambda=args.l2_lambda,
        cfl_max=args.cfl_max,
        n_iters=args.iters,
        seed=args.seed,
        penalty=penalty,
    )


def _write_manifest(out, args, scenario, config):
    doc = {
        "scenario": scenario.constants(),
        "config": {
            "optimizer": config.optimizer,
            "base_lr": config.base_lr,
            "rms_smoothing": config.rms_smoothing,
            "eps": config.eps,
            "l2_lambda": config.l2_lambda,
            "cfl_max": config.cfl_max,
            "n_iters": config.n_iters,
            "seed": config.seed,
            "penalty": list(config.penalty) if config.penalty else None,
        },
        "flux": args.flux,
        "out": str(out),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))


def _eval_rollout(scenario, bundle, out, snapshot_stride=0):
    """Evaluation rollout of a (trained) bundle; emits the CSV artifacts.

    Wave speeds are recomputed and reported against the CFL bound but never
    re-projected here; out-of-sample feasibility is a diagnostic only.
    """
    flux_fn = training._flux_fn(scenario, bundle)
    q, trace = solver.rollout(flux_fn, scenario.q0, scenario.grid, stepper="euler")
    solver.write_trace_csv(trace, scenario.grid, out / "tv_history.csv")
    x = scenario.grid.x
    solver.write_state_csv(x, trace.states[-1], out / "final_state.csv")
    if snapshot_stride:
        snapdir = out / "snapshots"
        snapdir.mkdir(exist_ok=True)
        for n in range(0, len(trace.states), snapshot_stride):
            solver.write_state_csv(x, trace.states[n], snapdir / f"step_{n:05d}.csv")
    return q, trace


def _write_comparison(scenario, q_final, out):
    import csv as _csv

    qe = scenario.exact_final
    q = np.atleast_2d(np.asarray(q_final))
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        d = q.shape[0]
        w.writerow(["x"] + [f"q_{k + 1}" for k in range(d)]
                   + [f"q_exact_{k + 1}" for k in range(d)])
        for i, xi in enumerate(scenario.grid.x):
            w.writerow([f"{xi:.17g}"]
                       + [f"{q[k, i]:.17g}" for k in range(d)]
                       + [f"{qe[k, i]:.17g}" for k in range(d)])


def cmd_train(args, parser):
    args = _resolve(args, parser)
    kind = _flux_arg_to_kind(args.flux)
    scenario = make_scenario(args.scenario, kind)
    config = _train_config(args)
    out = _out_dir(args)
    _write_manifest(out, args, scenario, config)

    bundle = None
    if args.checkpoint:
        bundle, _ = network.load_checkpoint(args.checkpoint)
        _check_bundle(bundle, scenario)

    callback = None
    if args.checkpoint_every:
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)

        def callback(k, b, record):
            if (k + 1) % args.checkpoint_every == 0:
                network.save_checkpoint(
                    ckdir / f"iter_{k + 1:06d}.json", b,
                    meta={"scenario": scenario.name, "flux_kind": kind, "iter": k + 1})
            return False

    bundle, record = training.train(scenario, config, bundle=bundle,
                                    callback=callback, jobs=args.jobs)
    record.to_csv(out / "training_record.csv")
    network.save_checkpoint(
        out / "checkpoint.json", bundle,
        meta={"scenario": scenario.name, "flux_kind": kind,
              "seed": config.seed, "iters": record.n_iters})
    q, trace = _eval_rollout(scenario, bundle, out, args.snapshot_stride)

    if trace.diverged:
        log.error("evaluation rollout of the trained model diverged at step %s",
                  trace.diverged_step)
        return 3
    n_div = sum(record.diverged)
    if n_div and not any(np.isfinite(record.loss)):
        log.error("training never recovered from divergence")
        return 3
    final_loss = next((v for v in reversed(record.loss) if np.isfinite(v)), np.inf)
    log.info("final loss %.6g (initial %.6g)", final_loss, record.loss[0])
    return 0


def _check_bundle(bundle, scenario):
    if set(bundle) != set(scenario.net_specs):
        raise ConfigError(
            f"checkpoint nets {sorted(bundle)} do not match scenario nets "
            f"{sorted(scenario.net_specs)}")
    for name, spec in scenario.net_specs.items():
        p = bundle[name]
        if (p.n_in, p.n_hidden, p.n_out) != (spec.n_in, spec.n_hidden, spec.n_out):
            raise ConfigError(
                f"checkpoint net {name!r} is {p.n_in}->{p.n_hidden}->{p.n_out}, "
                f"scenario wants {spec.n_in}->{spec.n_hidden}->{spec.n_out}")


def cmd_eval(args, parser):
    args = _resolve(args, parser)
    kind = _flux_arg_to_kind(args.flux)
    scenario = make_scenario(args.scenario, kind)
    out = _out_dir(args)
    bundle, meta = network.load_checkpoint(args.checkpoint)
    _check_bundle(bundle, scenario)

    q, trace = _eval_rollout(scenario, bundle, out, args.snapshot_stride)
    _write_comparison(scenario, trace.states[-1], out)

    err = training.l2_error(trace.states[-1], scenario.exact_final,
                            scenario.grid.dx, scenario.loss_weights)
    bound = scenario.grid.cfl_bound(args.cfl_max)
    max_a = max(trace.wave_speed_max) if trace.wave_speed_max else 0.0
    metrics = {
        "l2_error": err,
        "loss": err * err,
        "tv_initial": trace.tv[0],
        "tv_final": trace.tv[-1],
        "max_wave_speed": max_a,
        "cfl_bound": bound,
        "cfl_satisfied": bool(max_a <= bound),
        "diverged": trace.diverged,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    log.info("l2 error %.6g; max wave speed %.6g (bound %.6g)", err, max_a, bound)
    return 3 if trace.diverged else 0


def _gradcheck_scenario(cells, steps, seed):
    grid = Grid(n_x=cells, dx=1.0 / cells, dt=0.3 / cells, n_t=steps, bc="periodic")
    rng = np.random.default_rng(seed)
    q0 = rng.uniform(0.0, 1.0, size=(1, cells))
    target = np.roll(q0, max(1, steps // 4), axis=1)
    return Scenario("gradcheck", grid, q0, target, "tvd",
                    {"flux": NetSpec(1, 5, 1)})


def cmd_gradcheck(args, parser):
    args = _resolve(args, parser)
    scenario = _gradcheck_scenario(args.cells, args.steps, args.seed)
    config = TrainConfig(n_iters=0, seed=args.seed)
    bundle = training.make_bundle(scenario, args.seed)
    specs = network.bundle_specs(bundle)
    theta0 = network.pack_bundle(bundle)

    def loss_fn(theta):
        return training.rollout_loss_value(
            scenario, network.unpack_bundle(theta, specs), config)

    def grad_fn(theta):
        _, _, g, _ = training.rollout_loss_and_grad(
            scenario, network.unpack_bundle(theta, specs), config)
        if args.corrupt_gradient:
            g = g.copy()
            g[: max(1, g.size // 4)] *= 1.01
        return g

    def signature_fn(theta):
        b = network.unpack_bundle(theta, specs)
        t, loss, _ = training.taped_rollout_loss(scenario, b, config)
        return t.branch_signature()

    rng = np.random.default_rng(args.seed + 1)
    report = grad_check(loss_fn, grad_fn, theta0, h=args.fd_step,
                        n_sample=args.samples, rng=rng, signature_fn=signature_fn)
    print(f"finite differences: max rel err {report.max_rel_err:.3e} "
          f"({report.max_rel_err_smooth:.3e} on smooth components, "
          f"{int(report.nonsmooth.sum())}/{report.checked} flagged non-smooth)")

    g_adj = training.adjoint_gradient_rk4(scenario, bundle, config)
    t, loss_var, wrt = training.taped_rollout_loss(scenario, bundle, config,
                                                   stepper="rk4")
    stats = {} if args.tape_stats else None
    grads = t.backward(loss_var, wrt=wrt, stats=stats)
    g_tape = np.concatenate([g.ravel() for g in grads])
    scale = max(float(np.abs(g_tape).max()), 1e-300)
    adj_err = float(np.abs(g_adj - g_tape).max()) / scale
    print(f"adjoint vs tape:    max rel err {adj_err:.3e}")
    if stats is not None:
        print(f"tape stats:         {stats['n_nodes']} nodes, "
              f"max partial {stats['max_partial']:.3e}")

    ok = report.max_rel_err_smooth < args.fd_tol and adj_err < args.adjoint_tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tvdnn",
        description="Train and evaluate constrained neural-network fluxes "
                    "for 1D conservation laws.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", default="advection", choices=sorted(SCENARIOS))
        p.add_argument("--flux", default="tvd", choices=FLUX_KINDS)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory "
                       "(default $TVDNN_OUT_ROOT/<scenario>_<flux>)")
        p.add_argument("--config", default=None, help="JSON file with defaults")
        p.add_argument("--snapshot-stride", type=int, default=0,
                       help="also write every Nth state of the evaluation rollout")

    p_train = sub.add_parser("train", help="train a model and write artifacts")
    common(p_train)
    p_train.add_argument("--iters", type=int, default=1000)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--optimizer", default="rmsprop", choices=("rmsprop", "adam"))
    p_train.add_argument("--l2-lambda", type=float, default=0.0)
    p_train.add_argument("--cfl-max", type=float, default=0.5)
    p_train.add_argument("--penalty", default=None, metavar="LO,HI",
                         help="quadratic bound penalty on the final state")
    p_train.add_argument("--checkpoint", default=None,
                         help="warm-start from this checkpoint")
    p_train.add_argument("--checkpoint-every", type=int, default=0)
    p_train.add_argument("--jobs", type=int, default=1,
                         help="threads across minibatch members (no effect on "
                              "the single-member bundled scenarios)")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="roll out a checkpoint, no training")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--cfl-max", type=float, default=0.5)
    p_eval.set_defaults(fn=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference and adjoint checks")
    p_gc.add_argument("--cells", type=int, default=12)
    p_gc.add_argument("--steps", type=int, default=8)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--samples", type=int, default=50)
    p_gc.add_argument("--fd-step", type=float, default=1e-5)
    p_gc.add_argument("--fd-tol", type=float, default=1e-4)
    p_gc.add_argument("--adjoint-tol", type=float, default=1e-8)
    p_gc.add_argument("--config", default=None)
    p_gc.add_argument("--tape-stats", action="store_true",
                      help="print tape node count and largest partial")
    p_gc.add_argument("--corrupt-gradient", action="store_true",
                      help=argparse.SUPPRESS)  # negative-control test hook
    p_gc.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args, parser)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
