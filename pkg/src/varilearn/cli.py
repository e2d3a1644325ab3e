"""Command-line driver.

Subcommands: add-noise, denoise, learn, learn-dynamic, grid-search,
gradcheck, metrics. Every run is deterministic for a fixed seed; summaries
are JSON with sorted keys and no timestamps so identical invocations
produce byte-identical files. Exit codes: 0 success, 1 usage/configuration
error, 2 solver or accuracy failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import metrics as metrics_mod
from .bilevel import (LearnOptions, LineSearchError, ProblemTemplate,
                      check_gradient, grid_search, learn)
from .config import ConfigError, apply_config, parse_assignments, read_config
from .fidelity import DomainError, FidelityKind, parse_noise_spec, synthesize_noise
from .grids import ImageGrid
from .imageio import ImageIOError, load_image, load_manifest, save_image
from .problems import Positivity, RegKind, SolverError
from .sampling import dynamic_learn
from .solvers import solve, solve_gauss_poisson, solve_infconv_l1l2

_HISTORY_COLUMNS = ("iter", "sample_size", "cost", "gnorm", "cum_solves")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path, payload) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _echo_args(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k not in ("func", "command") and not callable(v)}


def _summary(args, results: dict) -> dict:
    return {"command": args.command, "config": _echo_args(args),
            "results": results}


def _write_history_csv(path, history) -> None:
    lines = [",".join(_HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join([
            str(row["iteration"]), str(row["sample_size"]),
            f"{row['cost']:.17g}", f"{row['gnorm']:.17g}",
            str(row["solves"])]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


# ----------------------------------------------------------------------
# argument groups


def _add_template_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--reg", choices=["tv", "tgv2", "ictv", "infconv", "gauss-poisson"],
                   default="tv", help="regularization model or mixed-noise variant")
    p.add_argument("--fidelity", nargs="+", choices=["gaussian", "poisson", "l1"],
                   default=["gaussian"], help="data term(s) for tv/tgv2/ictv")
    p.add_argument("--mu", type=float, default=1e-12,
                   help="quadratic gradient smoothing weight")
    p.add_argument("--gamma", type=float, default=100.0,
                   help="huber parameter of the regularizer")
    p.add_argument("--fid-gamma", type=float, default=None,
                   help="huber parameter for l1 data terms (default: --gamma)")
    p.add_argument("--positivity", action="store_true",
                   help="enable the low-intensity quadratic penalty")
    p.add_argument("--eta", type=float, default=1e4, help="positivity penalty weight")
    p.add_argument("--delta", type=float, default=1e-3,
                   help="positivity penalty threshold")
    p.add_argument("--h", type=float, default=None,
                   help="mesh size (default 1/max(image dimension))")
    p.add_argument("--config", default=None,
                   help="key=value file; command-line flags override it")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=1e-7,
                   help="relative residual tolerance of the inner solver")
    p.add_argument("--atol", type=float, default=0.0,
                   help="absolute residual tolerance of the inner solver")
    p.add_argument("--solver-max-iter", type=int, default=100,
                   help="inner Newton iteration cap")


def _add_learn_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="training set manifest (JSON)")
    p.add_argument("--init", required=True,
                   help="initial values of the learned weights, e.g. lam1=1000")
    p.add_argument("--fixed", default=None,
                   help="weights held constant, e.g. alpha1=1")
    p.add_argument("--max-iter", type=int, default=100, help="outer iteration cap")
    p.add_argument("--gtol", type=float, default=1e-6,
                   help="stop when the gradient shrinks by this factor")
    p.add_argument("--ftol", type=float, default=1e-10,
                   help="stop on this relative cost decrease")
    p.add_argument("--output-dir", default=".",
                   help="where summary.json and history.csv go")


def _template_from_args(args) -> ProblemTemplate:
    fixed = parse_assignments(args.fixed) if getattr(args, "fixed", None) else {}
    positivity = Positivity(eta=args.eta, delta=args.delta) if args.positivity else None
    if args.reg == "infconv":
        from .problems import Combine
        fidelities = (FidelityKind.IMPULSE_L1, FidelityKind.GAUSSIAN_L2)
        combine = Combine.INFCONV_L1L2
        reg = RegKind.TV
    elif args.reg == "gauss-poisson":
        from .problems import Combine
        fidelities = (FidelityKind.GAUSSIAN_L2, FidelityKind.POISSON_KL)
        combine = Combine.GAUSS_POISSON
        reg = RegKind.TV
    else:
        from .problems import Combine
        fidelities = tuple(FidelityKind(k) for k in args.fidelity)
        combine = Combine.WEIGHTED_SUM
        reg = RegKind(args.reg)
    fid_gammas = None
    if args.fid_gamma is not None:
        fid_gammas = tuple(
            args.fid_gamma if k is FidelityKind.IMPULSE_L1 else np.inf
            for k in fidelities)
    return ProblemTemplate(reg=reg, fidelities=fidelities, combine=combine,
                           mu=args.mu, gamma=args.gamma, fid_gammas=fid_gammas,
                           positivity=positivity, fixed=fixed)


def _learn_options(args) -> LearnOptions:
    # grid-search reuses this without the outer-loop flags
    defaults = LearnOptions()
    return LearnOptions(max_iter=getattr(args, "max_iter", defaults.max_iter),
                        gtol=getattr(args, "gtol", defaults.gtol),
                        ftol=getattr(args, "ftol", defaults.ftol),
                        solve_tol=args.tol, solve_atol=args.atol,
                        solve_max_iter=args.solver_max_iter)


# ----------------------------------------------------------------------
# subcommands


def _cmd_add_noise(args) -> int:
    clean = load_image(args.input, h=args.h)
    noisy = synthesize_noise(clean, parse_noise_spec(args.noise), seed=args.seed)
    save_image(noisy, args.output)
    if args.summary:
        _write_json(args.summary, _summary(args, {
            "psnr": _json_float(metrics_mod.psnr(noisy, clean)),
            "snr": _json_float(metrics_mod.snr(noisy, clean))}))
    return 0


def _cmd_denoise(args) -> int:
    noisy = load_image(args.input, h=args.h)
    if args.reg == "infconv":
        if args.lam1 is None or args.lam2 is None:
            raise ConfigError("infconv needs --lambda and --lam2")
        result = solve_infconv_l1l2(
            noisy, args.lam1, args.lam2, alpha=args.alpha1, mu=args.mu,
            gamma=args.gamma, fid_gamma=args.fid_gamma, tol=args.tol,
            atol=args.atol, max_iter=args.solver_max_iter)
    elif args.reg == "gauss-poisson":
        if args.lam1 is None or args.lam2 is None:
            raise ConfigError("gauss-poisson needs --lambda and --lam2")
        result = solve_gauss_poisson(
            noisy, args.lam1, args.lam2, alpha=args.alpha1, mu=args.mu,
            gamma=args.gamma, tol=args.tol, atol=args.atol,
            max_iter=args.solver_max_iter)
    else:
        template = _template_from_args(args)
        weights: dict[str, object] = {"alpha1": args.alpha1}
        if args.reg in ("tgv2", "ictv"):
            if args.alpha2 is None:
                raise ConfigError(f"{args.reg} needs --alpha2")
            weights["alpha2"] = args.alpha2
        if args.lambda_map:
            weights["lam1"] = load_image(args.lambda_map, h=args.h)
        elif args.lam1 is not None:
            weights["lam1"] = args.lam1
        else:
            raise ConfigError("denoise needs --lambda or --lambda-map")
        if len(template.fidelities) > 1:
            if args.lam2 is None:
                raise ConfigError("two data terms need --lam2")
            weights["lam2"] = args.lam2
        problem = template.instantiate(weights, noisy)
        result = solve(problem, tol=args.tol, atol=args.atol,
                       max_iter=args.solver_max_iter)
    save_image(result.u, args.output)
    results = {"converged": bool(result.converged),
               "iterations": int(result.iterations),
               "energy": result.energy,
               "residual": result.info["residual"]}
    if args.clean:
        clean = load_image(args.clean, h=args.h)
        results["psnr"] = _json_float(metrics_mod.psnr(result.u, clean))
        results["psnr_noisy"] = _json_float(metrics_mod.psnr(noisy, clean))
        results["ssim"] = _json_float(metrics_mod.ssim(result.u, clean))
        results["snr"] = _json_float(metrics_mod.snr(result.u, clean))
    if args.summary:
        _write_json(args.summary, _summary(args, results))
    return 0


def _learn_results(res) -> dict:
    return {"params": {k: _json_float(v) for k, v in res.params.items()},
            "cost": res.cost, "grad": {k: _json_float(v) for k, v in res.grad.items()},
            "iterations": res.iterations, "status": res.status,
            "converged": res.converged, "solves": res.solves,
            "sample_sizes": res.sample_sizes, "bfgs_skips": res.bfgs_skips}


def _cmd_learn(args) -> int:
    training = load_manifest(args.manifest)
    template = _template_from_args(args)
    res = learn(template, training, parse_assignments(args.init),
                options=_learn_options(args))
    os.makedirs(args.output_dir, exist_ok=True)
    _write_history_csv(os.path.join(args.output_dir, "history.csv"), res.history)
    _write_json(os.path.join(args.output_dir, "summary.json"),
                _summary(args, _learn_results(res)))
    return 0


def _cmd_learn_dynamic(args) -> int:
    training = load_manifest(args.manifest)
    template = _template_from_args(args)
    res = dynamic_learn(training, template, parse_assignments(args.init),
                        theta=args.theta, initial_size=args.s0, seed=args.seed,
                        options=_learn_options(args))
    os.makedirs(args.output_dir, exist_ok=True)
    _write_history_csv(os.path.join(args.output_dir, "history.csv"), res.history)
    results = _learn_results(res)
    results["confirmed_cost"] = res.confirmed_cost
    results["augmentations"] = res.augmentations
    _write_json(os.path.join(args.output_dir, "summary.json"),
                _summary(args, results))
    return 0


def _cmd_grid_search(args) -> int:
    training = load_manifest(args.manifest)
    template = _template_from_args(args)
    if args.scale == "log":
        values = np.geomspace(args.start, args.stop, args.count)
    else:
        values = np.linspace(args.start, args.stop, args.count)
    base = parse_assignments(args.base) if args.base else {}
    res = grid_search(template, training, args.name, values, base=base,
                      options=_learn_options(args))
    os.makedirs(args.output_dir, exist_ok=True)
    _write_json(os.path.join(args.output_dir, "summary.json"), _summary(args, {
        "name": res.name, "values": [float(v) for v in res.values],
        "costs": [float(c) for c in res.costs],
        "best_value": res.best_value, "best_cost": res.best_cost}))
    return 0


def _cmd_gradcheck(args) -> int:
    training = load_manifest(args.manifest)
    template = _template_from_args(args)
    report = check_gradient(template, training, parse_assignments(args.params),
                            rel_step=args.rel_step, solve_tol=args.tol,
                            solve_atol=max(args.atol, 1e-12), seed=args.seed)
    worst = max(r["rel_error"] for r in report.values())
    passed = worst <= args.check_tol
    payload = _summary(args, {
        "report": {k: {kk: _json_float(vv) for kk, vv in r.items()}
                   for k, r in report.items()},
        "worst_rel_error": _json_float(worst), "passed": passed})
    if args.summary:
        _write_json(args.summary, payload)
    print(json.dumps(payload["results"], sort_keys=True, indent=2))
    return 0 if passed else 2


def _cmd_metrics(args) -> int:
    u = load_image(args.input, h=args.h)
    f0 = load_image(args.reference, h=args.h)
    results = {
        "snr": _json_float(metrics_mod.snr(u, f0)),
        "psnr": _json_float(metrics_mod.psnr(u, f0, peak=args.peak)),
        "ssim": _json_float(metrics_mod.ssim(u, f0, peak=args.peak)),
        "tv_input": metrics_mod.tv_seminorm(u, gamma=args.tv_gamma),
        "tv_reference": metrics_mod.tv_seminorm(f0, gamma=args.tv_gamma),
        "interior_condition": metrics_mod.interior_condition(u, f0, gamma=args.tv_gamma),
    }
    print(json.dumps(results, sort_keys=True, indent=2))
    if args.summary:
        _write_json(args.summary, _summary(args, results))
    return 0


# ----------------------------------------------------------------------
# parser assembly and dispatch


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="varilearn",
                     description="Learn and apply variational denoising weights.")
    subs = parser.add_subparsers(dest="command", metavar="command")
    table: dict[str, _Parser] = {}

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.set_defaults(func=func, command=name)
        table[name] = p
        return p

    p = sub("add-noise", _cmd_add_noise, "corrupt a clean image reproducibly")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--noise", required=True,
                   help="e.g. gaussian(0.02), poisson(100), impulse(0.05), sums with +")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--summary", default=None)
    p.add_argument("--config", default=None)

    p = sub("denoise", _cmd_denoise, "solve one denoising problem")
    _add_template_flags(p)
    _add_solver_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--clean", default=None, help="ground truth for quality metrics")
    p.add_argument("--lambda", "--lam1", dest="lam1", type=float, default=None,
                   help="data weight")
    p.add_argument("--lambda-map", default=None,
                   help="image file with a pixelwise data weight")
    p.add_argument("--lam2", type=float, default=None, help="second data weight")
    p.add_argument("--alpha1", type=float, default=1.0, help="regularization weight")
    p.add_argument("--alpha2", type=float, default=None,
                   help="second regularization weight (tgv2/ictv)")
    p.add_argument("--summary", default=None)

    p = sub("learn", _cmd_learn, "optimize weights against a training set")
    _add_template_flags(p)
    _add_solver_flags(p)
    _add_learn_flags(p)

    p = sub("learn-dynamic", _cmd_learn_dynamic,
            "weight learning with adaptive training subsets")
    _add_template_flags(p)
    _add_solver_flags(p)
    _add_learn_flags(p)
    p.add_argument("--theta", type=float, default=0.5,
                   help="variance gate strictness in [0,1)")
    p.add_argument("--s0", type=int, default=2, help="initial sample size")
    p.add_argument("--seed", type=int, default=0, help="sampler seed")

    p = sub("grid-search", _cmd_grid_search, "cost scan along one weight")
    _add_template_flags(p)
    _add_solver_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--name", required=True, help="weight to scan, e.g. lam1")
    p.add_argument("--start", type=float, required=True)
    p.add_argument("--stop", type=float, required=True)
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--scale", choices=["log", "linear"], default="log")
    p.add_argument("--base", default=None, help="other weights, e.g. alpha1=1")
    p.add_argument("--output-dir", default=".")

    p = sub("gradcheck", _cmd_gradcheck,
            "compare adjoint gradients against finite differences")
    _add_template_flags(p)
    _add_solver_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True,
                   help="weights at which to differentiate, e.g. lam1=500")
    p.add_argument("--rel-step", type=float, default=1e-4)
    p.add_argument("--check-tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary", default=None)

    p = sub("metrics", _cmd_metrics, "quality metrics between two images")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--tv-gamma", type=float, default=math.inf)
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--summary", default=None)
    p.add_argument("--config", default=None)

    return parser, table


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except UsageError as exc:
            print(f"error: {exc}", file=sys.stderr)
            parser.print_usage(sys.stderr)
            return 1
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if getattr(args, "config", None):
            apply_config(table[args.command], read_config(args.config))
            args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, DomainError, LineSearchError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ImageIOError, FileNotFoundError, IsADirectoryError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
