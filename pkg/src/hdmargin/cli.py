"""Command-line front end: theory curves, Monte Carlo checks, estimation, CV.

Exit codes: 0 success, 1 usage error, 2 numerical failure (an unconverged
required solve).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import estimate as est
from . import simulate as sim
from . import theory
from .losses import Loss, parse_loss

__all__ = ["main", "RunConfig", "parse_grid", "agreement_rows"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunConfig:
    """Validated arguments of one CLI invocation."""

    subcommand: str
    losses: list[Loss]
    grid: np.ndarray
    seed: int
    out: Path
    model_path: Path | None = None
    data_path: Path | None = None
    inline_model: theory.PopulationModel | None = None
    p: int = 250
    reps: int = 100
    noise: str = "gaussian"
    homogeneous: bool = False
    splits: int = 100
    train_frac: float = 0.95
    solver: str = "auto"
    jobs: int = 1


def parse_grid(spec: str) -> np.ndarray:
    """Parse ``min:max:count`` with optional ``:log``/``:lin`` suffix (log default)."""
    spec = spec.strip().lower()
    if spec.endswith(")") and "(" in spec:
        spec, _, kind = spec[:-1].rpartition("(")
    else:
        parts = spec.split(":")
        kind = "log"
        if parts and parts[-1] in ("log", "lin"):
            kind = parts[-1]
            spec = ":".join(parts[:-1])
    try:
        lo_s, hi_s, count_s = spec.split(":")
        lo, hi, count = float(lo_s), float(hi_s), int(count_s)
    except ValueError:
        raise UsageError(f"malformed grid spec {spec!r}; expected min:max:count[:log|:lin]")
    if not (lo > 0 and hi > lo and count >= 2):
        raise UsageError("grid bounds must be positive with max > min and count >= 2")
    if kind == "lin":
        return np.linspace(lo, hi, count)
    if kind == "log":
        return np.logspace(math.log10(lo), math.log10(hi), count)
    raise UsageError(f"unknown grid kind {kind!r}")


def _add_common(p: _Parser):
    p.add_argument("--loss", action="append", default=[],
                   help="loss spec (repeatable): plr | svm | dwd:q=F | lum:a=F,c=F")
    p.add_argument("--grid", default="1e-3:1e3:50:log",
                   help="lambda grid min:max:count[:log|:lin]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def _build_parser() -> _Parser:
    p = _Parser(prog="hdmargin",
                description="Asymptotic precision of regularized margin classifiers "
                            "under spiked covariance models")
    sub = p.add_subparsers(dest="subcommand", required=True)

    t = sub.add_parser("theory", help="solve precision curves for a model file")
    _add_common(t)
    t.add_argument("--model", required=True, help="population model JSON")
    t.add_argument("--solver", default="auto", choices=["auto", "homogeneous", "general"])

    s = sub.add_parser("simulate", help="Monte Carlo versus theory on synthetic data")
    _add_common(s)
    s.add_argument("--model", help="population model JSON")
    s.add_argument("--mu", type=float, help="inline model: signal size")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--alpha", type=float, help="total sample ratio n/p")
    s.add_argument("--spikes", default="", help="comma list of spike strengths")
    s.add_argument("--overlaps", default="", help="comma list of spike projections R_k")
    s.add_argument("--p", type=int, default=250)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--noise", default="gaussian", choices=["gaussian", "rademacher-scaled"])
    s.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("estimate", help="estimate a spiked model from a dataset CSV")
    e.add_argument("--data", required=True, help="dataset CSV (label,f1,...,fp)")
    e.add_argument("--homogeneous", action="store_true",
                   help="pool classes for a shared covariance")
    e.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("compare", help="estimated-model theory versus split CV")
    _add_common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--homogeneous", action="store_true")
    c.add_argument("--splits", type=int, default=100)
    c.add_argument("--train-frac", type=float, default=0.95)
    return p


def _parse_losses(args) -> list[Loss]:
    specs = getattr(args, "loss", [])
    if not specs:
        raise UsageError("at least one --loss is required")
    try:
        return [parse_loss(s) for s in specs]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _config(args) -> RunConfig:
    cfg = RunConfig(
        subcommand=args.subcommand,
        losses=_parse_losses(args) if args.subcommand != "estimate" else [],
        grid=parse_grid(args.grid) if hasattr(args, "grid") else np.array([]),
        seed=getattr(args, "seed", 0),
        out=Path(args.out),
    )
    if args.subcommand == "theory":
        cfg.model_path = Path(args.model)
        cfg.solver = args.solver
    elif args.subcommand == "simulate":
        has_file = args.model is not None
        has_inline = args.mu is not None or args.alpha is not None
        if has_file == has_inline:
            raise UsageError("simulate needs exactly one of --model or --mu/--alpha")
        if has_file:
            cfg.model_path = Path(args.model)
        else:
            if args.mu is None or args.alpha is None:
                raise UsageError("inline model needs both --mu and --alpha")
            spikes = [float(v) for v in args.spikes.split(",") if v.strip()]
            overlaps = [float(v) for v in args.overlaps.split(",") if v.strip()]
            if len(spikes) != len(overlaps):
                raise UsageError("--spikes and --overlaps must have equal length")
            try:
                cfg.inline_model = theory.PopulationModel.homogeneous(
                    mu=args.mu, sigma=args.sigma, alpha=args.alpha,
                    lambdas=spikes, R=overlaps)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
        cfg.p = args.p
        cfg.reps = args.reps
        cfg.noise = args.noise
        cfg.jobs = args.jobs
    elif args.subcommand == "estimate":
        cfg.data_path = Path(args.data)
        cfg.homogeneous = args.homogeneous
    elif args.subcommand == "compare":
        cfg.data_path = Path(args.data)
        cfg.homogeneous = args.homogeneous
        cfg.splits = args.splits
        cfg.train_frac = args.train_frac
    return cfg


def _load_model(path) -> theory.PopulationModel:
    try:
        return theory.PopulationModel.load(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _loss_tag(loss: Loss) -> str:
    return loss.spec_string().replace(":", "_").replace(",", "_").replace("=", "")


def run_theory(cfg: RunConfig) -> int:
    model = _load_model(cfg.model_path)
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = {"model": str(cfg.model_path), "losses": {}}
    n_unconverged = 0
    best = None
    for loss in cfg.losses:
        curve = theory.sweep_lambda(loss, model, cfg.grid, solver=cfg.solver)
        tag = _loss_tag(loss)
        curve.write_csv(cfg.out / f"curve_{tag}.csv")
        n_unconverged += curve.n_unconverged
        entry = {
            "lambda_star": curve.lambda_star,
            "precision_star": curve.precision_star,
            "unconverged_points": curve.n_unconverged,
            "right_edge_argmax": bool(curve.points
                                      and curve.lambda_star >= curve.points[-1].lam),
        }
        summary["losses"][loss.spec_string()] = entry
        if not math.isnan(curve.precision_star) and (
                best is None or curve.precision_star > best[1]):
            best = (loss.spec_string(), curve.precision_star, curve.lambda_star)
    if best:
        summary["best"] = {"loss": best[0], "precision": best[1], "lambda": best[2]}
    (cfg.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_NUMERIC if n_unconverged else EXIT_OK


def agreement_rows(mc_points, theory_values):
    """Merge MC and theory curves into CSV rows with a 2-SE agreement flag."""
    rows = []
    for pt, th in zip(mc_points, theory_values):
        agree = abs(th - pt.mean) <= 2.0 * pt.se if math.isfinite(th) else False
        rows.append(
            f"{pt.lam:.6g},{pt.mean:.6g},{pt.se:.6g},{th:.6g},{pt.reps_converged},"
            f"{str(agree).lower()}"
        )
    return rows


def run_simulate(cfg: RunConfig) -> int:
    model = _load_model(cfg.model_path) if cfg.model_path else cfg.inline_model
    spec = sim.GeneratorSpec.from_model(model, p=cfg.p, seed=cfg.seed, noise=cfg.noise)
    cfg.out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for loss in cfg.losses:
        points = sim.monte_carlo_curve(spec, loss, cfg.grid, reps=cfg.reps,
                                       n_jobs=cfg.jobs)
        theory_vals = []
        warm = None
        solver = (theory.solve_homogeneous if spec.model.is_symmetric
                  else theory.solve_general)
        for pt in points[::-1]:
            order = solver(loss, spec.model, pt.lam, warm=warm)
            if order.converged:
                warm = order
                theory_vals.append(theory.predict_precision(order, spec.model).balanced)
            else:
                failures += 1
                theory_vals.append(math.nan)
        theory_vals.reverse()
        failures += sum(pt.reps - pt.reps_converged for pt in points)
        rows = ["lambda,mc_mean,mc_se,theory,reps_converged,agree"]
        rows.extend(agreement_rows(points, theory_vals))
        (cfg.out / f"mc_{_loss_tag(loss)}.csv").write_text("\n".join(rows) + "\n")
    return EXIT_NUMERIC if failures else EXIT_OK


def run_estimate(cfg: RunConfig) -> int:
    try:
        data = sim.Dataset.read_csv(cfg.data_path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        report = est.estimate_model(data, homogeneous=cfg.homogeneous)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg.out.mkdir(parents=True, exist_ok=True)
    report.model.save(cfg.out / "model.json")
    report.save(cfg.out / "report.json")
    return EXIT_OK


def _cv_curve(data: sim.Dataset, loss: Loss, grid, splits: int,
              train_frac: float, seed: int):
    """Mean balanced test precision per lambda over stratified random splits."""
    rng = np.random.default_rng([seed, 0xCF5EED])
    idx_plus = np.flatnonzero(data.labels > 0)
    idx_minus = np.flatnonzero(data.labels < 0)
    if min(idx_plus.size, idx_minus.size) < 2:
        raise UsageError("need at least two samples per class for CV")
    grid_desc = np.asarray(sorted(grid))[::-1]
    sums = np.zeros(grid_desc.size)
    for _ in range(splits):
        test_idx = []
        for idx in (idx_plus, idx_minus):
            perm = rng.permutation(idx)
            n_test = max(1, int(round((1.0 - train_frac) * idx.size)))
            test_idx.append(perm[:n_test])
        test = np.concatenate(test_idx)
        mask = np.ones(data.n, dtype=bool)
        mask[test] = False
        train_ds = sim.Dataset(features=data.features[mask], labels=data.labels[mask])
        ytest = data.labels[test]
        xtest = data.features[test]
        init = None
        for j, lam in enumerate(grid_desc):
            fit = sim.train(train_ds, loss, lam, tol=1e-6, init=init)
            if fit.converged:
                init = (fit.w, fit.w0)
            scores = xtest @ fit.w / math.sqrt(train_ds.p) + fit.w0
            correct = np.sign(scores) * ytest > 0
            plus = ytest > 0
            sums[j] += 0.5 * (correct[plus].mean() + correct[~plus].mean())
    means = sums / splits
    return grid_desc[::-1], means[::-1]


def run_compare(cfg: RunConfig) -> int:
    try:
        data = sim.Dataset.read_csv(cfg.data_path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = est.estimate_model(data, homogeneous=cfg.homogeneous)
    model = report.model
    cfg.out.mkdir(parents=True, exist_ok=True)
    report.model.save(cfg.out / "model.json")
    report.save(cfg.out / "report.json")

    solver = "homogeneous" if cfg.homogeneous else "auto"
    summary = {"losses": {}}
    failures = 0
    for loss in cfg.losses:
        curve = theory.sweep_lambda(loss, model, cfg.grid, solver=solver)
        failures += curve.n_unconverged
        lams, cv = _cv_curve(data, loss, cfg.grid, cfg.splits, cfg.train_frac, cfg.seed)
        theory_by_lam = {pt.lam: pt.balanced for pt in curve.points}
        rows = ["lambda,theory,cv_mean"]
        for lam, cv_val in zip(lams, cv):
            rows.append(f"{lam:.6g},{theory_by_lam.get(lam, math.nan):.6g},{cv_val:.6g}")
        (cfg.out / f"compare_{_loss_tag(loss)}.csv").write_text("\n".join(rows) + "\n")
        cv_best = int(np.argmax(cv))
        summary["losses"][loss.spec_string()] = {
            "theory_lambda_star": curve.lambda_star,
            "theory_precision_star": curve.precision_star,
            "cv_lambda_star": float(lams[cv_best]),
            "cv_precision_star": float(cv[cv_best]),
        }
    (cfg.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_NUMERIC if failures else EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
        runner = {
            "theory": run_theory,
            "simulate": run_simulate,
            "estimate": run_estimate,
            "compare": run_compare,
        }[cfg.subcommand]
        return runner(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
