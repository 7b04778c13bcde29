"""Command-line front end: simulate, fit, sweep, spectra and rerun.

Every command writes plot-ready CSV files plus a ``manifest_<command>.json``
recording the arguments, derived seeds, version and outputs.  ``rerun``
replays a manifest; CSV output is a deterministic function of the manifest.

Exit codes: 0 success, 2 usage error or missing input, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, em, mcmc, spectra
from .model import NoiseParams, OUParams, add_noise, load_series, simulate_latent
from .nuts import SamplerConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3

OUT_ENV = "OU_DENOISE_OUT"
DEFAULT_GRIDS = {
    "dt_over_tau": [0.05, 0.1, 0.5, 1.0, 2.0, 4.0],
    "noise_ratio": [float(v) for v in np.logspace(-1, 1, 9)],
}
SWEEP_COLUMNS = [
    "variable", "grid_value", "replicate", "estimator", "status", "seed",
    "A_hat", "dA", "tau_hat", "dtau", "sigma_N_hat", "dsigma_N", "sigma_M_hat", "dsigma_M",
]

log = logging.getLogger("ou_denoise")


class UsageError(Exception):
    pass


def derive_seed(*keys) -> int:
    """Independent 32-bit seed for a stream identified by integer ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


class Run:
    """Collects outputs for one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace, argv: list):
        self.command = command
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.argv = argv
        self.parameters = {k: v for k, v in vars(args).items() if k not in ("handler", "out_dir")}
        self.seeds: dict = {}
        self.outputs: list = []
        self.metadata: dict = {}
        self.started = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(name)
        return p

    def finish(self, status: str = "ok") -> Path:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "parameters": self.parameters,
            "seeds": self.seeds,
            "version": version_string(),
            "status": status,
            "wall_time_s": time.perf_counter() - self.started,
            "outputs": self.outputs,
            "metadata": self.metadata,
        }
        p = self.out_dir / f"manifest_{self.command}.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
        return p


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def noise_from_args(args, A: float) -> NoiseParams:
    if args.ratio is not None:
        if args.total_noise is None:
            raise UsageError("--ratio needs --total-noise (the combined noise magnitude)")
        return NoiseParams.from_ratio(args.total_noise, args.ratio, second_moment=A)
    return NoiseParams(args.sigma_n, args.sigma_m)


def cmd_simulate(args, run: Run) -> int:
    noise = noise_from_args(args, args.A)
    run.seeds = {"latent": derive_seed(args.seed, 0), "noise": derive_seed(args.seed, 1)}
    x = simulate_latent(OUParams(args.A, args.tau), args.n, args.dt, run.seeds["latent"])
    y = add_noise(x, noise, run.seeds["noise"])
    x.to_csv(run.path(f"{args.prefix}latent.csv"))
    y.to_csv(run.path(f"{args.prefix}observed.csv"))
    run.metadata = {"sigma_N": noise.sigma_N, "sigma_M": noise.sigma_M}
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def sampler_config(args, seed: int) -> SamplerConfig:
    return SamplerConfig(
        n_samples=args.n_samples,
        n_warmup=args.n_warmup,
        target_accept=args.target_accept,
        max_tree_depth=args.max_tree_depth,
        seed=seed,
    )


def posterior_nonconverged(res: mcmc.PosteriorFit) -> bool:
    rhat = [v for v in res.chain.rhat.values() if math.isfinite(v)]
    return res.chain.flagged or (bool(rhat) and max(rhat) > 1.1)


def cmd_fit(args, run: Run) -> int:
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    y = load_series(path)
    prefix = args.prefix if args.prefix is not None else path.stem
    if args.method == "em":
        if args.noise != "additive-only":
            raise UsageError(
                f"EM handles additive noise only, not {args.noise!r}; "
                "use --method mcmc (with --noise mixed-known-ratio --ratio R when multiplicative noise is present)"
            )
        cfg = em.EMConfig(max_iters=args.max_iters, tol=args.tol, n_starts=args.n_starts,
                          init_strategy=args.init, seed=args.seed)
        res = em.fit(y, cfg)
        d = res.to_dict()
        run.path(f"{prefix}_em.json").write_text(res.to_json() + "\n")
        write_rows(run.path(f"{prefix}_em.csv"), list(d), [d])
        status = "ok" if res.converged else "nonconverged"
        run.metadata = {"converged": res.converged, "message": res.message}
        run.finish(status)
        if not res.converged:
            log.error("EM did not converge: %s", res.message)
            return EXIT_NONCONVERGED
        return EXIT_OK

    if args.noise == "mixed-known-ratio" and args.ratio is None:
        raise UsageError("--noise mixed-known-ratio requires --ratio")
    run.seeds = {"sampler": args.seed}
    cfg = sampler_config(args, args.seed)
    if args.augment_ratio is not None:
        if args.noise != "mixed-known-ratio" or args.sigma_n is None:
            raise UsageError("--augment-ratio needs --noise mixed-known-ratio, --ratio (measured) and --sigma-n (thermal)")
        run.seeds["artificial_noise"] = derive_seed(args.seed, 2)
        res = mcmc.add_artificial_noise_then_fit(
            y, args.ratio, args.augment_ratio, cfg, sigma_N=args.sigma_n, noise_seed=run.seeds["artificial_noise"]
        )
    else:
        spec = mcmc.ModelSpec(args.noise, known_ratio=args.ratio)
        res = mcmc.fit(y, spec, cfg)
    res.to_csv(run.path(f"{prefix}_mcmc_draws.csv"))
    summary = res.summary()
    rows = [{"parameter": k, **v} for k, v in summary.items()]
    write_rows(run.path(f"{prefix}_mcmc_summary.csv"), ["parameter", "mean", "sd", "q2.5", "q97.5"], rows)
    res.diagnostics_json(run.path(f"{prefix}_mcmc_diagnostics.json"))
    bad = posterior_nonconverged(res)
    run.metadata = {"divergences": res.chain.divergences, "flagged": res.chain.flagged}
    run.finish("nonconverged" if bad else "ok")
    if bad:
        log.error("sampler diagnostics flag non-convergence (divergences=%d)", res.chain.divergences)
        return EXIT_NONCONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_replicate(task: dict):
    """One (grid value, replicate) cell; returns ``(rows, timings)``."""
    variable, value, rep = task["variable"], task["grid_value"], task["replicate"]
    A, tau, n = task["A"], task["tau"], task["n"]
    seed = task["seed"]
    if variable == "dt_over_tau":
        dt = value * tau
        noise = NoiseParams(task["sigma_n"], task["sigma_m"])
    else:
        dt = task["dt"]
        noise = NoiseParams.from_ratio(task["total_noise"], value, second_moment=A)
    base = {"variable": variable, "grid_value": value, "replicate": rep, "seed": seed}
    rows, timings = [], []
    try:
        x = simulate_latent(OUParams(A, tau), n, dt, derive_seed(seed, 0))
        y = add_noise(x, noise, derive_seed(seed, 1))
    except Exception as exc:  # noqa: BLE001 - recorded as a row, sweep continues
        return [{**base, "estimator": est, "status": f"error: {exc}"} for est in task["estimators"]], []
    for est in task["estimators"]:
        t0 = time.perf_counter()
        row = {**base, "estimator": est}
        try:
            if est == "em":
                r = em.fit(y)
                row.update(status="ok" if r.converged else "nonconverged", A_hat=r.A, dA=r.dA, tau_hat=r.tau,
                           dtau=r.dtau, sigma_N_hat=r.sigma_N, dsigma_N=r.dsigma_N, sigma_M_hat=0.0, dsigma_M=0.0)
            else:
                cfg = SamplerConfig(n_samples=task["n_samples"], n_warmup=task["n_warmup"], seed=derive_seed(seed, 3))
                if variable == "noise_ratio":
                    res = mcmc.fit_known_ratio(y, value, cfg)
                else:
                    res = mcmc.fit(y, mcmc.ModelSpec("additive-only"), cfg)
                row.update(status="nonconverged" if posterior_nonconverged(res) else "ok",
                           A_hat=res.mean("A"), dA=res.sd("A"), tau_hat=res.mean("tau"), dtau=res.sd("tau"),
                           sigma_N_hat=res.mean("sigma_N"), dsigma_N=res.sd("sigma_N"))
                if variable == "noise_ratio":
                    row.update(sigma_M_hat=res.mean("sigma_M"), dsigma_M=res.sd("sigma_M"))
                else:
                    row.update(sigma_M_hat=0.0, dsigma_M=0.0)
        except Exception as exc:  # noqa: BLE001
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        rows.append(row)
        timings.append({"grid_value": value, "replicate": rep, "estimator": est, "runtime_s": time.perf_counter() - t0})
    return rows, timings


def rollup(rows, A: float, tau: float):
    out = []
    keys = sorted({(r["grid_value"], r["estimator"]) for r in rows})
    for value, est in keys:
        cell = [r for r in rows if r["grid_value"] == value and r["estimator"] == est]
        ok = [r for r in cell if r["status"] == "ok"]
        row = {"grid_value": value, "estimator": est, "n_ok": len(ok), "n_total": len(cell)}
        for name in ("A_hat", "tau_hat", "sigma_N_hat", "sigma_M_hat", "dA", "dtau"):
            vals = np.array([r[name] for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            qs = np.quantile(vals, [0.05, 0.25, 0.5, 0.75, 0.95]) if len(vals) else [math.nan] * 5
            for q, v in zip(("q05", "q25", "median", "q75", "q95"), qs):
                row[f"{name}_{q}"] = float(v)
        for name, truth, err in (("A", A, "dA"), ("tau", tau, "dtau")):
            hits = [abs(r[f"{name}_hat"] - truth) <= 3 * r[err] for r in ok if math.isfinite(r[err])]
            row[f"coverage3_{name}"] = float(np.mean(hits)) if hits else math.nan
        out.append(row)
    return out


def cmd_sweep(args, run: Run) -> int:
    grid = args.grid if args.grid is not None else DEFAULT_GRIDS[args.variable]
    if not grid:
        raise UsageError("grid must be non-empty")
    if args.replicates < 1:
        raise UsageError("replicates must be >= 1")
    estimators = args.method or (["em"] if args.variable == "dt_over_tau" else ["mcmc"])
    if args.variable == "noise_ratio" and "em" in estimators:
        raise UsageError("noise_ratio sweeps include multiplicative noise, which EM does not model; use --method mcmc")
    dt = args.dt if args.dt is not None else 0.1 * args.tau
    tasks = []
    for gi, value in enumerate(grid):
        for rep in range(args.replicates):
            tasks.append({
                "variable": args.variable, "grid_value": float(value), "replicate": rep,
                "seed": derive_seed(args.seed, gi, rep), "estimators": estimators,
                "A": args.A, "tau": args.tau, "n": args.n, "dt": dt,
                "sigma_n": args.sigma_n, "sigma_m": args.sigma_m, "total_noise": args.total_noise,
                "n_samples": args.n_samples, "n_warmup": args.n_warmup,
            })
    run.seeds = {f"{t['grid_value']}/{t['replicate']}": t["seed"] for t in tasks}
    run.parameters.update(grid=list(map(float, grid)), estimators=estimators, dt=dt)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_replicate, tasks))
    else:
        results = [_sweep_replicate(t) for t in tasks]
    rows = [r for rs, _ in results for r in rs]
    timings = [t for _, ts in results for t in ts]
    stem = f"sweep_{args.variable}"
    write_rows(run.path(f"{stem}.csv"), SWEEP_COLUMNS, rows)
    roll = rollup(rows, args.A, args.tau)
    write_rows(run.path(f"{stem}_rollup.csv"), list(roll[0]) if roll else ["grid_value"], roll)
    write_rows(run.path(f"{stem}_timings.csv"), ["grid_value", "replicate", "estimator", "runtime_s"], timings)
    failed = sum(r["status"] != "ok" for r in rows)
    run.metadata = {"rows": len(rows), "not_ok": failed}
    run.finish("ok" if not failed else "partial")
    return EXIT_OK


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


def cmd_spectra(args, run: Run) -> int:
    cases = {"ou": NoiseParams(), "thermal": NoiseParams(args.sigma_n, 0.0), "multiplicative": NoiseParams(0.0, args.sigma_m)}
    first = {c: [] for c in cases}
    second = {c: [] for c in cases}
    g2 = {c: [] for c in cases}
    variances = {c: ([], []) for c in cases}
    run.seeds = {}
    for rep in range(args.replicates):
        latent_seed = derive_seed(args.seed, rep, 0)
        run.seeds[f"latent/{rep}"] = latent_seed
        x = simulate_latent(OUParams(args.A, args.tau), args.n, args.dt, latent_seed)
        for ci, (case, noise) in enumerate(cases.items()):
            noise_seed = derive_seed(args.seed, rep, ci + 1)
            y = add_noise(x, noise, noise_seed)
            first[case].append(spectra.periodogram(y, segments=args.segments))
            second[case].append(spectra.second_order_spectrum(y, segments=args.segments))
            g2[case].append(spectra.empirical_g2(y, args.max_lag).values)
            variances[case][0].append(float(np.var(y.values)))
            variances[case][1].append(float(np.var(y.values**2)))
    checks = {}
    for case in cases:
        for order, specs, var in (("first", first[case], variances[case][0]), ("second", second[case], variances[case][1])):
            freqs = specs[0].freqs
            sp = spectra.Spectrum(freqs, np.mean([s.power for s in specs], axis=0))
            extra = {}
            if case == "ou":
                fn = spectra.ou_spectrum if order == "first" else spectra.ou_squared_spectrum
                extra["analytic"] = fn(freqs, args.A, args.tau, args.dt)
            name = f"spectrum_{case}_{order}.csv"
            sp.to_csv(run.path(name), extra)
            target = float(np.mean(var))
            checks[name] = {"area": sp.area(), "variance": target, "abs_error": abs(sp.area() - target)}
        lags = args.dt * np.arange(args.max_lag + 1)
        curve = spectra.CorrelationCurve(lags, np.mean(g2[case], axis=0))
        extra = {"analytic_stationary": spectra.stationary_g2(lags, args.A, args.tau)} if case == "ou" else {}
        curve.to_csv(run.path(f"g2_{case}.csv"), extra)
    run.metadata = {"normalization": "area-equals-variance", "area_checks": checks}
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun
# ---------------------------------------------------------------------------


def cmd_rerun(args) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    argv = list(manifest["argv"])
    cleaned = []
    skip = False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out-dir":
            skip = True
            continue
        if tok.startswith("--out-dir="):
            continue
        cleaned.append(tok)
    return main([*cleaned, "--out-dir", args.out_dir])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def float_list(text: str):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    return vals


def method_list(text: str):
    vals = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in ("em", "mcmc")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from em, mcmc")
    return vals


def positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def non_negative(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=os.environ.get(OUT_ENV, "."),
                        help=f"output directory (default: ${OUT_ENV} or the current directory)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--A", type=positive(float), default=1.0, help="stationary variance of the latent process")
    model.add_argument("--tau", type=positive(float), default=1.0, help="correlation time")
    model.add_argument("--n", type=positive(int), default=1500, help="number of samples")

    sampler = argparse.ArgumentParser(add_help=False)
    sampler.add_argument("--n-samples", type=positive(int), default=1000)
    sampler.add_argument("--n-warmup", type=int, default=1000)
    sampler.add_argument("--target-accept", type=float, default=0.8)
    sampler.add_argument("--max-tree-depth", type=positive(int), default=10)

    p = argparse.ArgumentParser(prog="ou-denoise", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common, model], help="simulate a latent OU series and a noisy observation")
    s.add_argument("--dt", type=positive(float), default=0.1, help="sampling interval")
    s.add_argument("--sigma-n", type=non_negative, default=0.2, help="thermal noise amplitude")
    s.add_argument("--sigma-m", type=non_negative, default=0.0, help="multiplicative noise amplitude")
    s.add_argument("--ratio", type=non_negative, default=None, help="noise ratio; overrides --sigma-n/--sigma-m")
    s.add_argument("--total-noise", type=positive(float), default=None, help="combined noise magnitude used with --ratio")
    s.add_argument("--prefix", default="")
    s.set_defaults(handler=cmd_simulate)

    f = sub.add_parser("fit", parents=[common, sampler], help="fit a series with EM or MCMC")
    f.add_argument("input", help="series as CSV (t,value) or JSON")
    f.add_argument("--method", choices=("em", "mcmc"), default="em")
    f.add_argument("--noise", choices=mcmc.NOISE_MODES, default="additive-only")
    f.add_argument("--ratio", type=non_negative, default=None, help="known noise ratio (mixed-known-ratio)")
    f.add_argument("--augment-ratio", type=positive(float), default=None,
                   help="add white noise to lower the ratio to this value before fitting")
    f.add_argument("--sigma-n", type=positive(float), default=None, help="known thermal amplitude (for --augment-ratio)")
    f.add_argument("--n-starts", type=positive(int), default=1)
    f.add_argument("--init", choices=("from-data-moments", "randomized"), default="from-data-moments")
    f.add_argument("--max-iters", type=positive(int), default=500)
    f.add_argument("--tol", type=positive(float), default=1e-8)
    f.add_argument("--prefix", default=None, help="output file prefix (default: input file stem)")
    f.set_defaults(handler=cmd_fit)

    w = sub.add_parser("sweep", parents=[common, model, sampler], help="replicated fits over a parameter grid")
    w.add_argument("--dt", type=positive(float), default=None,
                   help="sampling interval for noise_ratio sweeps (default 0.1 tau)")
    w.add_argument("--variable", choices=("dt_over_tau", "noise_ratio"), required=True)
    w.add_argument("--grid", type=float_list, default=None, help="comma-separated grid values")
    w.add_argument("--replicates", type=int, default=5)
    w.add_argument("--method", type=method_list, default=None, help="comma-separated estimators: em, mcmc")
    w.add_argument("--sigma-n", type=non_negative, default=0.2, help="thermal amplitude (dt_over_tau sweeps)")
    w.add_argument("--sigma-m", type=non_negative, default=0.0, help="multiplicative amplitude (dt_over_tau sweeps)")
    w.add_argument("--total-noise", type=positive(float), default=0.2, help="combined noise magnitude (noise_ratio sweeps)")
    w.add_argument("--jobs", type=positive(int), default=1)
    w.set_defaults(handler=cmd_sweep)

    sp = sub.add_parser("spectra", parents=[common, model], help="first/second-order spectra for the three noise cases")
    sp.add_argument("--dt", type=positive(float), default=0.1, help="sampling interval")
    sp.add_argument("--sigma-n", type=non_negative, default=0.2)
    sp.add_argument("--sigma-m", type=non_negative, default=0.2)
    sp.add_argument("--segments", type=int, default=8, help="Welch segments (1 for a plain periodogram)")
    sp.add_argument("--replicates", type=positive(int), default=1, help="number of simulated series to average")
    sp.add_argument("--max-lag", type=int, default=50)
    sp.set_defaults(handler=cmd_spectra)

    r = sub.add_parser("rerun", help="replay a manifest")
    r.add_argument("manifest")
    r.add_argument("--out-dir", default=os.environ.get(OUT_ENV, "."))
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(handler=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        recorded = list(argv)
        if args.command == "fit" and args.input in recorded:
            recorded[recorded.index(args.input)] = str(Path(args.input).resolve())
        run = Run(args.command, args, recorded)
        if args.command == "fit":
            run.parameters["input"] = str(Path(args.input).resolve())
        return args.handler(args, run)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"ou-denoise {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())
