"""Command-line entry point: scenario files in, CSV artifacts and a manifest out.

Exit codes: 0 success (all checks PASS), 1 usage or configuration error,
2 when any verification check FAILs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .expr import ExprError
from .hamiltonian import hamiltonian_for
from .model import ConfigError, Scenario, canonical_config, check_linear_growth, check_novikov_boundedness
from .model import load_scenario, sample_cloud
from .sde import ConstantPolicy, SimulationError, simulate, star_policies
from .solver import Grid, SolverError, ValueField, residual, solve_bi, solve_hjb_control
from .verify import (
    MCParams,
    estimate_game_values,
    fundamental_decomposition,
    payoff_from_bundle,
    scheme_allowance,
    verify_control,
    verify_saddle,
)

logger = logging.getLogger("isaacslab")

SUBCOMMANDS = ("validate", "solve", "isaacs-gap", "simulate", "verify-saddle", "game-value", "verify-control", "decompose")
EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
DEFAULT_OUT = "isaacslab_out"
DEFAULT_SLICES = 11
HIST_BINS = 40


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="isaacslab", description="Solve and verify zero-sum stochastic differential games.")
    p.add_argument("--version", action="version", version=f"isaacslab {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-nx", type=int, help="grid nodes per space dimension")
    p.add_argument("--grid-nt", type=int, help="number of time levels")
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--side", choices=("upper", "lower"))
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (ISAACSLAB_OUT overrides)")
    p.add_argument("--dump-paths", type=int, default=0, metavar="N", help="simulate: write the first N paths")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# ------------------------------------------------------------------ helpers


def resolve_scenario(name: str) -> Path:
    """A path on disk, or a bundled scenario matched by basename."""
    path = Path(name)
    if path.is_file():
        return path
    bundled = resources.files("isaacslab") / "scenarios"
    stem = path.name if path.suffix == ".cfg" else path.name + ".cfg"
    candidate = bundled / stem
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(f"scenario not found: {name}")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "PASS" if v else "FAIL"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


class Run:
    """Collects settings, output files and timings of one invocation."""

    def __init__(self, args, scenario: Scenario, path: Path):
        self.args = args
        self.scenario = scenario
        self.path = path
        self.timings: dict = {}
        self.outputs: list = []
        grid, mc = scenario.grid, scenario.mc
        self.seed = args.seed if args.seed is not None else int(mc.get("seed", 0))
        self.paths = args.paths if args.paths is not None else int(mc.get("paths", 20000))
        self.steps = args.steps if args.steps is not None else int(mc.get("steps", 400))
        self.workers = args.workers if args.workers is not None else int(mc.get("workers", 1))
        self.side = args.side or scenario.solver.get("side", "upper")
        self.nx = args.grid_nx
        self.nt = args.grid_nt if args.grid_nt is not None else grid.get("nt")
        out = os.environ.get("ISAACSLAB_OUT") or args.out or scenario.output.get("dir") or DEFAULT_OUT
        self.out = Path(out)
        self.stem = f"{scenario.spec.name}_{args.subcommand.replace('-', '_')}"
        if args.subcommand in ("solve", "isaacs-gap"):
            self.stem += f"_{self.side}"
        for name, val in (("paths", self.paths), ("steps", self.steps), ("workers", self.workers)):
            if val < 1:
                raise UsageError(f"--{name} must be >= 1")

    @property
    def mc(self) -> MCParams:
        return MCParams(self.paths, self.steps, self.seed, self.workers)

    @property
    def t0(self) -> float:
        return float(self.scenario.mc.get("t", 0.0))

    @property
    def x0(self) -> np.ndarray:
        x0 = self.scenario.mc.get("x0")
        if x0 is None:
            raise ConfigError("[mc] needs 'x0'")
        return np.asarray(x0, dtype=float)

    def grid(self) -> Grid:
        g = self.scenario.grid
        for key in ("lo", "hi"):
            if key not in g:
                raise ConfigError(f"[grid] needs '{key}'")
        n = [self.nx] * self.scenario.spec.d if self.nx is not None else g.get("n", 201)
        if self.nt is None:
            raise ConfigError("[grid] needs 'nt' (or pass --grid-nt)")
        try:
            return Grid.for_spec(self.scenario.spec, g["lo"], g["hi"], n, int(self.nt))
        except ValueError as exc:
            raise ConfigError(f"[grid] {exc}") from exc

    def timed(self, label, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[label] = self.timings.get(label, 0.0) + time.perf_counter() - t0
        return out

    def solve(self, side=None) -> ValueField:
        spec = self.scenario.spec
        grid = self.grid()
        if spec.is_control:
            return self.timed("solve", solve_hjb_control, spec, grid)
        return self.timed("solve", solve_bi, spec, grid, side or self.side)

    def write_csv(self, suffix: str, header: list, rows) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"{self.stem}{suffix}.csv"
        n = 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
                n += 1
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.outputs.append({"file": path.name, "sha256": digest, "rows": n})
        return path

    def write_manifest(self, status: int) -> Path:
        a = self.args
        overrides = {
            k: getattr(a, k)
            for k in ("seed", "grid_nx", "grid_nt", "paths", "steps", "side", "workers")
            if getattr(a, k) is not None
        }
        manifest = {
            "tool": "isaacslab",
            "version": __version__,
            "subcommand": a.subcommand,
            "scenario": str(self.path),
            "seed": self.seed,
            "overrides": overrides,
            "output_dir": str(self.out),
            "exit_code": status,
            "timings_s": {k: round(v, 6) for k, v in self.timings.items()},
            "outputs": self.outputs,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"{self.stem}.manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _slice_levels(nt: int, count: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, nt - 1, max(2, min(count, nt)))).astype(int))


def _verdict_rows(rows, prefix=""):
    for r in rows:
        yield (prefix + r.check, r.lhs, r.rhs, r.diff, r.se, r.tolerance, r.passed)


VERDICT_HEADER = ["check", "lhs", "rhs", "diff", "se", "tolerance", "verdict"]


def _deviations(cs):
    """Constant deviations at the two corners of a control box."""
    out = [ConstantPolicy(cs, cs.hi), ConstantPolicy(cs, cs.lo)]
    return out if not np.array_equal(cs.lo, cs.hi) else out[:1]


def _report_checks(rows) -> int:
    failed = [r for r in rows if not r.passed]
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.check}: diff={r.diff:.6g} tol={r.tolerance:.6g}")
    return EXIT_FAIL if failed else EXIT_OK


# -------------------------------------------------------------- subcommands


def cmd_validate(run: Run) -> int:
    spec = run.scenario.spec
    sys.stdout.write(canonical_config(run.scenario))
    cloud = sample_cloud(spec, 512, 4.0, seed=0)
    growth = check_linear_growth(spec, cloud)
    nov = check_novikov_boundedness(spec, cloud)
    for flag in (*growth.flags, *nov.flags):
        print(f"warning: {flag}", file=sys.stderr)
    return EXIT_OK


def _value_rows(field: ValueField, levels):
    grid = field.grid
    X = grid.nodes()
    times = grid.times
    for n in levels:
        v = field.v[n].reshape(-1)
        g = field.grad[n].reshape(-1, grid.d)
        for k in range(X.shape[0]):
            yield (times[n], *X[k], v[k], *g[k])


def cmd_solve(run: Run) -> int:
    field = run.solve()
    d = run.scenario.spec.d
    levels = _slice_levels(field.grid.nt, int(run.scenario.output.get("slices", DEFAULT_SLICES)))
    header = ["t", *[f"x{i + 1}" for i in range(d)], "v", *[f"dv_dx{i + 1}" for i in range(d)]]
    run.timed("write", run.write_csv, "", header, _value_rows(field, levels))
    res = run.timed("residual", residual, run.scenario.spec, field)
    run.write_csv("_residual", ["equation", "lax_friedrichs", "dt", "residual_max", "residual_l2"],
                  [(field.equation, bool(field.scheme["lax_friedrichs"]), field.grid.dt, res.max, res.l2)])
    print(f"{field.equation}: residual max {res.max:.3e}")
    return EXIT_OK


def cmd_isaacs_gap(run: Run) -> int:
    """Gap ``H_upper - H_lower`` at ``(s, x, Dv(s, x))`` on the grid, plus its time integral.

    The integral runs over the explicit-scheme levels ``t_{n+1}, ..., t_{nt-1}``
    used to step from ``T`` back to ``t_n``.
    """
    spec = run.scenario.spec
    field = run.solve()
    grid = field.grid
    engine = hamiltonian_for(spec)
    X = grid.nodes()
    gap = np.empty((grid.nt, X.shape[0]))
    for n, s in enumerate(grid.times):
        P = field.grad[n].reshape(-1, grid.d)
        gap[n] = engine.value("upper", s, X, P) - engine.value("lower", s, X, P)
    integral = np.zeros_like(gap)
    integral[:-1] = np.cumsum(gap[:0:-1], axis=0)[::-1] * grid.dt
    levels = _slice_levels(grid.nt, int(run.scenario.output.get("slices", DEFAULT_SLICES)))
    d = spec.d
    xs = [f"x{i + 1}" for i in range(d)]
    ps = [f"p{i + 1}" for i in range(d)]

    def rows():
        for n in levels:
            P = field.grad[n].reshape(-1, d)
            for k in range(X.shape[0]):
                yield (grid.times[n], *X[k], *P[k], gap[n, k])

    def integral_rows():
        for n in levels:
            for k in range(X.shape[0]):
                yield (grid.times[n], *X[k], integral[n, k])

    run.write_csv("", ["s", *xs, *ps, "gap"], rows())
    run.write_csv("_integrated", ["t", *xs, "gap_integral"], integral_rows())
    print(f"max gap {gap.max():.17g}; max integrated gap {integral.max():.17g}")
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    spec = run.scenario.spec
    field = run.solve()
    z1, z2 = star_policies(spec, field)
    bundle = run.timed("simulate", simulate, spec, z1, z2, run.t0, run.x0, run.paths, run.steps, run.seed, run.workers)
    est = payoff_from_bundle(spec, bundle)
    run.write_csv(
        "_summary",
        ["z1", "z2", "mean", "se", "running_mean", "terminal_mean", "n_paths", "n_steps", "clamped_fraction", "failed_paths"],
        [(z1.label, z2.label, est.mean, est.se, est.running_mean, est.terminal_mean, bundle.n_paths,
          bundle.n_steps, bundle.clamped_fraction, int(bundle.failed_paths.size))],
    )
    if run.args.dump_paths > 0:
        k = min(run.args.dump_paths, bundle.n_paths)
        d, k1, k2 = spec.d, spec.U1.k, spec.U2.k
        header = ["path_id", "step", "s", *[f"y{i + 1}" for i in range(d)],
                  *[f"u1_{i + 1}" for i in range(k1)], *[f"u2_{i + 1}" for i in range(k2)]]
        times = bundle.times
        nan1, nan2 = [float("nan")] * k1, [float("nan")] * k2

        def rows():
            for i in range(k):
                for n in range(bundle.n_steps + 1):
                    last = n == bundle.n_steps
                    u1 = nan1 if last else bundle.u1[i, n]
                    u2 = nan2 if last else bundle.u2[i, n]
                    yield (i, n, times[n], *bundle.y[i, n], *u1, *u2)

        run.write_csv("_paths", header, rows())
    print(f"J({z1.label},{z2.label}) = {est.mean:.6f} +- {est.se:.6f}")
    return EXIT_OK


def _payoff_rows(report_star, deviations):
    yield (*report_star.labels, report_star.mean, report_star.se)
    for _, est in deviations:
        yield (*est.labels, est.mean, est.se)


def cmd_verify_saddle(run: Run) -> int:
    spec = run.scenario.spec
    if spec.is_control:
        raise UsageError("verify-saddle needs a game; use verify-control for control problems")
    field = run.solve()
    run.timed("residual", scheme_allowance, spec, field)
    rep = run.timed(
        "verify", verify_saddle, spec, field, _deviations(spec.U1), _deviations(spec.U2), run.t0, run.x0, run.mc
    )
    run.write_csv("_payoffs", ["z1", "z2", "mean", "se"], _payoff_rows(rep.star, rep.deviations))
    run.write_csv("_verdict", VERDICT_HEADER, _verdict_rows(rep.rows))
    return _report_checks(rep.rows)


def _family(cs, star):
    fam = [star]
    corners = _deviations(cs)
    fam.extend(corners)
    mid = 0.5 * (cs.lo + cs.hi)
    if not any(np.array_equal(p.value, cs.clamp(mid)) for p in corners):
        fam.append(ConstantPolicy(cs, mid))
    return fam


def cmd_game_value(run: Run) -> int:
    spec = run.scenario.spec
    if spec.is_control:
        raise UsageError("game-value needs a game")
    field = run.solve()
    z1, z2 = star_policies(spec, field)
    fam1 = _family(spec.U1, z1)
    fam2 = _family(spec.U2, z2)
    rep = run.timed("verify", estimate_game_values, spec, field, fam1, fam2, run.t0, run.x0, run.mc)
    header = ["z1"]
    for lab in rep.labels2:
        header += [f"{lab}:mean", f"{lab}:se"]
    rows = []
    for i, lab in enumerate(rep.labels1):
        row = [lab]
        for j in range(len(rep.labels2)):
            row += [rep.means[i, j], rep.ses[i, j]]
        rows.append(row)
    run.write_csv("_matrix", header, rows)
    run.write_csv(
        "_values",
        ["sup_inf", "inf_sup", "max_se", "v"],
        [(rep.sup_inf, rep.inf_sup, rep.max_se, rep.v)],
    )
    run.write_csv("_verdict", VERDICT_HEADER, _verdict_rows(rep.rows))
    return _report_checks(rep.rows)


def random_constant_policies(cs, count: int, seed: int) -> list:
    """``count`` constant policies drawn without replacement from the control points."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(cs.size, size=min(count, cs.size), replace=False)
    return [ConstantPolicy(cs, cs.points[i]) for i in sorted(idx)]


def cmd_verify_control(run: Run) -> int:
    spec = run.scenario.spec
    if not spec.is_control:
        raise UsageError("verify-control needs a control problem (model.kind = 'control')")
    field = run.solve()
    run.timed("residual", scheme_allowance, spec, field)
    family = random_constant_policies(spec.U2, 3, run.seed)
    abs_tol = float(run.scenario.verify.get("abs_tol", 0.0))
    rep = run.timed("verify", verify_control, spec, field, family, run.t0, run.x0, run.mc, abs_tol=abs_tol)
    rows = [(rep.star.labels[1], rep.star.mean, rep.star.se)] + [(e.labels[1], e.mean, e.se) for e in rep.family]
    run.write_csv("_payoffs", ["z", "mean", "se"], rows)
    run.write_csv("_verdict", VERDICT_HEADER, _verdict_rows(rep.rows))
    return _report_checks(rep.rows)


def cmd_decompose(run: Run) -> int:
    spec = run.scenario.spec
    field = run.solve()
    z1, z2 = star_policies(spec, field)
    if spec.is_control:
        other = (z1, _deviations(spec.U2)[0])
    else:
        other = (_deviations(spec.U1)[0], z2)
    runs = [("star", (z1, z2)), ("deviation", other)]
    summary, hist, checks = [], [], []
    for name, (p1, p2) in runs:
        rep = run.timed("decompose", fundamental_decomposition, spec, field, p1, p2, run.t0, run.x0, run.mc)
        summary.append((name, p1.label, p2.label, rep.v, rep.mean_payoff, rep.mean_integral, rep.mean, rep.se,
                        rep.correlation, rep.allowance, rep.passed))
        counts, edges = np.histogram(rep.residuals, bins=HIST_BINS)
        hist.extend((name, edges[i], edges[i + 1], counts[i]) for i in range(HIST_BINS))
        checks.extend(replace(r, check=f"{name}: {r.check}") for r in rep.rows()[:1])
    run.write_csv(
        "_summary",
        ["run", "z1", "z2", "v", "mean_payoff", "mean_integral", "mean_R", "se_R", "corr_R_M", "allowance", "verdict"],
        summary,
    )
    run.write_csv("_histogram", ["run", "bin_lo", "bin_hi", "count"], hist)
    run.write_csv("_verdict", VERDICT_HEADER, _verdict_rows(checks))
    return _report_checks(checks)


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "isaacs-gap": cmd_isaacs_gap,
    "simulate": cmd_simulate,
    "verify-saddle": cmd_verify_saddle,
    "game-value": cmd_game_value,
    "verify-control": cmd_verify_control,
    "decompose": cmd_decompose,
}


def run(argv=None) -> int:
    """Run one subcommand and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"isaacslab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    job = None
    try:
        path = resolve_scenario(args.scenario)
        job = Run(args, load_scenario(path), path)
        status = COMMANDS[args.subcommand](job)
    except (UsageError, ConfigError, ExprError, SolverError, SimulationError, ValueError, OSError) as exc:
        print(f"isaacslab: error: {exc}", file=sys.stderr)
        status = EXIT_USAGE
    if job is not None:
        job.write_manifest(status)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
