"""Command-line front end.

Every subcommand reads a JSON scenario, writes its outputs atomically
under ``--out`` and finishes with ``manifest.json``.  Exit codes: 0 ok,
1 verification failure, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import contextlib
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import fracops as fo
from . import suites
from .elastic import SolverError, assemble_elastic, dn_map, exterior_basis, solve_dirichlet
from .fileio import canonical_json, sha256_bytes, sha256_file, write_array, write_csv, write_json
from .gridfield import smooth_bump
from .inversion import (DnData, LineSearchError, ReconstructionConfig, RungeProblem,
                        control_to_state, gauge_demo_1d, node_basis, reconstruct_lame,
                        runge_control)
from .liouville import GammaField, dn_map_q, q_potential, reduction_residual
from .scenario import ConfigError, Scenario, default_scenario
from .tensorlab import IsotropicParams, poisson_ratio

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class VerificationFailure(Exception):
    pass


class Run:
    """Output directory bookkeeping: timings, hashes, constants, manifest."""

    def __init__(self, command: str, scenario: Scenario, out: Path, seed: int, workers: int,
                 strict: bool, sweep: list[int] | None):
        self.command = command
        self.scenario = scenario
        self.out = out
        self.seed = seed
        self.workers = workers
        self.strict = strict
        self.sweep = sweep
        self.timings: dict[str, float] = {}
        self.outputs: dict[str, str] = {}
        self.constants: dict = {}
        self.tolerances: dict = {}
        self.stage_name = "setup"

    @contextlib.contextmanager
    def stage(self, name: str):
        self.stage_name = name
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def _record(self, paths):
        for p in paths:
            self.outputs[str(Path(p).relative_to(self.out))] = sha256_file(p)

    def array(self, name: str, arr, meta: dict | None = None):
        self._record(write_array(self.out / name, arr, meta))

    def table(self, name: str, header, rows, meta: dict | None = None):
        self._record(write_csv(self.out / name, header, rows, meta))

    def json(self, name: str, obj):
        p = write_json(self.out / name, suites._jsonable(obj))
        self._record([p])

    def input_hash(self) -> str:
        return sha256_bytes(canonical_json({"command": self.command, "scenario": self.scenario.doc,
                                            "seed": self.seed, "sweep": self.sweep}))

    def finish(self, status: str, code: int, error: str | None = None):
        man = {
            "command": self.command,
            "version": __version__,
            "inputHash": self.input_hash(),
            "scenarioHash": self.scenario.digest(),
            "seed": self.seed,
            "workers": self.workers,
            "strict": self.strict,
            "resolutionSweep": self.sweep,
            "timings": self.timings,
            "outputs": dict(sorted(self.outputs.items())),
            "constants": self.constants,
            "tolerances": self.tolerances,
            "status": status,
            "exitCode": code,
        }
        if error:
            man["error"] = error
            man["failedStage"] = self.stage_name
        write_json(self.out / "manifest.json", suites._jsonable(man))


def _parse_sweep(ctx, param, value):
    if value is None:
        return None
    try:
        out = [int(v) for v in value.replace(" ", "").split(",") if v]
    except ValueError:
        raise click.BadParameter("expected a comma-separated list of integers") from None
    if not out:
        raise click.BadParameter("empty resolution list")
    return out


def common(fn):
    opts = [
        click.option("--scenario", "scenario_path", type=click.Path(dir_okay=False),
                     help="Scenario JSON; defaults to the built-in 1D scenario."),
        click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
                     help="Output directory."),
        click.option("--workers", type=click.IntRange(min=1), default=None,
                     help="Worker threads (default: machine parallelism)."),
        click.option("--strict", is_flag=True,
                     help="Treat tolerance misses and support warnings as failures."),
        click.option("--resolution-sweep", "sweep", callback=_parse_sweep, default=None,
                     help="Comma-separated points-per-axis values, e.g. 256,512,1024."),
        click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=0, show_default=True),
    ]
    for o in reversed(opts):
        fn = o(fn)
    return fn


def _fp_policy(strict: bool) -> dict:
    # underflow is routine in the bump tails
    mode = "raise" if strict else "warn"
    return {"divide": mode, "over": mode, "invalid": mode, "under": "ignore"}


def _execute(command: str, body, scenario_path, out, workers, strict, sweep, seed):
    """Shared driver: load, run ``body(run)``, map exceptions to exit codes."""
    out = Path(out)
    workers = workers or os.cpu_count() or 1
    try:
        sc = Scenario.load(scenario_path) if scenario_path else Scenario(default_scenario(1))
    except ConfigError as e:
        click.echo(f"configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    run = Run(command, sc, out, seed, workers, strict, sweep)
    code, status, err = EXIT_OK, "ok", None
    with warnings.catch_warnings(), np.errstate(**_fp_policy(strict)):
        if strict:
            warnings.simplefilter("error", fo.SupportWarning)
        try:
            body(run)
        except VerificationFailure as e:
            code, status, err = EXIT_VERIFY, "verification_failed", str(e)
        except (ConfigError, fo.SupportError, fo.SupportWarning) as e:
            code, status, err = EXIT_CONFIG, "configuration_error", str(e)
        except (SolverError, LineSearchError, np.linalg.LinAlgError, FloatingPointError) as e:
            code, status, err = EXIT_NUMERIC, "numerical_failure", f"{type(e).__name__}: {e}"
    run.finish(status, code, err)
    if err:
        click.echo(f"{status} in stage {run.stage_name!r}: {err}", err=True)
    sys.exit(code)


def _resolutions(run: Run, block_N=None) -> list[int]:
    return run.sweep or block_N or [run.scenario.doc["pointsPerAxis"]]


def _tag(N: int, many: bool) -> str:
    return f"_N{N}" if many else ""


def _meta(setup, **extra) -> dict:
    return {"grid": setup.grid.to_dict(), "s": setup.s, **extra}


@click.group()
@click.version_option(__version__)
def main():
    """Fractional isotropic elasticity experiments."""


# verify ----------------------------------------------------------------------------

@main.command()
@common
def verify(scenario_path, out, workers, strict, sweep, seed):
    """Run verification checks and report measured values against tolerances."""

    def body(run: Run):
        sc = run.scenario
        block = sc.block("verify")
        names = block.get("checks", list(suites.DEFAULT_VERIFY))
        unknown = [n for n in names if n not in suites.CHECKS]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; known: {sorted(suites.CHECKS)}")
        params = block.get("params", {})
        rng = np.random.default_rng(run.seed)
        results = []
        for name in names:
            kw = dict(params.get(name, {}))
            if name in ("reduction", "alessandrini", "closed_loop", "runge", "gauge", "q_identity"):
                kw.setdefault("s", sc.s)
            if name in ("reduction", "q_identity"):
                kw.setdefault("n", sc.n)
            if name == "reduction" and run.sweep:
                kw.setdefault("N_list", tuple(run.sweep))
            if name == "sqrt" and block.get("fault"):
                kw["fault"] = block["fault"]
            with run.stage(name):
                try:
                    c = suites.run_check(name, rng, **kw)
                except TypeError as e:
                    raise ConfigError(f"bad parameters for check {name!r}: {e}") from None
            results.append(c)
            click.echo(c.line())
            if "c_star" in c.details:
                run.constants[f"c_star_{name}"] = c.details["c_star"]
            for row in c.details.get("rows", []):
                if "c_star" in row:
                    run.constants.setdefault(f"c_star_{name}", []).append(row["c_star"])
            run.tolerances[name] = {"value": c.value, "tol": c.tol, "passed": c.passed}
        # timings live in the manifest so the report itself is reproducible
        report = [{k: v for k, v in c.to_dict().items() if k != "seconds"} for c in results]
        run.json("report.json", {"checks": report, "passed": all(c.passed for c in results)})
        run.table("report.csv", ["check", "value", "tol", "passed"],
                  [(c.name, c.value, c.tol, int(c.passed)) for c in results])
        failed = [c.name for c in results if not c.passed]
        click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
        if failed:
            raise VerificationFailure(f"failed checks: {', '.join(failed)}")

    _execute("verify", body, scenario_path, out, workers, strict, sweep, seed)


# forward ---------------------------------------------------------------------------

def _datum(setup, spec: dict) -> np.ndarray:
    grid, masks = setup.grid, setup.masks
    mask = getattr(masks, spec.get("region", "w1"))
    X = grid.coords()
    center = spec.get("center", X[mask].mean(axis=0).tolist())
    radius = spec.get("radius", 0.3 if grid.n == 1 else 0.5)
    v = smooth_bump(grid, center, radius, spec.get("amplitude", 1.0))
    if np.any((v != 0) & ~mask):
        raise ConfigError("forward datum must be supported in its exterior region")
    f = np.zeros(grid.shape + (grid.n,))
    comp = spec.get("component", 0)
    if comp >= grid.n:
        raise ConfigError("datum component exceeds the dimension")
    f[..., comp] = v
    return f


@main.command()
@common
def forward(scenario_path, out, workers, strict, sweep, seed):
    """Solve the exterior Dirichlet problem for one datum."""

    def body(run: Run):
        sc = run.scenario
        Ns = _resolutions(run)
        rows = []
        for N in Ns:
            tag = _tag(N, len(Ns) > 1)
            with run.stage(f"setup{tag}"):
                st = sc.setup(N)
                asm = assemble_elastic(st.lame, st.s)
                f = _datum(st, sc.block("forward").get("datum", {}))
            with run.stage(f"solve{tag}"):
                u, info = solve_dirichlet(asm, f, rtol=st.rtol, return_info=True)
            energy = asm.form(u, u)
            rows.append((N, info.iterations, info.residual, energy))
            run.array(f"u{tag}.f64", u, _meta(st, field="displacement", rtol=st.rtol,
                                              residual=info.residual))
            run.array(f"f{tag}.f64", f, _meta(st, field="datum"))
            run.tolerances[f"cg_residual{tag}"] = info.residual
            if strict and info.residual > st.rtol:
                raise VerificationFailure(f"CG residual {info.residual:.2e} above {st.rtol:.0e}")
        run.table("forward.csv", ["N", "iterations", "residual", "energy"], rows)

    _execute("forward", body, scenario_path, out, workers, strict, sweep, seed)


# dnmap -----------------------------------------------------------------------------

def _bases(st, spec: dict):
    kind = spec.get("kind", "node")
    stride = spec.get("stride", 1 if st.grid.n == 1 else 4)
    radius = spec.get("radius")
    b1 = exterior_basis(st.grid, st.masks.w1, stride=stride, kind=kind, radius=radius)
    b2 = exterior_basis(st.grid, st.masks.w2, stride=stride, kind=kind, radius=radius)
    if not b1 or not b2:
        raise ConfigError("empty exterior basis; shrink the bump radius or stride")
    return b1, b2, {"kind": kind, "stride": stride, "radius": radius}


def _parallel_dn(fn, basis1, workers: int):
    """Split ``basis1`` into contiguous chunks; columns are independent, order is kept."""
    if workers <= 1 or len(basis1) < 2:
        return [fn(basis1)]
    k = min(workers, len(basis1))
    edges = np.linspace(0, len(basis1), k + 1).astype(int)
    chunks = [basis1[a:b] for a, b in zip(edges, edges[1:])]
    with ThreadPoolExecutor(k) as ex:
        return list(ex.map(fn, chunks))


@main.command()
@common
def dnmap(scenario_path, out, workers, strict, sweep, seed):
    """Compute the DN matrix between the two exterior regions."""

    def body(run: Run):
        sc = run.scenario
        block = sc.block("dnmap")
        Ns = _resolutions(run)
        rows = []
        for N in Ns:
            tag = _tag(N, len(Ns) > 1)
            with run.stage(f"setup{tag}"):
                st = sc.setup(N)
                asm = assemble_elastic(st.lame, st.s)
                b1, b2, bmeta = _bases(st, block.get("basis", {}))
            with run.stage(f"dn{tag}"):
                if st.method == "direct":
                    parts = [dn_map(asm, b1, b2, method="direct")]
                else:
                    parts = _parallel_dn(lambda c: dn_map(asm, c, b2, rtol=st.rtol), b1, run.workers)
            D = np.concatenate([p.matrix for p in parts], axis=1)
            res = max(p.max_residual for p in parts)
            meta = _meta(st, scale="Q", basis=bmeta, rtol=st.rtol, method=st.method,
                         maxResidual=res, regions=sc.doc.get("regions", "default"),
                         layout="matrix[j, i] = <Lambda f_i, g_j>")
            run.array(f"dn{tag}.f64", D, meta)
            run.table(f"dn{tag}.csv", [f"f{i}" for i in range(D.shape[1])], D.tolist(), meta)
            row = {"N": N, "maxResidual": res, "cStar": float("nan"), "relation": float("nan")}
            if block.get("transformed", False):
                with run.stage(f"dn_q{tag}"):
                    gm = GammaField(st.lame)
                    plan = fo.FourierPlan(st.grid)
                    Q = q_potential(gm, plan, st.s)
                    LQ = np.concatenate([p.matrix for p in _parallel_dn(
                        lambda c: dn_map_q(Q, gm, c, b2, plan, asm, st.rtol), b1, run.workers)], axis=1)
                sc_ = st.grid.n / 2 + st.s
                c = float(np.sum(LQ * D) / np.sum(D * D) / sc_)
                rel = float(np.max(np.abs(LQ - c * sc_ * D)) / np.max(np.abs(LQ)))
                row.update(cStar=c, relation=rel)
                run.constants[f"c_star{tag}"] = c
                run.array(f"dn_q{tag}.f64", LQ, dict(meta, scale="B_Q"))
            rows.append(row)
            run.tolerances[f"cg_residual{tag}"] = res
            if strict and res > st.rtol:
                raise VerificationFailure(f"CG residual {res:.2e} above {st.rtol:.0e}")
        keys = ["N", "maxResidual", "cStar", "relation"]
        run.table("dn_summary.csv", keys, [[r[k] for k in keys] for r in rows])

    _execute("dnmap", body, scenario_path, out, workers, strict, sweep, seed)


# reduce ----------------------------------------------------------------------------

@main.command()
@common
def reduce(scenario_path, out, workers, strict, sweep, seed):
    """Residual of the reduced formula against the quadrature assembly over resolutions."""

    def body(run: Run):
        sc = run.scenario
        Ns = _resolutions(run, sc.block("reduce").get("N"))
        rows = []
        for N in Ns:
            with run.stage(f"N{N}"):
                st = sc.setup(N)
                us, ps = suites.reduction_fields(st.grid)
                r = reduction_residual(us, st.lame, fo.FourierPlan(st.grid), st.s, tests=ps)
            rows.append((N, r.residual, r.residual_l2, r.c_star))
            click.echo(f"N={N}: residual {r.residual:.3e}  c*={r.c_star:.6f}")
        run.table("reduction.csv", ["N", "residual", "residual_l2", "c_star"], rows,
                  {"s": sc.s, "grid": {"dimension": sc.n, "halfWidth": sc.doc["halfWidth"]}})
        run.constants["c_star"] = [r[3] for r in rows]
        dec = all(a[1] > b[1] for a, b in zip(rows, rows[1:]))
        run.tolerances["strictly_decreasing"] = dec
        if strict and not dec:
            raise VerificationFailure("residual column is not strictly decreasing")

    _execute("reduce", body, scenario_path, out, workers, strict, sweep, seed)


# runge -----------------------------------------------------------------------------

@main.command()
@common
def runge(scenario_path, out, workers, strict, sweep, seed):
    """Tikhonov-regularised Runge approximation of a target field in omega."""

    def body(run: Run):
        sc = run.scenario
        block = sc.block("runge")
        alphas = block.get("alphas", [10.0 ** -k for k in range(1, 7)])
        for N in _resolutions(run):
            tag = _tag(N, run.sweep is not None and len(run.sweep) > 1)
            with run.stage(f"setup{tag}"):
                st = sc.setup(N)
                gm = GammaField(st.lame)
                Q = q_potential(gm, fo.FourierPlan(st.grid), st.s)
                W = np.zeros(st.grid.shape, bool)
                for r in block.get("control", ["w1", "w2"]):
                    W |= getattr(st.masks, r)
                tspec = block.get("target", {})
                target = np.zeros(st.grid.shape + (st.grid.n,))
                comp = tspec.get("component", 0)
                if comp >= st.grid.n:
                    raise ConfigError("target component exceeds the dimension")
                target[..., comp] = smooth_bump(st.grid, tspec.get("center", [0.0] * st.grid.n),
                                                tspec.get("radius", 0.9))
                if target[~st.masks.omega].any():
                    raise ConfigError("Runge target must be supported in omega")
                asm = assemble_elastic(st.lame, st.s)
                basis = node_basis(st.grid, W)
            with run.stage(f"control_to_state{tag}"):
                S = control_to_state(gm, Q, basis, asm)
            rows, res = [], None
            with run.stage(f"tikhonov{tag}"):
                for a in alphas:
                    res = runge_control(RungeProblem(target, W, a), Q, gm, basis=basis, asm=asm, S=S)
                    rows.append((a, res.misfit, res.relative_misfit, res.iterations))
            run.table(f"runge{tag}.csv", ["alpha", "misfit", "relative_misfit", "iterations"], rows)
            run.array(f"control{tag}.f64", res.control, _meta(st, alpha=alphas[-1]))
            mono = all(b[2] <= a[2] * (1 + 1e-12) for a, b in zip(rows, rows[1:]))
            run.tolerances[f"misfit_monotone{tag}"] = mono
            run.constants[f"final_relative_misfit{tag}"] = rows[-1][2]
            if strict and not mono:
                raise VerificationFailure("misfit does not decrease with alpha")

    _execute("runge", body, scenario_path, out, workers, strict, sweep, seed)


# invert ----------------------------------------------------------------------------

@main.command()
@common
def invert(scenario_path, out, workers, strict, sweep, seed):
    """Closed-loop Lame reconstruction from self-generated DN data."""

    def body(run: Run):
        sc = run.scenario
        block = sc.block("invert")
        target = block.get("target", 0.1)
        rng = np.random.default_rng(run.seed)
        for N in _resolutions(run):
            tag = _tag(N, run.sweep is not None and len(run.sweep) > 1)
            with run.stage(f"setup{tag}"):
                st = sc.setup(N)
                lm = sc.doc["lame"]
                nu = block.get("nu", lm.get("nu"))
                if nu is None:
                    nu = float(poisson_ratio(IsotropicParams(st.grid.n, lm["L0"], lm["M0"])))
                template = sc.lame_field(st.grid, st.masks, [])
                template = template.with_M(template.M, nu=nu)
                truth_bumps = [dict(b, field="M") for b in block["truth"]]
                truth = sc.lame_field(st.grid, st.masks, truth_bumps)
                truth = truth.with_M(truth.M, nu=nu)
                b1, b2, bmeta = _bases(st, block.get("basis", {}))
            with run.stage(f"data{tag}"):
                D = dn_map(assemble_elastic(truth, st.s), b1, b2, method="direct")
                noise = block.get("noise", 0.0)
                if noise:
                    D.matrix = D.matrix + noise * np.max(np.abs(D.matrix)) * rng.standard_normal(
                        D.matrix.shape)
            cfg = ReconstructionConfig(nu=nu, s=st.s, beta=block.get("beta", 1e-14),
                                       max_iter=block.get("maxIter", 15),
                                       gradient=block.get("gradient", "fd"))
            with run.stage(f"reconstruct{tag}"):
                res = reconstruct_lame(DnData([D], st.s, st.grid, noise), template, cfg, b1, b2,
                                       truth=truth)
            hist = res.history
            run.table(f"history{tag}.csv", ["iter", "objective", "step", "relM", "relL", "reldM"],
                      [[h.get(k, float("nan")) for k in ("iter", "objective", "step", "relM",
                                                         "relL", "reldM")] for h in hist])
            run.array(f"M_est{tag}.f64", res.lame.M, _meta(st, field="M"))
            run.array(f"L_est{tag}.f64", res.lame.L, _meta(st, field="L"))
            summary = {"N": N, "relErrorM": res.rel_error_M, "relErrorL": res.rel_error_L,
                       "relErrorPerturbation": res.rel_error_dM, "target": target,
                       "iterations": len(hist) - 1, "nu": nu, "beta": cfg.beta, "basis": bmeta}
            run.json(f"invert{tag}.json", summary)
            click.echo(f"N={N}: rel. error M {res.rel_error_M:.3e}, L {res.rel_error_L:.3e}")
            run.tolerances[f"rel_error{tag}"] = {"M": res.rel_error_M, "L": res.rel_error_L,
                                                 "target": target}
            if strict and max(res.rel_error_M, res.rel_error_L) > target:
                raise VerificationFailure(f"reconstruction error above target {target}")

    _execute("invert", body, scenario_path, out, workers, strict, sweep, seed)


# gauge1d ---------------------------------------------------------------------------

@main.command()
@common
def gauge1d(scenario_path, out, workers, strict, sweep, seed):
    """DN distances between 1D fields that share the bulk modulus."""

    def body(run: Run):
        sc = run.scenario
        if sc.n != 1:
            raise ConfigError("gauge1d needs a one-dimensional scenario")
        block = sc.block("gauge1d")
        for N in _resolutions(run):
            tag = _tag(N, run.sweep is not None and len(run.sweep) > 1)
            st = sc.setup(N)
            with run.stage(f"gauge{tag}"):
                T = gauge_demo_1d(block.get("K", 3.0), block.get("M", [1.0, 0.5, 1.25]), st.grid,
                                  st.masks, st.s, K_contrast=block.get("KContrast"))
            run.table(f"gauge{tag}.csv", ["a", "b", "same_class", "distance"],
                      [(r["a"], r["b"], int(r["same_class"]), r["distance"]) for r in T.rows])
            run.array(f"distances{tag}.f64", T.distances, _meta(st, labels=T.labels))
            same = [r["distance"] for r in T.rows if r["same_class"]]
            run.tolerances[f"same_class_max{tag}"] = max(same, default=0.0)
            for r in T.rows:
                click.echo(f"{r['a']:>16} vs {r['b']:<16} {r['distance']:.3e}")
            if strict and same and max(same) > 1e-10:
                raise VerificationFailure("same-class DN maps differ")

    _execute("gauge1d", body, scenario_path, out, workers, strict, sweep, seed)


if __name__ == "__main__":
    main()
