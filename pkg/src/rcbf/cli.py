"""Configuration, experiment drivers and the ``rcbf`` command line.

Jobs: ``verify`` (single parameter), ``verify-sweep`` (parameter list),
``synth`` (lower-bound ladder, optionally refined over a partition),
``select`` (metric-constrained parameter choice), ``export-sdpa``
(write the verification SDP to a file), ``selftest``.

Results are emitted as a schema-versioned JSON file plus CSV grids, with
matplotlib figures rendered alongside. Exit codes: 0 success, 2 config
error, 3 solver failure, 4 self-test failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, RcbfError, SolverFailure
from .model import (
    CbfCandidate,
    ControlSet,
    SystemModel,
    ThetaSet,
    cbf_space,
    state_space,
    theta_space,
    value_grid_oracle,
    variable_bounds,
)
from .momentrelax import VerificationVerdict, VerifyTols, build_moment_sdp, default_scales, theta_radii, verify
from .polyalg import Polynomial, parse_polynomial
from .popbuild import build_verification_pop, dump_pop, fix_theta
from .sdpcore import SolverSettings, write_sdpa
from .synth import (
    LowerBoundPoly,
    SelectionResult,
    SynthesisLevel,
    SynthesisRecord,
    ThetaMeasure,
    build_lower_bound_sos,
    maximize_lower_bound,
    recover_lower_bound,
    select_by_metric,
)

SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class JobConfig:
    """Validated job description; construct through :func:`load_config`."""

    model: SystemModel
    cbf: CbfCandidate
    job: str = "verify"
    kappa: int = 4
    nus: tuple[int, ...] = (3,)
    thetas: tuple[tuple[float, ...], ...] = ()
    partition: tuple[float, ...] | None = None
    tolerances: VerifyTols = field(default_factory=VerifyTols)
    solver_overrides: dict = field(default_factory=dict)
    stage_overrides: dict = field(default_factory=dict)
    include_dual_bound: bool = True
    include_ball: bool = False
    grid_points: int = 200
    select_metric: str | None = None
    select_sense: str = "max"
    select_nu: int = 3
    select_kappa: int = 4
    backend: str = "embedded"
    workers: int = 1
    plots: bool = True
    output_dir: str = "results"
    raw: dict = field(default_factory=dict)

    def solver_for(self, stage: str) -> SolverSettings:
        """Stage preset (moment, sos, theta) merged with user overrides."""
        preset = {
            "moment": SolverSettings.for_moment,
            "sos": SolverSettings.for_sos,
            "theta": SolverSettings.for_theta,
        }[stage]
        merged = {**self.solver_overrides, **self.stage_overrides.get(stage, {})}
        return preset(**merged)


def bundled_config_path(name: str) -> Path:
    """Path of a packaged example configuration (with or without .json)."""
    if not name.endswith(".json"):
        name += ".json"
    with resources.as_file(resources.files("rcbf.configs") / name) as p:
        return Path(p)


def _cfg_get(raw: dict, path: str, default=None, required=False):
    cur = raw
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if required:
                raise ConfigError(f"{path}: missing required field")
            return default
        cur = cur[part]
    return cur


def _parse_theta_samples(spec, k: int) -> tuple[tuple[float, ...], ...]:
    if spec is None:
        return ()
    if isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"thetas: range must be start:step:stop, got {spec!r}")
        start, step, stop = (float(p) for p in parts)
        count = int(round((stop - start) / step)) + 1
        vals = [start + i * step for i in range(count)]
        return tuple((round(v, 12),) for v in vals)
    out = []
    for item in spec:
        vec = [float(v) for v in (item if isinstance(item, (list, tuple)) else [item])]
        if len(vec) != k:
            raise ConfigError(f"thetas: sample {item!r} has {len(vec)} coords, expected {k}")
        out.append(tuple(vec))
    return tuple(out)


def _build_control(raw: dict) -> ControlSet:
    kind = _cfg_get(raw, "kind", required=True)
    if kind == "box":
        hw = _cfg_get(raw, "halfwidths", required=True)
        return ControlSet(kind="box", m=len(hw), halfwidths=tuple(float(w) for w in hw))
    if kind == "ellipsoid":
        W = _cfg_get(raw, "W", required=True)
        return ControlSet(kind="ellipsoid", m=len(W), W=tuple(tuple(float(v) for v in r) for r in W))
    if kind == "polytope":
        W = _cfg_get(raw, "W", required=True)
        d = _cfg_get(raw, "d", required=True)
        verts = _cfg_get(raw, "vertices")
        return ControlSet(
            kind="polytope",
            m=len(W[0]),
            W=tuple(tuple(float(v) for v in r) for r in W),
            d=tuple(float(v) for v in d),
            vertices=tuple(tuple(float(v) for v in r) for r in verts) if verts else None,
        )
    if kind == "general":
        polys = _cfg_get(raw, "polys", required=True)
        m = int(_cfg_get(raw, "m", required=True))
        return ControlSet(kind="general", m=m, general_polys=tuple(polys))
    raise ConfigError(f"model.control.kind: unknown kind {kind!r}")


def _build_theta_set(raw: dict) -> ThetaSet:
    kind = _cfg_get(raw, "kind", required=True)
    if kind == "interval":
        return ThetaSet(kind="interval", lower=float(raw["lower"]), upper=float(raw["upper"]))
    if kind == "box":
        return ThetaSet(kind="box", box=tuple((float(lo), float(hi)) for lo, hi in raw["box"]))
    if kind == "ellipse-coupled":
        return ThetaSet(
            kind="ellipse-coupled",
            lower=float(raw["lower"]),
            upper=float(raw["upper"]),
            xi=float(raw["xi"]),
        )
    if kind == "general":
        return ThetaSet(
            kind="general",
            general_rows=tuple(raw.get("rows", ())),
            box=tuple((float(lo), float(hi)) for lo, hi in raw["box"]),
        )
    raise ConfigError(f"cbf.theta.kind: unknown kind {kind!r}")


def load_config(path_or_name: str | Path, overrides: dict | None = None) -> JobConfig:
    """Load and validate a JSON job configuration.

    ``path_or_name`` may be a file path or the name of a bundled example
    (``vanderpol_clean``, ``vanderpol_uncertain``). CLI flags arrive as
    ``overrides`` and take precedence over file contents.
    """
    p = Path(path_or_name)
    if not p.exists():
        try:
            p = bundled_config_path(str(path_or_name))
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError(f"config file not found: {path_or_name}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}")
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}

    try:
        f_txt = _cfg_get(raw, "model.f", required=True)
        n = len(f_txt)
        xsp = state_space(n)
        f = tuple(parse_polynomial(s, xsp) for s in f_txt)
        g_txt = _cfg_get(raw, "model.g", required=True)
        g = tuple(tuple(parse_polynomial(s, xsp) for s in row) for row in g_txt)
        j_txt = _cfg_get(raw, "model.J")
        J = tuple(tuple(parse_polynomial(s, xsp) for s in row) for row in j_txt) if j_txt else None
        m_eps = float(_cfg_get(raw, "model.m_eps", 0.0))
        control = _build_control(_cfg_get(raw, "model.control", required=True))
        model = SystemModel(f=f, g=g, J=J, m_eps=m_eps, control=control)
    except ParseError as exc:
        raise ConfigError(f"model: {exc}")
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}")

    try:
        theta_set = _build_theta_set(_cfg_get(raw, "cbf.theta", required=True))
        bsp = cbf_space(n, theta_set.k)
        b = parse_polynomial(_cfg_get(raw, "cbf.b", required=True), bsp)
        family = _cfg_get(raw, "cbf.family", "auto")
        cbf = CbfCandidate(b=b, theta_set=theta_set, family=family)
    except ParseError as exc:
        raise ConfigError(f"cbf.b: {exc}")
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cbf: {exc}")

    job = raw.get("job", "verify")
    if job not in ("verify", "sweep", "synth", "select"):
        raise ConfigError(f"job: unknown job {job!r}")

    tol_raw = raw.get("tolerances", {})
    tols = VerifyTols(
        tol_verify=float(tol_raw.get("tol_verify", 1e-6)),
        feas_tol=float(tol_raw.get("feas_tol", 1e-6)),
        rank_tol=tol_raw.get("rank_tol", "auto"),
    )
    allowed = {f.name for f in dataclasses.fields(SolverSettings)}
    solver_raw = dict(raw.get("solver", {}))
    stage_overrides = {}
    for stage in ("moment", "sos", "theta"):
        stage_raw = dict(raw.get(f"solver_{stage}", {}))
        bad = set(stage_raw) - allowed
        if bad:
            raise ConfigError(f"solver_{stage}: unknown settings {sorted(bad)}")
        if stage_raw:
            stage_overrides[stage] = stage_raw
    bad = set(solver_raw) - allowed
    if bad:
        raise ConfigError(f"solver: unknown settings {sorted(bad)}")

    workers = int(raw.get("workers", os.environ.get("RCBF_WORKERS", 1)))
    partition = raw.get("partition")
    if partition is not None:
        partition = tuple(float(v) for v in partition)
        if theta_set.kind != "interval":
            raise ConfigError("partition: refined synthesis needs an interval parameter set")
        if list(partition) != sorted(partition) or len(partition) < 2:
            raise ConfigError("partition: need an increasing list of breakpoints")

    sel = raw.get("select", {})
    return JobConfig(
        model=model,
        cbf=cbf,
        job=job,
        kappa=int(raw.get("kappa", 4)),
        nus=tuple(int(v) for v in raw.get("nus", [3])),
        thetas=_parse_theta_samples(raw.get("thetas"), theta_set.k),
        partition=partition,
        tolerances=tols,
        solver_overrides=solver_raw,
        stage_overrides=stage_overrides,
        include_dual_bound=bool(raw.get("include_dual_bound", True)),
        include_ball=bool(raw.get("include_ball", False)),
        grid_points=int(raw.get("grid_points", 200)),
        select_metric=sel.get("metric"),
        select_sense=sel.get("sense", "max"),
        select_nu=int(sel.get("nu", 3)),
        select_kappa=int(sel.get("kappa", 4)),
        backend=raw.get("backend", "embedded"),
        workers=workers,
        plots=bool(raw.get("plots", True)),
        output_dir=raw.get("output_dir", "results"),
        raw=raw,
    )


# --------------------------------------------------------------------------
# Result bundle
# --------------------------------------------------------------------------

@dataclass
class ResultBundle:
    """Structured results plus the settings that produced them."""

    job: str
    results: dict
    settings: dict
    csv_payloads: dict[str, str] = field(default_factory=dict)
    figures: dict[str, object] = field(default_factory=dict)  # name -> draw closure

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "job": self.job,
            "settings": self.settings,
            "results": self.results,
        }
        return json.dumps(doc, indent=2)


def _settings_snapshot(cfg: JobConfig) -> dict:
    return {
        "job": cfg.job,
        "kappa": cfg.kappa,
        "nus": list(cfg.nus),
        "backend": cfg.backend,
        "include_dual_bound": cfg.include_dual_bound,
        "include_ball": cfg.include_ball,
        "tolerances": {
            "tol_verify": cfg.tolerances.tol_verify,
            "feas_tol": cfg.tolerances.feas_tol,
            "rank_tol": cfg.tolerances.rank_tol,
        },
        "solver": {
            stage: dataclasses.asdict(cfg.solver_for(stage))
            for stage in ("moment", "sos", "theta")
        },
        "workers": cfg.workers,
        "partition": list(cfg.partition) if cfg.partition else None,
    }


def _verdict_dict(v: VerificationVerdict) -> dict:
    return {
        "theta": list(v.theta),
        "kappa": v.kappa,
        "rho": v.rho,
        "dual_obj": v.dual_obj,
        "status": v.status,
        "flat_rank": v.flat_rank,
        "kappa_prime": v.kappa_prime,
        "witness_x": [list(map(float, w)) for w in v.witness_x],
        "witness_value": v.witness_value,
        "residuals": {k: float(val) for k, val in v.residuals.items()},
        "iterations": v.iterations,
        "seconds": v.seconds,
        "message": v.message,
    }


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------

def run_verify(cfg: JobConfig, thetas: Sequence[Sequence[float]] | None = None) -> ResultBundle:
    """Single verification or a sweep over parameter samples.

    Individual solve failures are recorded per row and the sweep
    continues.
    """
    samples = list(thetas if thetas is not None else cfg.thetas)
    if not samples:
        raise ConfigError("thetas: no parameter samples given")
    bounds = variable_bounds(cfg.model, cfg.cbf)
    pop_sym = build_verification_pop(
        cfg.model, cfg.cbf, None, bounds, cfg.include_dual_bound, cfg.include_ball
    )

    def one(theta):
        try:
            return verify(
                cfg.model,
                cfg.cbf,
                theta,
                cfg.kappa,
                tols=cfg.tolerances,
                settings=cfg.solver_for("moment"),
                bounds=bounds,
                pop_symbolic=pop_sym,
                include_dual_bound=cfg.include_dual_bound,
                include_ball=cfg.include_ball,
                backend=cfg.backend,
            )
        except RcbfError as exc:
            return exc

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outs = list(pool.map(one, samples))
    else:
        outs = [one(th) for th in samples]

    rows = []
    for theta, out in zip(samples, outs):
        if isinstance(out, Exception):
            rows.append(
                {
                    "theta": list(theta),
                    "rho": float("nan"),
                    "status": "error",
                    "witness_x": [],
                    "flat_rank": None,
                    "seconds": 0.0,
                    "message": str(out),
                }
            )
        else:
            rows.append(_verdict_dict(out))

    bundle = ResultBundle(
        job="sweep" if len(samples) > 1 else "verify",
        results={"verdicts": rows},
        settings=_settings_snapshot(cfg),
    )
    bundle.csv_payloads["sweep.csv"] = _sweep_csv(cfg, rows)
    if cfg.plots and cfg.cbf.k == 1 and len(samples) > 1:
        from . import report

        def draw(path):
            return report.sweep_figure(rows, path)

        bundle.figures["sweep.png"] = draw
    return bundle


def run_verify_sweep(cfg: JobConfig) -> ResultBundle:
    return run_verify(cfg)


def _sweep_csv(cfg: JobConfig, rows: list[dict]) -> str:
    k = cfg.cbf.k
    n = cfg.model.n
    tcols = ["theta"] if k == 1 else [f"theta{i+1}" for i in range(k)]
    xcols = [f"x{i+1}" for i in range(n)]
    header = tcols + ["rho", "status"] + xcols + ["rank", "seconds"]
    lines = [",".join(header)]
    for r in rows:
        vals = [f"{v!r}" for v in r["theta"]]
        vals.append(f"{r['rho']!r}")
        vals.append(r["status"])
        wit = r["witness_x"][0] if r.get("witness_x") else [""] * n
        vals.extend(f"{w!r}" if w != "" else "" for w in wit)
        vals.append("" if r.get("flat_rank") is None else str(r["flat_rank"]))
        vals.append(f"{r['seconds']:.3f}")
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def _theta_grid_for_csv(theta_set: ThetaSet, grid_points: int) -> np.ndarray:
    if theta_set.kind == "interval":
        return np.linspace(theta_set.lower, theta_set.upper, grid_points).reshape(-1, 1)
    per_axis = max(2, int(round(grid_points ** (1.0 / theta_set.k))))
    return theta_set.grid(per_axis)


def run_synthesis(cfg: JobConfig) -> ResultBundle:
    """Lower-bound ladder over the requested levels, optionally refined.

    With a partition, each sub-interval gets its own measure and
    certificate program; grids and records are reported per piece.
    """
    pieces: list[tuple[str, CbfCandidate]] = []
    if cfg.partition:
        for lo, hi in zip(cfg.partition[:-1], cfg.partition[1:]):
            sub = ThetaSet(kind="interval", lower=lo, upper=hi)
            pieces.append((f"piece_{lo:g}_{hi:g}", CbfCandidate(b=cfg.cbf.b, theta_set=sub)))
    else:
        pieces.append(("full", cfg.cbf))

    results = {"pieces": []}
    csvs: dict[str, str] = {}
    figures: dict[str, object] = {}
    for piece_name, cbf in pieces:
        measure = ThetaMeasure.from_theta_set(cbf.theta_set)
        bounds = variable_bounds(cfg.model, cbf)
        pop_sym = build_verification_pop(
            cfg.model, cbf, None, bounds, cfg.include_dual_bound, cfg.include_ball
        )
        joint_scales = default_scales(pop_sym, bounds.var_radius)

        def level(nu: int) -> SynthesisLevel:
            t0 = time.perf_counter()
            prob, rec = build_lower_bound_sos(pop_sym, nu, measure, joint_scales)
            rec.provenance = {"piece": piece_name, "dual_bound_row": cfg.include_dual_bound}
            from .sdpcore import solve_with_backend

            sol = solve_with_backend(prob, cfg.backend, cfg.solver_for("sos"))
            lb = recover_lower_bound(sol, rec)
            vstar, maxers, _ = maximize_lower_bound(
                lb, cbf.theta_set, kappa=nu + 2, settings=cfg.solver_for("theta"),
                rank_tol=cfg.tolerances.rank_tol, backend=cfg.backend,
            )
            return SynthesisLevel(
                nu=nu, lower_bound=lb, v_star=vstar, maximizers=maxers,
                seconds=time.perf_counter() - t0,
            )

        record = SynthesisRecord()
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                levels = list(pool.map(level, cfg.nus))
        else:
            levels = [level(nu) for nu in cfg.nus]
        for lv in levels:
            record.add(lv)
        vhat, tau = record.best_maximizer()

        grid = _theta_grid_for_csv(cbf.theta_set, cfg.grid_points)
        piece_doc = {
            "piece": piece_name,
            "theta_set": cbf.theta_set.kind,
            "bounds": list(map(list, cbf.theta_set.coordinate_bounds())),
            "levels": [],
            "best": {"v_hat": vhat, "tau_level": cfg.nus[tau], "tau_index": tau},
        }
        curve_grids = {}
        curve_max = {}
        for lv in levels:
            vals = lv.lower_bound.evaluate_many(grid)
            suffix = f"_{piece_name}" if len(pieces) > 1 else ""
            name = f"vnu_{lv.nu}{suffix}.csv"
            csvs[name] = _vnu_csv(grid, vals)
            piece_doc["levels"].append(
                {
                    "nu": lv.nu,
                    "coefficients": _poly_doc(lv.lower_bound.poly),
                    "v_star": lv.v_star,
                    "maximizers": [list(map(float, m)) for m in lv.maximizers],
                    "certificate_residual": lv.lower_bound.certificate_residual,
                    "tainted": lv.lower_bound.tainted,
                    "seconds": lv.seconds,
                }
            )
            curve_grids[lv.nu] = (grid[:, 0], vals) if cfg.cbf.k == 1 else None
            curve_max[lv.nu] = lv.maximizers
        results["pieces"].append(piece_doc)

        if cfg.plots:
            from . import report

            if cfg.cbf.k == 1:
                oracle_vals = np.array(
                    [value_grid_oracle(cfg.model, cbf, th, 2000)[0] for th in grid]
                )
                grids1 = {nu: cg for nu, cg in curve_grids.items() if cg is not None}

                def draw_curves(path, grids1=grids1, cm=dict(curve_max), og=(grid[:, 0], oracle_vals)):
                    return report.synthesis_curves_figure(grids1, cm, path, oracle=og)

                figures[f"synth_{piece_name}.png"] = draw_curves
            elif cfg.cbf.k == 3:
                for lv in levels:
                    vals = lv.lower_bound.evaluate_many(grid)

                    def draw_scatter(path, g=grid, v=vals, m=list(lv.maximizers), nu=lv.nu):
                        return report.synthesis_scatter_figure(g, v, m, nu, path)

                    figures[f"synth_scatter_nu{lv.nu}_{piece_name}.png"] = draw_scatter

    bundle = ResultBundle(
        job="synth", results=results, settings=_settings_snapshot(cfg),
        csv_payloads=csvs, figures=figures,
    )
    return bundle


def _poly_doc(p: Polynomial) -> list:
    out = []
    from .polyalg import grlex_key

    for exps in sorted((e for e, _ in p.items()), key=grlex_key):
        out.append({"exponents": list(exps), "coefficient": p.coeff(exps)})
    return out


def _vnu_csv(grid: np.ndarray, vals: np.ndarray) -> str:
    k = grid.shape[1]
    header = (["theta"] if k == 1 else [f"theta{i+1}" for i in range(k)]) + ["v"]
    lines = [",".join(header)]
    for row, v in zip(grid, vals):
        lines.append(",".join([f"{x!r}" for x in row] + [f"{v!r}"]))
    return "\n".join(lines) + "\n"


def run_select(cfg: JobConfig) -> ResultBundle:
    """Synthesize the requested level, then optimize the metric over it."""
    if not cfg.select_metric:
        raise ConfigError("select.metric: required for the select job")
    tsp = theta_space(cfg.cbf.k)
    try:
        metric = parse_polynomial(cfg.select_metric, tsp)
    except ParseError as exc:
        raise ConfigError(f"select.metric: {exc}")

    measure = ThetaMeasure.from_theta_set(cfg.cbf.theta_set)
    bounds = variable_bounds(cfg.model, cfg.cbf)
    pop_sym = build_verification_pop(
        cfg.model, cfg.cbf, None, bounds, cfg.include_dual_bound, cfg.include_ball
    )
    prob, rec = build_lower_bound_sos(
        pop_sym, cfg.select_nu, measure, default_scales(pop_sym, bounds.var_radius)
    )
    from .sdpcore import solve_with_backend

    sol = solve_with_backend(prob, cfg.backend, cfg.solver_for("sos"))
    lb = recover_lower_bound(sol, rec)
    result = select_by_metric(
        metric, lb, cfg.cbf.theta_set, sense=cfg.select_sense,
        kappa=cfg.select_kappa, settings=cfg.solver_for("theta"),
        rank_tol=cfg.tolerances.rank_tol, backend=cfg.backend,
    )
    doc = {
        "metric": cfg.select_metric,
        "sense": cfg.select_sense,
        "nu": cfg.select_nu,
        "kappa": cfg.select_kappa,
        "theta": [float(v) for v in result.theta],
        "metric_value": result.metric_value,
        "lower_bound_value": result.lower_bound_value,
        "flat_rank": result.flat_rank,
        "lower_bound": _poly_doc(lb.poly),
        "certificate_residual": lb.certificate_residual,
        "seconds": result.seconds,
    }
    return ResultBundle(job="select", results=doc, settings=_settings_snapshot(cfg))


def export_verification_sdpa(cfg: JobConfig, theta: Sequence[float], path: str) -> str:
    bounds = variable_bounds(cfg.model, cfg.cbf)
    pop_sym = build_verification_pop(
        cfg.model, cfg.cbf, None, bounds, cfg.include_dual_bound, cfg.include_ball
    )
    pop = fix_theta(pop_sym, theta)
    radii = theta_radii(cfg.model, cfg.cbf, bounds, theta)
    sdp = build_moment_sdp(pop, cfg.kappa, default_scales(pop, radii))
    write_sdpa(sdp.problem, path)
    return path


def emit_results(bundle: ResultBundle, out_dir: str | Path) -> list[Path]:
    """Write the JSON document, CSV grids and figures; returns the paths.

    Emission is deterministic: identical bundles produce byte-identical
    JSON and CSV files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    jpath = out / "result.json"
    jpath.write_text(bundle.to_json())
    paths.append(jpath)
    for name in sorted(bundle.csv_payloads):
        p = out / name
        p.write_text(bundle.csv_payloads[name])
        paths.append(p)
    for name in sorted(bundle.figures):
        draw = bundle.figures[name]
        try:
            draw(str(out / name))
            paths.append(out / name)
        except Exception as exc:  # figures never block the data products
            print(f"warning: figure {name} failed: {exc}", file=sys.stderr)
    return paths


# --------------------------------------------------------------------------
# Self test
# --------------------------------------------------------------------------

def run_selftest() -> int:
    """Quick internal checks; returns the number of failures."""
    import math

    from .model import circular_cbf, vanderpol_model
    from .sdpcore import SdpBuilder, sdp_solve

    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            failures += 1

    b = SdpBuilder([2])
    b.add_obj(0, 0, 0, 1.0)
    r = b.new_row(1.0)
    b.add_entry(r, 0, 0, 0, 1.0)
    b.add_entry(r, 0, 1, 1, 1.0)
    sol = sdp_solve(b.build(), SolverSettings(max_iters=5000))
    check("analytic SDP optimum", abs(sol.primal_obj) < 1e-6)

    meas = ThetaMeasure(kind="interval", lower=0.0, upper=2.0)
    check("interval moment", abs(meas.moment([3]) - 2.0) < 1e-12)

    m = vanderpol_model()
    cbf = circular_cbf()
    v = verify(m, cbf, [0.1], kappa=2, settings=SolverSettings.for_moment(max_iters=4000))
    check("low-order bound below oracle", v.rho <= -0.089)
    return failures


# --------------------------------------------------------------------------
# Command line
# --------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", required=True, help="config file or bundled name")
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--backend", default=None, help="embedded or cvxpy:<solver>")
    sp.add_argument("--max-iters", type=int, default=None, help="solver iteration cap")
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--no-plots", action="store_true")


def _parse_vector(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(","))


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="rcbf",
        description="Verify and synthesize robust control barrier functions "
        "via moment-SOS semidefinite relaxations.",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("verify", help="verify one parameter value")
    _add_common(sp)
    sp.add_argument("--theta", type=str, default=None, help="parameter value, comma separated")
    sp.add_argument("--kappa", type=int, default=None)

    sp = sub.add_parser("verify-sweep", help="verify a list of parameter samples")
    _add_common(sp)
    sp.add_argument("--thetas", type=str, default=None, help="start:step:stop or comma list")
    sp.add_argument("--kappa", type=int, default=None)

    sp = sub.add_parser("synth", help="synthesize lower bounds over levels")
    _add_common(sp)
    sp.add_argument("--nus", type=str, default=None, help="comma list of levels")
    sp.add_argument("--partition", type=str, default=None, help="comma list of breakpoints")

    sp = sub.add_parser("select", help="pick a parameter optimizing a metric")
    _add_common(sp)
    sp.add_argument("--metric", type=str, default=None)
    sp.add_argument("--sense", choices=("min", "max"), default=None)
    sp.add_argument("--nu", type=int, default=None)
    sp.add_argument("--kappa", type=int, default=None)

    sp = sub.add_parser("export-sdpa", help="write the verification SDP in SDPA format")
    _add_common(sp)
    sp.add_argument("--theta", type=str, default=None)
    sp.add_argument("--kappa", type=int, default=None)
    sp.add_argument("--sdpa-out", dest="sdpa_out", default="problem.dat-s")

    sub.add_parser("selftest", help="run quick internal checks")

    args = ap.parse_args(argv)

    if args.cmd == "selftest":
        failures = run_selftest()
        return 4 if failures else 0

    overrides: dict = {}
    if getattr(args, "kappa", None) is not None:
        overrides["kappa"] = args.kappa
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "backend", None) is not None:
        overrides["backend"] = args.backend
    if getattr(args, "no_plots", False):
        overrides["plots"] = False
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    if args.cmd == "verify-sweep" and args.thetas:
        overrides["thetas"] = args.thetas
    if args.cmd == "synth":
        if args.nus:
            overrides["nus"] = [int(v) for v in args.nus.split(",")]
        if args.partition:
            overrides["partition"] = [float(v) for v in args.partition.split(",")]
        overrides["job"] = "synth"
    if args.cmd == "select":
        overrides["job"] = "select"

    try:
        cfg = load_config(args.config, overrides)
        if args.max_iters is not None:
            cfg.solver_overrides["max_iters"] = args.max_iters
        if args.cmd == "select":
            if args.metric:
                cfg.select_metric = args.metric
            if args.sense:
                cfg.select_sense = args.sense
            if args.nu is not None:
                cfg.select_nu = args.nu
            if args.kappa is not None:
                cfg.select_kappa = args.kappa
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.cmd == "verify":
            theta = _parse_vector(args.theta) if args.theta else (cfg.thetas[0] if cfg.thetas else None)
            if theta is None:
                print("config error: no theta given", file=sys.stderr)
                return 2
            bundle = run_verify(cfg, thetas=[theta])
            paths = emit_results(bundle, cfg.output_dir)
            v = bundle.results["verdicts"][0]
            print(f"theta={v['theta']} rho={v['rho']:.6g} status={v['status']}")
        elif args.cmd == "verify-sweep":
            bundle = run_verify_sweep(cfg)
            paths = emit_results(bundle, cfg.output_dir)
            for v in bundle.results["verdicts"]:
                print(f"theta={v['theta']} rho={v['rho']:.6g} status={v['status']}")
        elif args.cmd == "synth":
            bundle = run_synthesis(cfg)
            paths = emit_results(bundle, cfg.output_dir)
            for piece in bundle.results["pieces"]:
                for lv in piece["levels"]:
                    print(
                        f"piece={piece['piece']} nu={lv['nu']} v*={lv['v_star']:.6g} "
                        f"maximizers={[list(np.round(m, 4)) for m in lv['maximizers']]}"
                    )
                best = piece["best"]
                print(f"piece={piece['piece']} best v_hat={best['v_hat']:.6g} at level {best['tau_level']}")
        elif args.cmd == "select":
            bundle = run_select(cfg)
            paths = emit_results(bundle, cfg.output_dir)
            r = bundle.results
            print(
                f"selected theta={np.round(r['theta'], 4).tolist()} "
                f"metric={r['metric_value']:.6g} bound={r['lower_bound_value']:.3g}"
            )
        elif args.cmd == "export-sdpa":
            theta = _parse_vector(args.theta) if args.theta else (cfg.thetas[0] if cfg.thetas else None)
            if theta is None:
                print("config error: no theta given", file=sys.stderr)
                return 2
            path = export_verification_sdpa(cfg, theta, args.sdpa_out)
            print(f"wrote {path}")
            return 0
        else:  # pragma: no cover
            return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverFailure, RcbfError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    for p in paths:
        print(f"wrote {p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
