"""Synthesis of valid parameters through polynomial lower bounds.

Stage one fits a polynomial of the parameter below the unknown value
function of the verification program: a sum-of-squares certificate over
the joint decision-parameter variables, with the candidate polynomial's
moment-weighted integral as the objective. Stage two maximizes the
recovered polynomial over the parameter set with the moment hierarchy
(a low-dimensional problem), yielding candidate parameters and a running
best value across levels. A metric-constrained variant picks the
parameter optimizing a user polynomial inside the certified region.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import OrderTooLowError, SolverFailure, SpaceMismatchError, UnsupportedKindError
from .model import ThetaSet, theta_space
from .polyalg import Polynomial, VariableSpace, basis_exponents, grlex_key
from .popbuild import StandardPop
from .momentrelax import (
    FlatnessResult,
    build_moment_sdp,
    check_flatness_extract,
    default_scales,
)
from .sdpcore import (
    SdpBuilder,
    SdpProblem,
    SdpSolution,
    SolverSettings,
    solve_with_backend,
    _assemble,
    _BlockLayout,
)


# --------------------------------------------------------------------------
# Moments of the parameter measure
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaMeasure:
    """Uniform distribution on the parameter set, normalized to mass one.

    ``table`` supplies user moments directly; the closed-form kinds are
    ``interval``, ``box`` and ``ellipse-coupled`` (normalization resolved
    by the zero-order instance of the same closed form, so the set volume
    is never computed on its own).
    """

    kind: str
    lower: float | None = None
    upper: float | None = None
    xi: float | None = None
    box: tuple[tuple[float, float], ...] | None = None
    table: dict | None = None

    @staticmethod
    def from_theta_set(ts: ThetaSet) -> "ThetaMeasure":
        if ts.kind == "interval":
            return ThetaMeasure(kind="interval", lower=ts.lower, upper=ts.upper)
        if ts.kind == "box":
            return ThetaMeasure(kind="box", box=ts.box)
        if ts.kind == "ellipse-coupled":
            return ThetaMeasure(kind="ellipse-coupled", lower=ts.lower, upper=ts.upper, xi=ts.xi)
        raise UnsupportedKindError(
            "no closed-form moments for this parameter set; provide a table"
        )

    @property
    def k(self) -> int:
        if self.kind == "interval":
            return 1
        if self.kind == "ellipse-coupled":
            return 3
        if self.kind == "box":
            return len(self.box)
        return len(next(iter(self.table)))

    def moment(self, beta: Sequence[int]) -> float:
        beta = tuple(int(b) for b in beta)
        if self.kind == "table":
            if beta not in self.table:
                raise KeyError(f"moment table lacks multi-index {beta}")
            return float(self.table[beta])
        if self.kind == "interval":
            (b,) = beta
            lo, hi = self.lower, self.upper
            return (hi ** (b + 1) - lo ** (b + 1)) / ((b + 1) * (hi - lo))
        if self.kind == "box":
            val = 1.0
            for b, (lo, hi) in zip(beta, self.box):
                val *= (hi ** (b + 1) - lo ** (b + 1)) / ((b + 1) * (hi - lo))
            return val
        if self.kind == "ellipse-coupled":
            return self._ellipse_moment(beta) / self._ellipse_moment((0, 0, 0))
        raise UnsupportedKindError(self.kind)

    def _ellipse_moment(self, beta: tuple[int, int, int]) -> float:
        """Unnormalized closed form; odd third-coordinate powers vanish."""
        b1, b2, b3 = beta
        lo, hi, xi = self.lower, self.upper, self.xi
        parity = 1.0 - (-1.0) ** (b3 + 1)
        if parity == 0.0:
            return 0.0
        half = (b3 + 1) / 2.0
        bt1 = b1 + 1 + half
        bt2 = b2 + 1 + half
        q1 = (hi**bt1 - lo**bt1) / bt1
        q2 = (hi**bt2 - lo**bt2) / bt2
        return (xi ** (b3 + 1)) * parity / (b3 + 1) * q1 * q2


def theta_moments(measure: ThetaMeasure, beta: Sequence[int]) -> float:
    """Normalized moment of theta^beta under the uniform parameter measure."""
    return measure.moment(beta)


# --------------------------------------------------------------------------
# SOS lower-bound program
# --------------------------------------------------------------------------

@dataclass
class SosRecovery:
    """Bookkeeping from SDP blocks back to lower-bound coefficients."""

    nu: int
    k: int
    beta_list: list[tuple[int, ...]]
    lam_plus_block: int
    lam_minus_block: int
    theta_scales: np.ndarray
    theta_names: tuple[str, ...]
    problem: SdpProblem
    gram_blocks: list[int]
    measure: ThetaMeasure
    provenance: dict = field(default_factory=dict)


@dataclass
class LowerBoundPoly:
    """Polynomial in theta bounding the value function from below."""

    nu: int
    poly: Polynomial
    certificate_residual: float
    tainted: bool
    provenance: dict = field(default_factory=dict)

    def __call__(self, theta: Sequence[float]) -> float:
        names = self.poly.space.names
        return self.poly.evaluate({nm: float(v) for nm, v in zip(names, np.atleast_1d(theta))})

    def evaluate_many(self, thetas: np.ndarray) -> np.ndarray:
        return self.poly.evaluate_many({"t": np.atleast_2d(thetas)})


def build_lower_bound_sos(
    pop: StandardPop,
    nu: int,
    measure: ThetaMeasure,
    scales: np.ndarray | None = None,
) -> tuple[SdpProblem, SosRecovery]:
    """Certificate program for a degree-2nu lower bound of the value function.

    Decision variables: free coefficients of the candidate polynomial in
    the parameter, one Gram matrix per inequality (the parameter-set rows
    ride along in symbolic mode), and free multiplier coefficients per
    equality. Linear rows equate coefficients of the certificate identity
    monomial by monomial up to degree 2nu; the objective maximizes the
    moment-weighted integral of the candidate.
    """
    if pop.mode != "symbolic":
        raise SpaceMismatchError("lower-bound synthesis needs the symbolic-parameter program")
    space = pop.space
    n = space.nvars
    nu0 = max(1, math.ceil(pop.t_max / 2))
    if nu < nu0:
        raise OrderTooLowError(f"nu={nu} below minimum {nu0} for joint degree {pop.t_max}")

    if scales is None:
        scales = np.ones(n)
    scales = np.asarray(scales, dtype=float)

    from .momentrelax import _scale_poly

    objective = _scale_poly(pop.objective, scales)
    equalities = [_scale_poly(p, scales) for p in pop.equalities]
    inequalities = [_scale_poly(p, scales) for p in pop.inequalities]

    tsl = space.block_slice("t")
    t_idx = list(range(tsl.start, tsl.stop))
    k = len(t_idx)
    theta_scales = scales[t_idx]
    theta_names = tuple(space.names[i] for i in t_idx)

    # monomial rows
    rows = basis_exponents(n, 2 * nu)
    row_of = {e: i for i, e in enumerate(rows)}

    # Gram bases: sigma_0 over everything, one per inequality
    gram_bases = [basis_exponents(n, nu)]
    for s in inequalities:
        d = nu - math.ceil(max(s.degree(), 1) / 2)
        gram_bases.append(basis_exponents(n, max(d, 0)))

    # lambda multi-indices over the parameter block only
    beta_full = basis_exponents(n, 2 * nu, active=t_idx)
    beta_list = [tuple(e[i] for i in t_idx) for e in beta_full]

    # mu coefficients: (equality, multiplier monomial) pairs
    mu_index: list[tuple[int, tuple[int, ...]]] = []
    for ei, h in enumerate(equalities):
        for mono in basis_exponents(n, 2 * nu - h.degree()):
            mu_index.append((ei, mono))

    n_lam = len(beta_list)
    n_mu = len(mu_index)
    blocks = [len(gb) for gb in gram_bases] + [-n_lam, -n_lam]
    if n_mu:
        blocks += [-n_mu, -n_mu]
    lam_plus_block = len(gram_bases)
    lam_minus_block = lam_plus_block + 1
    mu_plus_block = lam_minus_block + 1
    mu_minus_block = mu_plus_block + 1

    builder = SdpBuilder(blocks)
    for r, e in enumerate(rows):
        builder.new_row(objective.coeff(e))

    # sigma_0 cells; the SDPA symmetric-entry convention already doubles
    # off-diagonal cells, matching the X_ab + X_ba coefficient contribution
    g0 = gram_bases[0]
    for a in range(len(g0)):
        ea = g0[a]
        for b in range(a, len(g0)):
            m = tuple(x + y for x, y in zip(ea, g0[b]))
            builder.add_entry(row_of[m], 0, a, b, 1.0)

    # localizing Gram cells: sigma_l * s_l
    for l, (s, gb) in enumerate(zip(inequalities, gram_bases[1:]), start=1):
        terms = list(s.items())
        for a in range(len(gb)):
            ea = gb[a]
            for b in range(a, len(gb)):
                base = tuple(x + y for x, y in zip(ea, gb[b]))
                for gexps, c in terms:
                    m = tuple(x + y for x, y in zip(base, gexps))
                    builder.add_entry(row_of[m], l, a, b, c)

    # mu terms
    for idx, (ei, mono) in enumerate(mu_index):
        for gexps, c in equalities[ei].items():
            m = tuple(x + y for x, y in zip(mono, gexps))
            r = row_of[m]
            builder.add_entry(r, mu_plus_block, idx, idx, c)
            builder.add_entry(r, mu_minus_block, idx, idx, -c)

    # lambda terms and objective (maximize moment-weighted integral)
    for idx, (e_full, beta) in enumerate(zip(beta_full, beta_list)):
        r = row_of[e_full]
        builder.add_entry(r, lam_plus_block, idx, idx, 1.0)
        builder.add_entry(r, lam_minus_block, idx, idx, -1.0)
        gamma_scaled = measure.moment(beta) / float(np.prod(theta_scales ** np.array(beta)))
        if gamma_scaled != 0.0:
            builder.add_obj(lam_plus_block, idx, idx, -gamma_scaled)
            builder.add_obj(lam_minus_block, idx, idx, gamma_scaled)

    problem = builder.build()
    recovery = SosRecovery(
        nu=nu,
        k=k,
        beta_list=beta_list,
        lam_plus_block=lam_plus_block,
        lam_minus_block=lam_minus_block,
        theta_scales=theta_scales,
        theta_names=theta_names,
        problem=problem,
        gram_blocks=list(range(len(gram_bases))),
        measure=measure,
    )
    return problem, recovery


def certificate_violation(problem: SdpProblem, sol: SdpSolution) -> float:
    """Max absolute mismatch of the linear rows at the solution blocks."""
    layout = _BlockLayout(problem.blocks)
    _, A = _assemble(problem, layout)
    x = layout.from_matrices(sol.x_blocks)
    return float(np.max(np.abs(A @ x - problem.b)))


def recover_lower_bound(
    sol: SdpSolution,
    recovery: SosRecovery,
    residual_threshold: float = 1e-5,
) -> LowerBoundPoly:
    """Extract the candidate polynomial's coefficients from the solution."""
    if sol.status in ("infeasible", "unbounded"):
        raise SolverFailure(f"certificate program ended {sol.status}")
    lam_scaled = np.asarray(sol.x_blocks[recovery.lam_plus_block]) - np.asarray(
        sol.x_blocks[recovery.lam_minus_block]
    )
    sp = theta_space(recovery.k)
    coeffs: dict[tuple[int, ...], float] = {}
    for idx, beta in enumerate(recovery.beta_list):
        unscale = float(np.prod(recovery.theta_scales ** np.array(beta)))
        val = lam_scaled[idx] / unscale
        if val != 0.0:
            coeffs[beta] = coeffs.get(beta, 0.0) + val
    poly = Polynomial(sp, coeffs)
    resid = certificate_violation(recovery.problem, sol)
    return LowerBoundPoly(
        nu=recovery.nu,
        poly=poly,
        certificate_residual=resid,
        tainted=resid > residual_threshold or sol.status != "optimal",
        provenance=dict(recovery.provenance),
    )


# --------------------------------------------------------------------------
# Maximization over the parameter set
# --------------------------------------------------------------------------

def theta_pop(objective: Polynomial, theta_set: ThetaSet, sense: str = "max",
              extra_inequalities: Sequence[Polynomial] = ()) -> StandardPop:
    """Low-dimensional program over the parameter block alone."""
    sp = objective.space
    rows = list(theta_set.constraint_polys(sp)) + [p.embed(sp) for p in extra_inequalities]
    obj = -objective if sense == "max" else objective
    return StandardPop(
        objective=obj,
        equalities=(),
        eq_labels=(),
        inequalities=tuple(rows),
        ineq_labels=tuple("theta" for _ in rows),
        space=sp,
        mode="fixed",
        theta=None,
    )


def maximize_lower_bound(
    v: LowerBoundPoly,
    theta_set: ThetaSet,
    kappa: int | None = None,
    settings: SolverSettings | None = None,
    rank_tol="auto",
    backend: str = "embedded",
) -> tuple[float, list[np.ndarray], FlatnessResult]:
    """Global maximum of the lower bound over the parameter set.

    Runs the moment hierarchy on the parameter-only program (default
    order nu + 2) and extracts every flat maximizer; extraction failure
    returns the value with an empty list.
    """
    kappa = kappa if kappa is not None else v.nu + 2
    kappa_min = max(1, math.ceil(v.poly.degree() / 2))
    if kappa < kappa_min:
        raise OrderTooLowError(f"kappa={kappa} below minimum {kappa_min}")
    pop = theta_pop(v.poly, theta_set, sense="max")
    radii = {nm: max(abs(lo), abs(hi)) for nm, (lo, hi) in
             zip(pop.space.names, theta_set.coordinate_bounds())}
    sdp = build_moment_sdp(pop, kappa, default_scales(pop, radii))
    sol = solve_with_backend(sdp.problem, backend, settings or SolverSettings.for_theta())
    vstar = -sol.primal_obj
    flat = check_flatness_extract(sol, sdp, rank_tol)
    maximizers = [np.asarray(a) for a in flat.minimizers]
    # keep only atoms inside the set whose value is near the optimum
    kept = []
    for th in maximizers:
        if theta_set.contains(th, tol=1e-6) and abs(v(th) - vstar) <= 1e-4 * (1 + abs(vstar)) + 1e-5:
            kept.append(th)
    return float(vstar), kept, flat


# --------------------------------------------------------------------------
# Level records
# --------------------------------------------------------------------------

@dataclass
class SynthesisLevel:
    nu: int
    lower_bound: LowerBoundPoly
    v_star: float
    maximizers: list[np.ndarray]
    seconds: float = 0.0


@dataclass
class SynthesisRecord:
    """Per-level results plus the running best across levels."""

    levels: list[SynthesisLevel] = field(default_factory=list)

    def add(self, level: SynthesisLevel):
        self.levels.append(level)

    def best_maximizer(self) -> tuple[float, int]:
        """Running max of level values and the attaining level index."""
        if not self.levels:
            raise ValueError("no synthesis levels recorded")
        vals = [lv.v_star for lv in self.levels]
        tau = int(np.argmax(vals))
        return float(vals[tau]), tau

    def pointwise_max(self, theta: Sequence[float]) -> float:
        """Tightest lower bound at a parameter: max over recorded levels."""
        if not self.levels:
            raise ValueError("no synthesis levels recorded")
        return max(lv.lower_bound(theta) for lv in self.levels)


def best_maximizer(record: SynthesisRecord) -> tuple[float, int]:
    return record.best_maximizer()


# --------------------------------------------------------------------------
# Metric-constrained selection
# --------------------------------------------------------------------------

@dataclass
class SelectionResult:
    theta: np.ndarray
    metric_value: float
    lower_bound_value: float
    flat_rank: int | None
    residuals: dict
    seconds: float


def select_by_metric(
    metric: Polynomial,
    v: LowerBoundPoly,
    theta_set: ThetaSet,
    sense: str = "max",
    kappa: int = 4,
    settings: SolverSettings | None = None,
    rank_tol="auto",
    backend: str = "embedded",
) -> SelectionResult:
    """Optimize a parameter metric over the certified region {v >= 0}.

    Post-validates set membership and nonnegativity of the lower bound at
    the selected parameter. An infeasible relaxation means no parameter
    has a certified nonnegative bound at this order.
    """
    t0 = time.perf_counter()
    sp = v.poly.space
    metric = metric.embed(sp) if metric.space != sp else metric
    pop = theta_pop(metric, theta_set, sense=sense, extra_inequalities=[v.poly])
    kappa_min = max(1, math.ceil(pop.t_max / 2))
    kappa = max(kappa, kappa_min)
    radii = {nm: max(abs(lo), abs(hi)) for nm, (lo, hi) in
             zip(sp.names, theta_set.coordinate_bounds())}
    sdp = build_moment_sdp(pop, kappa, default_scales(pop, radii))
    sol = solve_with_backend(sdp.problem, backend, settings or SolverSettings.for_theta())
    if sol.status == "infeasible":
        raise SolverFailure(
            "selection relaxation infeasible: no parameter with a certified "
            "nonnegative lower bound at this order"
        )
    flat = check_flatness_extract(sol, sdp, rank_tol)
    candidates = [np.asarray(a) for a in flat.minimizers]
    best = None
    for th in candidates:
        if theta_set.contains(th, tol=1e-8) and v(th) >= -1e-6:
            val = metric.evaluate({nm: float(x) for nm, x in zip(sp.names, th)})
            if best is None or (sense == "max" and val > best[1]) or (
                sense == "min" and val < best[1]
            ):
                best = (th, val)
    if best is None:
        raise SolverFailure(
            "selection produced no atom satisfying the certified region; "
            "increase the order or loosen tolerances"
        )
    th, val = best
    return SelectionResult(
        theta=th,
        metric_value=float(val),
        lower_bound_value=float(v(th)),
        flat_rank=flat.rank,
        residuals=sol.residuals,
        seconds=time.perf_counter() - t0,
    )
