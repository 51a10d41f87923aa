"""Moment relaxations of the verification program and minimizer extraction.

Builds the order-kappa moment SDP of a fixed-parameter program: one PSD
moment matrix over the monomial basis, one localizing block per
inequality, linear rows tying duplicated moments together, equality rows
for each constraint times every admissible monomial multiplier, and the
normalization of the constant moment. Decision variables are scaled to
unit boxes internally (an exact reformulation) to keep the moment
matrices well conditioned; all reported quantities are unscaled.

Tightness is detected through the rank-stabilization (flatness) test on
nested moment submatrices, after which global minimizers are extracted
with the multiplication-operator method. When the optimal control is a
continuum (the gradient row vanishes at the minimizer) the full moment
matrix never flattens; the driver then falls back to the state-marginal
submatrix and completes each state atom through the closed-form inner
optimum.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ExtractionFailedError, OrderTooLowError, SpaceMismatchError
from .model import (
    BoundSet,
    CbfCandidate,
    SystemModel,
    complete_point,
    variable_bounds,
)
from .polyalg import Polynomial, basis_exponents, grlex_key
from .popbuild import StandardPop, build_verification_pop
from .sdpcore import SdpBuilder, SdpProblem, SdpSolution, SolverSettings, solve_with_backend

_EXTRACT_SEED = 1234  # fixed weights for the joint-diagonalization combination


# --------------------------------------------------------------------------
# Moment SDP construction
# --------------------------------------------------------------------------

@dataclass
class MomentBasis:
    """Grlex-ordered monomial basis with an index map."""

    exps: list[tuple[int, ...]]
    index: dict[tuple[int, ...], int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {e: i for i, e in enumerate(self.exps)}

    def __len__(self):
        return len(self.exps)


@dataclass
class MomentSdp:
    """Moment relaxation with bookkeeping back to the monomials."""

    problem: SdpProblem
    pop: StandardPop
    kappa: int
    kappa0: int
    basis: MomentBasis
    loc_bases: list[MomentBasis]
    rep_cell: dict[tuple[int, ...], tuple[int, int]]
    scales: np.ndarray

    def moment(self, sol: SdpSolution, exps: tuple[int, ...], scaled: bool = True) -> float:
        """Moment of a monomial from the representative matrix cell."""
        i, j = self.rep_cell[exps]
        val = float(sol.x_blocks[0][i, j])
        if scaled:
            return val
        return val * float(np.prod(self.scales ** np.array(exps)))

    def moment_submatrix(
        self, sol: SdpSolution, degree: int, var_subset: Sequence[int] | None = None
    ) -> tuple[np.ndarray, MomentBasis]:
        n = self.pop.space.nvars
        sub = basis_exponents(n, degree, active=var_subset)
        mb = MomentBasis(sub)
        M = np.empty((len(sub), len(sub)))
        for a in range(len(sub)):
            ea = sub[a]
            for b in range(a, len(sub)):
                m = tuple(x + y for x, y in zip(ea, sub[b]))
                M[a, b] = M[b, a] = self.moment(sol, m)
        return M, mb


def _scale_poly(p: Polynomial, scales: np.ndarray) -> Polynomial:
    out = {}
    for exps, c in p.items():
        out[exps] = c * float(np.prod(scales ** np.array(exps)))
    return Polynomial(p.space, out)


def _cell_coeff(i: int, j: int) -> float:
    # entry value v at (i, j) contributes v*X_ii on the diagonal and
    # 2*v*X_ij off it; 0.5 makes <A, X> read off exactly one cell
    return 1.0 if i == j else 0.5


def default_scales(pop: StandardPop, radii: dict[str, float] | None) -> np.ndarray:
    scales = np.ones(pop.space.nvars)
    if radii:
        for i, nm in enumerate(pop.space.names):
            r = radii.get(nm, 1.0)
            scales[i] = max(float(r), 1e-3)
    return scales


def build_moment_sdp(
    pop: StandardPop, kappa: int, scales: np.ndarray | None = None
) -> MomentSdp:
    """Order-kappa moment relaxation of a fixed-parameter program."""
    if pop.mode != "fixed":
        raise SpaceMismatchError("moment relaxation needs a fixed-parameter program")
    t_max = pop.t_max
    kappa0 = max(1, math.ceil(t_max / 2))
    if kappa < kappa0:
        raise OrderTooLowError(f"kappa={kappa} below minimum {kappa0} for degree {t_max}")
    n = pop.space.nvars
    if scales is None:
        scales = np.ones(n)
    scales = np.asarray(scales, dtype=float)

    objective = _scale_poly(pop.objective, scales)
    equalities = [_scale_poly(p, scales) for p in pop.equalities]
    inequalities = [_scale_poly(p, scales) for p in pop.inequalities]

    basis = MomentBasis(basis_exponents(n, kappa))
    loc_bases = []
    for s in inequalities:
        d = kappa - math.ceil(max(s.degree(), 1) / 2)
        loc_bases.append(MomentBasis(basis_exponents(n, max(d, 0))))

    block_sizes = [len(basis)] + [len(lb) for lb in loc_bases]
    builder = SdpBuilder(block_sizes)

    # representative cell per monomial, row-major upper-triangle scan
    rep_cell: dict[tuple[int, ...], tuple[int, int]] = {}
    consistency: list[tuple[tuple[int, int], tuple[int, int]]] = []
    M = len(basis)
    for i in range(M):
        ei = basis.exps[i]
        for j in range(i, M):
            m = tuple(a + b for a, b in zip(ei, basis.exps[j]))
            if m in rep_cell:
                consistency.append(((i, j), rep_cell[m]))
            else:
                rep_cell[m] = (i, j)

    # objective on representative cells
    for exps, c in objective.items():
        i, j = rep_cell[exps]
        builder.add_obj(0, i, j, c * _cell_coeff(i, j))

    # 1) normalization of the constant moment
    r = builder.new_row(1.0)
    builder.add_entry(r, 0, 0, 0, 1.0)

    # 2) moment-consistency rows
    for (i, j), (ri, rj) in consistency:
        r = builder.new_row(0.0)
        builder.add_entry(r, 0, i, j, _cell_coeff(i, j))
        builder.add_entry(r, 0, ri, rj, -_cell_coeff(ri, rj))

    # 3) localizing links: S_l[i,j] = sum_gamma s_l[gamma] * moment
    for l, (s, lb) in enumerate(zip(inequalities, loc_bases)):
        terms = list(s.items())
        for i in range(len(lb)):
            ei = lb.exps[i]
            for j in range(i, len(lb)):
                m0 = tuple(a + b for a, b in zip(ei, lb.exps[j]))
                r = builder.new_row(0.0)
                builder.add_entry(r, 1 + l, i, j, _cell_coeff(i, j))
                for gexps, c in terms:
                    m = tuple(a + b for a, b in zip(m0, gexps))
                    ri, rj = rep_cell[m]
                    builder.add_entry(r, 0, ri, rj, -c * _cell_coeff(ri, rj))

    # 4) equality rows: h_l times every admissible monomial multiplier
    for h in equalities:
        dh = h.degree()
        mults = basis_exponents(n, 2 * kappa - dh)
        terms = list(h.items())
        for mult in mults:
            r = builder.new_row(0.0)
            for gexps, c in terms:
                m = tuple(a + b for a, b in zip(mult, gexps))
                ri, rj = rep_cell[m]
                builder.add_entry(r, 0, ri, rj, c * _cell_coeff(ri, rj))

    problem = builder.build()
    return MomentSdp(
        problem=problem,
        pop=pop,
        kappa=kappa,
        kappa0=kappa0,
        basis=basis,
        loc_bases=loc_bases,
        rep_cell=rep_cell,
        scales=scales,
    )


# --------------------------------------------------------------------------
# Flatness and extraction
# --------------------------------------------------------------------------

def numeric_rank(M: np.ndarray, rank_tol) -> int:
    """Rank by singular values.

    A float threshold counts sigma_j > tol * sigma_1. The string ``auto``
    places the cut at the largest relative gap in the spectrum (requiring
    a factor of at least 100), which is robust to first-order solver
    noise floors that vary across problems.
    """
    sv = np.linalg.svd(M, compute_uv=False)
    if len(sv) == 0 or sv[0] <= 0:
        return 0
    if rank_tol == "auto":
        floor = sv[0] * 1e-12
        sv = np.maximum(sv, floor)
        ratios = sv[:-1] / sv[1:]
        if len(ratios) == 0:
            return 1
        split = int(np.argmax(ratios))
        if ratios[split] < 100.0:
            return len(sv)
        return split + 1
    return int(np.sum(sv > float(rank_tol) * sv[0]))


@dataclass
class FlatnessResult:
    rank: int | None
    kappa_prime: int | None
    ranks_by_degree: dict[int, int]
    minimizers: list[np.ndarray]  # unscaled coordinates over the chosen subset
    subset: list[int]


def _atoms_from_flat_matrix(
    M: np.ndarray, mb: MomentBasis, rank: int, subset: list[int], nvars: int
) -> list[np.ndarray]:
    """Multiplication-operator extraction of ``rank`` atoms."""
    if rank == 0:
        raise ExtractionFailedError("zero-rank moment matrix")
    if rank == 1:
        # first-order moments of a Dirac measure
        m0 = M[0, 0]
        if m0 <= 0:
            raise ExtractionFailedError("nonpositive mass")
        atom = np.zeros(len(subset))
        for t, v in enumerate(subset):
            e = [0] * nvars
            e[v] = 1
            atom[t] = M[0, mb.index[tuple(e)]] / m0
        return [atom]

    w, Q = np.linalg.eigh(M)
    order = np.argsort(w)[::-1]
    w, Q = w[order], Q[:, order]
    if w[rank - 1] <= 0:
        raise ExtractionFailedError("flat rank exceeds the positive spectrum")
    V = Q[:, :rank] * np.sqrt(w[:rank])

    # column echelon: row-reduce V^T, pivot columns are the atom basis
    U = V.T.copy()
    s = U.shape[1]
    pivots: list[int] = []
    row = 0
    scale = np.abs(V).max()
    for col in range(s):
        if row >= rank:
            break
        p = row + int(np.argmax(np.abs(U[row:, col])))
        if abs(U[p, col]) < 1e-7 * scale:
            continue
        U[[row, p]] = U[[p, row]]
        U[row] /= U[row, col]
        for rr in range(rank):
            if rr != row:
                U[rr] -= U[rr, col] * U[row]
        pivots.append(col)
        row += 1
    if len(pivots) < rank:
        raise ExtractionFailedError("could not find a full pivot set")
    E = U.T  # s x rank with E[pivots] = I

    Ns = []
    for v in subset:
        rows = []
        for pcol in pivots:
            e = list(mb.exps[pcol])
            e[v] += 1
            te = tuple(e)
            if te not in mb.index:
                raise ExtractionFailedError("variable shift leaves the basis")
            rows.append(E[mb.index[te]])
        Ns.append(np.array(rows))

    rng = np.random.default_rng(_EXTRACT_SEED)
    weights = rng.uniform(0.1, 1.0, size=len(Ns))
    weights /= weights.sum()
    N = sum(wgt * Nv for wgt, Nv in zip(weights, Ns))
    T, Z = scipy.linalg.schur(N, output="real")
    atoms = []
    for jcol in range(rank):
        q = Z[:, jcol]
        atoms.append(np.array([q @ Nv @ q for Nv in Ns]))
    return atoms


def check_flatness_extract(
    sol: SdpSolution,
    sdp: MomentSdp,
    rank_tol="auto",
    var_subset: Sequence[int] | None = None,
    gap: int | None = None,
) -> FlatnessResult:
    """Rank-stabilization test on nested moment submatrices plus extraction.

    Returns the flat rank and the extracted atoms (unscaled, over the
    chosen variable subset; default all variables). Without a flat level
    the minimizer list is empty and ``rank`` is None.
    """
    n = sdp.pop.space.nvars
    subset = list(range(n)) if var_subset is None else list(var_subset)
    gap = sdp.kappa0 if gap is None else max(1, gap)

    mats: dict[int, tuple[np.ndarray, MomentBasis]] = {}
    ranks: dict[int, int] = {}
    for d in range(0, sdp.kappa + 1):
        M, mb = sdp.moment_submatrix(sol, d, subset)
        mats[d] = (M, mb)
        ranks[d] = numeric_rank(M, rank_tol)

    for kp in range(gap, sdp.kappa + 1):
        r_low, r_high = ranks[kp - gap], ranks[kp]
        if r_low == r_high and r_high > 0:
            M, mb = mats[kp]
            try:
                atoms_scaled = _atoms_from_flat_matrix(M, mb, r_high, subset, n)
            except ExtractionFailedError:
                continue
            sc = sdp.scales[subset]
            atoms = [a * sc for a in atoms_scaled]
            return FlatnessResult(
                rank=r_high,
                kappa_prime=kp,
                ranks_by_degree=ranks,
                minimizers=atoms,
                subset=subset,
            )
    return FlatnessResult(
        rank=None, kappa_prime=None, ranks_by_degree=ranks, minimizers=[], subset=subset
    )


# --------------------------------------------------------------------------
# Verification driver
# --------------------------------------------------------------------------

@dataclass
class VerifyTols:
    tol_verify: float = 1e-6
    feas_tol: float = 1e-6
    rank_tol: object = "auto"


@dataclass
class VerificationVerdict:
    theta: tuple[float, ...]
    kappa: int
    rho: float
    dual_obj: float
    status: str  # verified | refuted | inconclusive | error
    flat_rank: int | None
    kappa_prime: int | None
    minimizers: list[dict]
    witness_x: list[list[float]]
    witness_value: float | None
    residuals: dict
    iterations: int
    seconds: float
    message: str = ""


def _assignment_from_vector(pop: StandardPop, vec: np.ndarray) -> dict:
    out: dict[str, float] = {}
    for nm, v in zip(pop.space.names, vec):
        out[nm] = float(v)
    return out


def _x_part(pop: StandardPop, assignment: dict) -> list[float]:
    xsl = pop.space.block_slice("x")
    return [assignment[pop.space.names[i]] for i in range(xsl.start, xsl.stop)]


def verify(
    model: SystemModel,
    cbf: CbfCandidate,
    theta: Sequence[float],
    kappa: int,
    tols: VerifyTols | None = None,
    settings: SolverSettings | None = None,
    bounds: BoundSet | None = None,
    pop_symbolic: StandardPop | None = None,
    include_dual_bound: bool = True,
    include_ball: bool = False,
    backend: str = "embedded",
) -> VerificationVerdict:
    """Certify or refute a fixed-parameter barrier candidate at order kappa.

    ``rho >= -tol_verify`` yields ``verified``; a strictly negative bound
    together with a feasible extracted minimizer of matching value yields
    ``refuted`` with witness states; anything else is ``inconclusive``
    (a higher order may settle it). Non-existence is never claimed.
    """
    t0 = time.perf_counter()
    tols = tols or VerifyTols()
    settings = settings or SolverSettings.for_moment()
    theta = tuple(float(v) for v in np.atleast_1d(theta))
    if bounds is None:
        bounds = variable_bounds(model, cbf)
    if pop_symbolic is None:
        pop_symbolic = build_verification_pop(
            model, cbf, None, bounds, include_dual_bound, include_ball
        )
    from .popbuild import fix_theta

    pop = fix_theta(pop_symbolic, theta)

    radii = theta_radii(model, cbf, bounds, theta)
    scales = default_scales(pop, radii)
    sdp = build_moment_sdp(pop, kappa, scales)
    sol = solve_with_backend(sdp.problem, backend, settings)

    if sol.status in ("infeasible", "unbounded"):
        return VerificationVerdict(
            theta=theta,
            kappa=kappa,
            rho=float("nan"),
            dual_obj=float("nan"),
            status="error",
            flat_rank=None,
            kappa_prime=None,
            minimizers=[],
            witness_x=[],
            witness_value=None,
            residuals=sol.residuals,
            iterations=sol.iterations,
            seconds=time.perf_counter() - t0,
            message=(
                "relaxation infeasible: the boundary set {b(x, theta) = 0} is likely empty"
                if sol.status == "infeasible"
                else "relaxation unbounded: variable bounds are missing or invalid"
            ),
        )

    rho = sol.primal_obj
    minimizers: list[dict] = []
    flat_rank = None
    kappa_prime = None

    # full-space flatness first; state-marginal with closed-form completion
    # as the fallback (the optimal control can be a continuum)
    full = check_flatness_extract(sol, sdp, tols.rank_tol)
    candidates: list[dict] = []
    if full.rank is not None:
        flat_rank, kappa_prime = full.rank, full.kappa_prime
        for atom in full.minimizers:
            candidates.append(_assignment_from_vector(pop, atom))
    if not candidates:
        xsl = pop.space.block_slice("x")
        marg = check_flatness_extract(
            sol, sdp, tols.rank_tol, var_subset=range(xsl.start, xsl.stop), gap=1
        )
        if marg.rank is not None:
            flat_rank, kappa_prime = marg.rank, marg.kappa_prime
            for atom in marg.minimizers:
                x_pol = polish_boundary(cbf, atom, theta)
                comp = complete_point(model, cbf, x_pol, theta)
                flat = {}
                for key, vals in comp.items():
                    sl = pop.space.block_slice(key)
                    for off, v in enumerate(vals):
                        flat[pop.space.names[sl.start + off]] = float(v)
                candidates.append(flat)

    feas_band = max(tols.feas_tol, 10.0 * max(sol.residuals.get("primal", 0.0), 1e-9))
    witness_value = None
    for cand in candidates:
        viol = pop.feasibility_violation(cand)
        if viol <= feas_band:
            minimizers.append(cand)
    if minimizers:
        vals = [pop.objective.evaluate(mz) for mz in minimizers]
        order = np.argsort(vals)
        minimizers = [minimizers[i] for i in order]
        witness_value = float(min(vals))

    if rho >= -tols.tol_verify:
        status = "verified"
        msg = "lower bound certifies nonnegativity at this order"
    elif witness_value is not None and witness_value < -tols.tol_verify:
        status = "refuted"
        msg = "feasible witness with negative inner value"
    else:
        status = "inconclusive"
        msg = "negative bound without certified witness; consider kappa + 1"

    return VerificationVerdict(
        theta=theta,
        kappa=kappa,
        rho=rho,
        dual_obj=sol.dual_obj,
        status=status,
        flat_rank=flat_rank,
        kappa_prime=kappa_prime,
        minimizers=minimizers,
        witness_x=[_x_part(pop, mz) for mz in minimizers],
        witness_value=witness_value,
        residuals=sol.residuals,
        iterations=sol.iterations,
        seconds=time.perf_counter() - t0,
        message=msg,
    )


def polish_boundary(cbf: CbfCandidate, x: np.ndarray, theta: Sequence[float]) -> np.ndarray:
    """Snap an approximate state atom back onto the zero level set."""
    x = np.asarray(x, dtype=float)
    th = list(theta)
    if cbf.family == "circular":
        r2 = float(np.dot(x, x))
        if r2 <= 1e-14:
            return np.zeros_like(x) if th[0] <= 1e-14 else x
        return x * math.sqrt(max(th[0], 0.0) / r2)
    if cbf.family == "elliptical":
        A = np.array([[th[0], th[2]], [th[2], th[1]]])
        q = float(x @ A @ x)
        if q <= 1e-14:
            return x
        return x / math.sqrt(q)
    # general family: a few Newton steps along the gradient
    b = cbf.b
    point = x.copy()
    for _ in range(10):
        asg = {"x": list(point), "t": th}
        val = b.evaluate(asg)
        grad = np.array(
            [b.differentiate(b.space.names[i]).evaluate(asg) for i in range(len(point))]
        )
        g2 = float(grad @ grad)
        if g2 < 1e-14 or abs(val) < 1e-12:
            break
        point = point - grad * (val / g2)
    return point


def theta_radii(
    model: SystemModel, cbf: CbfCandidate, bounds: BoundSet, theta: Sequence[float]
) -> dict[str, float]:
    """Per-variable magnitude bounds sharpened at a fixed parameter value."""
    th = list(theta)
    radii = dict(bounds.var_radius)
    if cbf.family == "circular":
        t = max(float(th[0]), 0.0)
        xr = math.sqrt(t)
        for nm in list(radii):
            if nm.startswith("x"):
                radii[nm] = xr
            elif nm == "z" and radii.get("z", 0) > 0 and bounds.var_radius.get("z"):
                full_t = cbf.theta_set.coordinate_bounds()[0][1]
                if full_t > 0:
                    radii[nm] = bounds.var_radius["z"] * math.sqrt(t / full_t)
            elif nm.startswith("zeta"):
                full_t = cbf.theta_set.coordinate_bounds()[0][1]
                if full_t > 0:
                    radii[nm] = bounds.var_radius[nm] * (t / full_t)
    elif cbf.family == "elliptical":
        det = th[0] * th[1] - th[2] ** 2
        tr = th[0] + th[1]
        if det > 1e-12:
            xr = math.sqrt(tr / det)
            for nm in list(radii):
                if nm.startswith("x"):
                    radii[nm] = xr
            if "z" in radii:
                radii["z"] = 2.0 * math.sqrt(tr)
            w = model.control.halfwidths[0] if model.control.kind == "box" else 1.0
            if "zeta" in radii:
                radii["zeta"] = math.sqrt(tr**2 / (w * w * det))
    return radii
