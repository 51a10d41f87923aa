"""System dynamics, control sets, CBF candidates and their derived data.

Holds the control-affine model (drift f, input matrix g, disturbance
matrix J with a norm bound on the disturbance), the admissible control
set, and the parametric barrier candidate with its parameter set. From
these it computes Lie derivatives, bounds on the decision variables of
the downstream polynomial program (state, lift, control, dual), and the
closed-form inner value used as a brute-force oracle by the tests.

All types are immutable after construction; operations are pure.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import SpaceMismatchError, UnsupportedKindError
from .polyalg import Polynomial, VariableSpace


# --------------------------------------------------------------------------
# Spaces
# --------------------------------------------------------------------------

def state_space(n: int) -> VariableSpace:
    return VariableSpace((("x", n),))

def control_space(m: int) -> VariableSpace:
    return VariableSpace((("u", m),))

def cbf_space(n: int, k: int) -> VariableSpace:
    return VariableSpace((("x", n), ("t", k)))

def theta_space(k: int) -> VariableSpace:
    return VariableSpace((("t", k),))

def decision_space(n: int, include_z: bool, m: int, l_u: int, k: int = 0) -> VariableSpace:
    """Block order of the verification program: x, z, u, zeta[, t]."""
    blocks: list[tuple[str, int]] = [("x", n)]
    if include_z:
        blocks.append(("z", 1))
    blocks.append(("u", m))
    blocks.append(("zeta", l_u))
    if k > 0:
        blocks.append(("t", k))
    return VariableSpace(tuple(blocks))


# --------------------------------------------------------------------------
# Control sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlSet:
    """Compact convex control set given by polynomial inequalities c_i(u) <= 0.

    Kinds: ``box`` (|u_i| <= w_i), ``polytope`` (W u + d <= 0 rowwise),
    ``ellipsoid`` (u' W u <= 1, W SPD), ``general`` (explicit polynomials;
    closed-form dual bounds and support values are then unavailable).
    """

    kind: str
    m: int
    halfwidths: tuple[float, ...] | None = None          # box
    W: tuple[tuple[float, ...], ...] | None = None        # polytope rows / ellipsoid matrix
    d: tuple[float, ...] | None = None                    # polytope offsets
    vertices: tuple[tuple[float, ...], ...] | None = None # polytope support data
    general_polys: tuple[str, ...] | None = None          # general kind, text in u vars

    def __post_init__(self):
        if self.kind == "box":
            if self.halfwidths is None or len(self.halfwidths) != self.m:
                raise ValueError("box control set needs one halfwidth per input")
            if any(w <= 0 for w in self.halfwidths):
                raise ValueError("box halfwidths must be positive")
        elif self.kind == "ellipsoid":
            Wm = np.asarray(self.W, dtype=float)
            if Wm.shape != (self.m, self.m):
                raise ValueError("ellipsoid matrix has wrong shape")
            if np.linalg.eigvalsh(0.5 * (Wm + Wm.T))[0] <= 0:
                raise ValueError("ellipsoid matrix must be positive definite")
        elif self.kind == "polytope":
            Wm = np.asarray(self.W, dtype=float)
            if Wm.ndim != 2 or Wm.shape[1] != self.m:
                raise ValueError("polytope rows have wrong shape")
            if self.d is None or len(self.d) != Wm.shape[0]:
                raise ValueError("polytope needs one offset per row")
        elif self.kind != "general":
            raise UnsupportedKindError(f"unknown control-set kind {self.kind!r}")

    @property
    def l_u(self) -> int:
        if self.kind == "box":
            return self.m
        if self.kind == "ellipsoid":
            return 1
        if self.kind == "polytope":
            return len(self.d)
        return len(self.general_polys or ())

    def constraint_polys(self, space: VariableSpace) -> list[Polynomial]:
        """The c_i(u) polynomials (<= 0 convention) in the given space."""
        u_names = [space.names[i] for i in range(*space.block_slice("u").indices(space.nvars))]
        uvars = [Polynomial.variable(space, nm) for nm in u_names]
        if self.kind == "box":
            return [uvars[i] * uvars[i] - self.halfwidths[i] ** 2 for i in range(self.m)]
        if self.kind == "ellipsoid":
            Wm = np.asarray(self.W, dtype=float)
            q = Polynomial.constant(space, -1.0)
            for i in range(self.m):
                for j in range(self.m):
                    if Wm[i, j]:
                        q = q + uvars[i] * uvars[j] * Wm[i, j]
            return [q]
        if self.kind == "polytope":
            Wm = np.asarray(self.W, dtype=float)
            rows = []
            for r in range(Wm.shape[0]):
                p = Polynomial.constant(space, float(self.d[r]))
                for i in range(self.m):
                    if Wm[r, i]:
                        p = p + uvars[i] * Wm[r, i]
                rows.append(p)
            return rows
        if self.kind == "general":
            from .polyalg import parse_polynomial

            return [parse_polynomial(txt, space) for txt in self.general_polys]
        raise UnsupportedKindError(self.kind)

    def contains(self, u: Sequence[float], tol: float = 1e-9) -> bool:
        sp = control_space(self.m)
        return all(c.evaluate({"u": list(u)}) <= tol for c in self.constraint_polys(sp))

    def coordinate_radius(self) -> np.ndarray:
        """Per-coordinate bound |u_i| <= r_i."""
        if self.kind == "box":
            return np.asarray(self.halfwidths, dtype=float)
        if self.kind == "ellipsoid":
            Winv = np.linalg.inv(np.asarray(self.W, dtype=float))
            return np.sqrt(np.maximum(np.diag(Winv), 0.0))
        if self.kind == "polytope":
            if self.vertices is None:
                raise UnsupportedKindError("polytope without vertices: no coordinate radius")
            return np.abs(np.asarray(self.vertices, dtype=float)).max(axis=0)
        raise UnsupportedKindError("general control set: supply bounds explicitly")


def dual_bound(cs: ControlSet, lgb_sup) -> float:
    """Bound M_zeta with ||zeta*|| <= M_zeta for the inner control problem.

    ``lgb_sup`` is a valid sup of ||L_g b|| over the feasible set (a
    scalar, or per-coordinate sups for the box kind). Covers the polytope,
    box and ellipsoid kinds; ``general`` raises.
    """
    sup = np.atleast_1d(np.asarray(lgb_sup, dtype=float))
    if np.any(sup < 0):
        raise ValueError("lgb_sup must be nonnegative")
    if cs.kind == "box":
        w = np.asarray(cs.halfwidths, dtype=float)
        per = (sup if len(sup) == cs.m else np.full(cs.m, sup.max())) / (2.0 * w)
        return float(np.linalg.norm(per))
    if cs.kind == "ellipsoid":
        Wm = np.asarray(cs.W, dtype=float)
        lam_min = float(np.linalg.eigvalsh(0.5 * (Wm + Wm.T))[0])
        return float(sup.max() / (2.0 * math.sqrt(lam_min)))
    if cs.kind == "polytope":
        Wm = np.asarray(cs.W, dtype=float)
        rows = Wm.shape[0]
        if rows > 16:
            raise UnsupportedKindError("polytope dual bound limited to 16 rows")
        best = np.inf
        for size in range(1, cs.m + 1):
            for subset in itertools.combinations(range(rows), size):
                Ws = Wm[list(subset)].T  # m x size, columns are active normals
                gram = Ws.T @ Ws
                lam = np.linalg.eigvalsh(gram)[0]
                if lam > 1e-12:
                    best = min(best, lam)
        if not np.isfinite(best):
            raise UnsupportedKindError("polytope has no nondegenerate active set")
        return float(sup.max() / math.sqrt(best))
    raise UnsupportedKindError(f"no closed-form dual bound for kind {cs.kind!r}")


# --------------------------------------------------------------------------
# Parameter sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaSet:
    """Compact semialgebraic parameter set with explicit coordinate bounds.

    Kinds: ``interval`` (k=1), ``box``, ``ellipse-coupled``
    (t1, t2 in [lower, upper], t3^2 <= xi^2 t1 t2 with 0 < lower < upper
    and 0 < xi < 1), ``general`` (polynomial rows >= 0 plus a bounding box).
    """

    kind: str
    lower: float | None = None
    upper: float | None = None
    xi: float | None = None
    box: tuple[tuple[float, float], ...] | None = None
    general_rows: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind == "interval":
            if self.lower is None or self.upper is None or self.lower >= self.upper:
                raise ValueError("interval needs lower < upper")
        elif self.kind == "box":
            if not self.box or any(lo >= hi for lo, hi in self.box):
                raise ValueError("box needs nonempty coordinate intervals")
        elif self.kind == "ellipse-coupled":
            if not (self.lower is not None and self.upper is not None and 0 < self.lower < self.upper):
                raise ValueError("ellipse-coupled needs 0 < lower < upper")
            if not (self.xi is not None and 0 < self.xi < 1):
                raise ValueError("ellipse-coupled needs 0 < xi < 1")
        elif self.kind == "general":
            if not self.box:
                raise ValueError("general parameter set requires a bounding box")
        else:
            raise UnsupportedKindError(f"unknown parameter-set kind {self.kind!r}")

    @property
    def k(self) -> int:
        if self.kind == "interval":
            return 1
        if self.kind == "ellipse-coupled":
            return 3
        return len(self.box)

    def coordinate_bounds(self) -> list[tuple[float, float]]:
        if self.kind == "interval":
            return [(self.lower, self.upper)]
        if self.kind == "ellipse-coupled":
            lo, hi, xi = self.lower, self.upper, self.xi
            r3 = xi * hi
            return [(lo, hi), (lo, hi), (-r3, r3)]
        return [tuple(bb) for bb in self.box]

    def constraint_polys(self, space: VariableSpace) -> list[Polynomial]:
        """Membership rows in >= 0 convention."""
        tsl = space.block_slice("t")
        tvars = [Polynomial.variable(space, space.names[i]) for i in range(tsl.start, tsl.stop)]
        rows: list[Polynomial] = []
        if self.kind in ("interval", "box"):
            for tv, (lo, hi) in zip(tvars, self.coordinate_bounds()):
                rows.append(tv - lo)
                rows.append(hi - tv)
        elif self.kind == "ellipse-coupled":
            for tv in tvars[:2]:
                rows.append(tv - self.lower)
                rows.append(self.upper - tv)
            rows.append(tvars[0] * tvars[1] * self.xi**2 - tvars[2] * tvars[2])
        else:
            from .polyalg import parse_polynomial

            rows.extend(parse_polynomial(txt, space) for txt in self.general_rows or ())
            for tv, (lo, hi) in zip(tvars, self.coordinate_bounds()):
                rows.append(tv - lo)
                rows.append(hi - tv)
        return rows

    def contains(self, theta: Sequence[float], tol: float = 1e-9) -> bool:
        sp = theta_space(self.k)
        return all(r.evaluate({"t": list(theta)}) >= -tol for r in self.constraint_polys(sp))

    def grid(self, per_axis: int = 21) -> np.ndarray:
        """Deterministic grid of member points (rows are theta vectors)."""
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in self.coordinate_bounds()]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.k)
        keep = np.array([self.contains(row) for row in mesh])
        return mesh[keep]


# --------------------------------------------------------------------------
# System model and CBF candidate
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemModel:
    """Control-affine polynomial dynamics with bounded additive disturbance."""

    f: tuple[Polynomial, ...]
    g: tuple[tuple[Polynomial, ...], ...]       # n rows, m columns
    J: tuple[tuple[Polynomial, ...], ...] | None  # n rows, d columns
    m_eps: float
    control: ControlSet

    def __post_init__(self):
        n = len(self.f)
        if any(len(row) != self.m for row in self.g) or len(self.g) != n:
            raise SpaceMismatchError("g must be n x m")
        if self.m_eps < 0:
            raise ValueError("disturbance bound must be nonnegative")
        if (self.J is None) != (self.m_eps == 0):
            raise ValueError("disturbance matrix present iff its bound is positive")
        xsp = state_space(n)
        xidx = set(range(n))
        for p in list(self.f) + [q for row in self.g for q in row] + (
            [q for row in self.J for q in row] if self.J else []
        ):
            if p.space != xsp:
                raise SpaceMismatchError("dynamics entries must live in the state space")
            if not p.support_vars() <= xidx:
                raise SpaceMismatchError("dynamics entries may only involve x")

    @property
    def n(self) -> int:
        return len(self.f)

    @property
    def m(self) -> int:
        return self.control.m

    @property
    def d(self) -> int:
        return len(self.J[0]) if self.J else 0

    @property
    def has_disturbance(self) -> bool:
        return self.J is not None and self.m_eps > 0


def detect_family(b: Polynomial, n: int, k: int) -> str:
    """Structural match against the built-in CBF families."""
    sp = b.space
    if k == 1 and n >= 1:
        target = Polynomial.variable(sp, "t")
        for i in range(n):
            xv = Polynomial.variable(sp, sp.names[i])
            target = target - xv * xv
        if (b - target).is_zero:
            return "circular"
    if k == 3 and n == 2:
        x1 = Polynomial.variable(sp, "x1")
        x2 = Polynomial.variable(sp, "x2")
        t1 = Polynomial.variable(sp, "t1")
        t2 = Polynomial.variable(sp, "t2")
        t3 = Polynomial.variable(sp, "t3")
        target = 1.0 - (t1 * x1 * x1 + t2 * x2 * x2 + 2.0 * t3 * x1 * x2)
        if (b - target).is_zero:
            return "elliptical"
    return "general"


@dataclass(frozen=True)
class CbfCandidate:
    """Parametric barrier b(x, theta) with its compact parameter set."""

    b: Polynomial            # lives in cbf_space(n, k)
    theta_set: ThetaSet
    family: str = field(default="auto")

    def __post_init__(self):
        n = self.b.space.block_dim("x")
        k = self.b.space.block_dim("t")
        if k != self.theta_set.k:
            raise SpaceMismatchError("parameter dimension mismatch between b and Theta")
        if self.family == "auto":
            object.__setattr__(self, "family", detect_family(self.b, n, k))

    @property
    def n(self) -> int:
        return self.b.space.block_dim("x")

    @property
    def k(self) -> int:
        return self.b.space.block_dim("t")

    def b_at(self, theta: Sequence[float]) -> Polynomial:
        bindings = {f"t{i+1}" if self.k > 1 else "t": float(v) for i, v in enumerate(theta)}
        return self.b.substitute(bindings)


# --------------------------------------------------------------------------
# Lie derivatives
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LieDerivatives:
    """Directional derivatives of b along f, g and J, in (x, t) variables."""

    lf: Polynomial
    lg: tuple[Polynomial, ...]               # 1 x m row
    lj: tuple[Polynomial, ...] | None        # 1 x d row


def lie_derivatives(model: SystemModel, cbf: CbfCandidate) -> LieDerivatives:
    if model.n != cbf.n:
        raise SpaceMismatchError("state dimension mismatch between model and CBF")
    sp = cbf.b.space
    grads = [cbf.b.differentiate(sp.names[i]) for i in range(model.n)]

    def row_product(cols: int, matrix) -> list[Polynomial]:
        out = []
        for c in range(cols):
            acc = Polynomial.zero(sp)
            for i in range(model.n):
                acc = acc + grads[i] * matrix[i][c].embed(sp)
            out.append(acc)
        return out

    lf = Polynomial.zero(sp)
    for i in range(model.n):
        lf = lf + grads[i] * model.f[i].embed(sp)
    lg = tuple(row_product(model.m, model.g))
    lj = tuple(row_product(model.d, model.J)) if model.J else None
    return LieDerivatives(lf=lf, lg=lg, lj=lj)


# --------------------------------------------------------------------------
# Interval arithmetic on boxes
# --------------------------------------------------------------------------

def _pow_interval(lo: float, hi: float, e: int) -> tuple[float, float]:
    if e == 0:
        return (1.0, 1.0)
    a, b = lo**e, hi**e
    cands = [a, b]
    if lo < 0 < hi and e % 2 == 0:
        cands.append(0.0)
    return (min(cands), max(cands))


def poly_range_on_box(p: Polynomial, box: Mapping[str, tuple[float, float]]) -> tuple[float, float]:
    """Interval bound on the range of p over a per-variable box."""
    names = p.space.names
    lo_tot, hi_tot = 0.0, 0.0
    for exps, c in p.items():
        lo, hi = c, c
        for i, e in enumerate(exps):
            if e == 0:
                continue
            if names[i] not in box:
                raise SpaceMismatchError(f"box missing variable {names[i]!r}")
            plo, phi = _pow_interval(*box[names[i]], e)
            cands = [lo * plo, lo * phi, hi * plo, hi * phi]
            lo, hi = min(cands), max(cands)
        lo_tot += lo
        hi_tot += hi
    return (lo_tot, hi_tot)


def poly_abs_sup_on_box(p: Polynomial, box: Mapping[str, tuple[float, float]]) -> float:
    lo, hi = poly_range_on_box(p, box)
    return max(abs(lo), abs(hi))


# --------------------------------------------------------------------------
# Variable bounds for the verification program
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundSet:
    """Redundant inequality rows bounding blocks of the decision vector.

    Rows live in (x[, z], u, zeta, t) variables, >= 0 convention, and are
    valid on the feasible set of the verification program. ``var_radius``
    gives per-scalar magnitude bounds used for scaling and sup estimates.
    """

    rows: tuple[Polynomial, ...]
    labels: tuple[str, ...]
    var_radius: dict[str, float]
    ball_row: Polynomial | None = None

    def validate_by_sampling(self, sampler, count: int = 1000, tol: float = -1e-9) -> float:
        """Spot-check nonnegativity on sampled feasible points.

        ``sampler(i)`` returns an assignment dict for all row variables.
        Returns the worst row value found (should be >= tol).
        """
        worst = np.inf
        for i in range(count):
            point = sampler(i)
            for row in self.rows:
                worst = min(worst, row.evaluate(point))
        return float(worst)


def _sup_on_theta(fn, theta_set: ThetaSet, per_axis: int = 25) -> float:
    pts = theta_set.grid(per_axis)
    vals = [fn(row) for row in pts]
    # include box corners for good measure
    corners = itertools.product(*theta_set.coordinate_bounds())
    for c in corners:
        if theta_set.contains(c):
            vals.append(fn(np.asarray(c)))
    return float(max(vals))


def variable_bounds(
    model: SystemModel,
    cbf: CbfCandidate,
    overrides: Sequence[Polynomial] | None = None,
    include_ball: bool = False,
) -> BoundSet:
    """Bound rows for the built-in CBF families (or user overrides).

    Circular family (b = t - ||x||^2): ||x||^2 <= t and, for box control,
    zeta_i^2 <= t^2 / (4 w_i^2); the lift bound comes from a constant-J
    eigenvalue estimate. Elliptical family uses the coupled-parameter
    closed forms cleared to polynomial form by the (positive) determinant
    factor. Control rows are *not* duplicated here: primal feasibility in
    the KKT system already carries them.
    """
    k = cbf.k
    space = decision_space(model.n, model.has_disturbance, model.m, model.control.l_u, k)
    names = space.names
    tnames = [names[i] for i in range(*space.block_slice("t").indices(space.nvars))]
    tvars = [Polynomial.variable(space, nm) for nm in tnames]
    xsl = space.block_slice("x")
    xvars = [Polynomial.variable(space, names[i]) for i in range(xsl.start, xsl.stop)]
    zsl_names = (
        [names[i] for i in range(*space.block_slice("z").indices(space.nvars))]
        if model.has_disturbance
        else []
    )
    zvar = Polynomial.variable(space, zsl_names[0]) if zsl_names else None
    zetasl = space.block_slice("zeta")
    zetavars = [Polynomial.variable(space, names[i]) for i in range(zetasl.start, zetasl.stop)]

    rows: list[Polynomial] = []
    labels: list[str] = []
    radius: dict[str, float] = {}
    tb = cbf.theta_set.coordinate_bounds()
    for nm, (lo, hi) in zip(tnames, tb):
        radius[nm] = max(abs(lo), abs(hi))

    if overrides is not None:
        rows = [p.embed(space) for p in overrides]
        labels = [f"override{i}" for i in range(len(rows))]
        # radii must still come from somewhere: fall back to interval data
        ubox = model.control.coordinate_radius()
        usl = space.block_slice("u")
        for i, nm in enumerate(names[usl.start : usl.stop]):
            radius[nm] = float(ubox[i])
        return BoundSet(tuple(rows), tuple(labels), radius)

    if cbf.family == "circular":
        sum_x2 = Polynomial.zero(space)
        for xv in xvars:
            sum_x2 = sum_x2 + xv * xv
        t = tvars[0]
        rows.append(t - sum_x2)
        labels.append("state")
        t_sup = tb[0][1]
        x_rad = math.sqrt(max(t_sup, 0.0))
        for nm in names[xsl.start : xsl.stop]:
            radius[nm] = x_rad

        if model.has_disturbance:
            Jmat, is_const = _constant_matrix(model.J)
            if not is_const:
                raise UnsupportedKindError(
                    "circular family lift bound needs a constant disturbance matrix; "
                    "supply override rows instead"
                )
            lam = float(np.linalg.eigvalsh(Jmat @ Jmat.T)[-1])
            rows.append(t * (4.0 * lam) - zvar * zvar)
            labels.append("lift")
            radius[zsl_names[0]] = 2.0 * math.sqrt(lam * max(t_sup, 0.0))

        if model.control.kind == "box":
            # |L_g b| = |-2 x' g| <= 2 r ||x||^2 when each column satisfies
            # ||g_col(x)|| <= r ||x||; the Van der Pol column g = [0; x1]
            # has r = 1, giving zeta_i^2 <= t^2 / (4 w_i^2).
            gcol_ok = _column_growth_bounded(model)
            if gcol_ok:
                for zv, w in zip(zetavars, model.control.halfwidths):
                    rows.append(t * t - zv * zv * (4.0 * w * w))
                    labels.append("dual")
                    radius[_poly_name(zv)] = t_sup / (2.0 * w)
            else:
                mzeta = _dual_radius_interval(model, cbf, radius)
                _append_dual_ball(rows, labels, zetavars, mzeta, space)
                for zv in zetavars:
                    radius[_poly_name(zv)] = mzeta
        else:
            mzeta = _dual_radius_interval(model, cbf, radius)
            _append_dual_ball(rows, labels, zetavars, mzeta, space)
            for zv in zetavars:
                radius[_poly_name(zv)] = mzeta

    elif cbf.family == "elliptical":
        if model.control.kind != "box" or model.m != 1:
            raise UnsupportedKindError(
                "elliptical family bounds assume a single box-constrained input"
            )
        t1, t2, t3 = tvars
        det = t1 * t2 - t3 * t3
        tr = t1 + t2
        sum_x2 = xvars[0] * xvars[0] + xvars[1] * xvars[1]
        rows.append(tr - sum_x2 * det)
        labels.append("state")

        lo, hi, xi = cbf.theta_set.lower, cbf.theta_set.upper, cbf.theta_set.xi

        def xsq_sup(th):
            dd = th[0] * th[1] - th[2] ** 2
            return (th[0] + th[1]) / dd if dd > 1e-12 else np.inf

        x_rad = math.sqrt(_sup_on_theta(xsq_sup, cbf.theta_set))
        for nm in names[xsl.start : xsl.stop]:
            radius[nm] = x_rad

        if model.has_disturbance:
            Jmat, is_const = _constant_matrix(model.J)
            if not is_const:
                raise UnsupportedKindError(
                    "elliptical family lift bound needs a constant disturbance matrix"
                )
            lam = float(np.linalg.eigvalsh(Jmat @ Jmat.T)[-1])
            rows.append(tr * (4.0 * lam) - zvar * zvar)
            labels.append("lift")
            radius[zsl_names[0]] = 2.0 * math.sqrt(lam * 2.0 * hi)

        w = model.control.halfwidths[0]
        rows.append(tr * tr - zetavars[0] * zetavars[0] * det * (w * w))
        labels.append("dual")

        def zsq_sup(th):
            dd = th[0] * th[1] - th[2] ** 2
            return (th[0] + th[1]) ** 2 / (w * w * dd) if dd > 1e-12 else np.inf

        radius[_poly_name(zetavars[0])] = math.sqrt(_sup_on_theta(zsq_sup, cbf.theta_set))
    else:
        raise UnsupportedKindError(
            f"no built-in bounds for CBF family {cbf.family!r}; supply overrides"
        )

    ubox = model.control.coordinate_radius()
    usl = space.block_slice("u")
    for i, nm in enumerate(names[usl.start : usl.stop]):
        radius[nm] = float(ubox[i])

    ball = None
    if include_ball:
        my = sum(r * r for r in (radius[nm] for nm in names))
        ball = Polynomial.constant(space, my)
        for nm in names:
            v = Polynomial.variable(space, nm)
            ball = ball - v * v
    return BoundSet(tuple(rows), tuple(labels), radius, ball)


def _poly_name(p: Polynomial) -> str:
    (exps,) = [e for e, _ in p.items()]
    (idx,) = [i for i, e in enumerate(exps) if e]
    return p.space.names[idx]


def _append_dual_ball(rows, labels, zetavars, mzeta, space):
    ball = Polynomial.constant(space, mzeta**2)
    for zv in zetavars:
        ball = ball - zv * zv
    rows.append(ball)
    labels.append("dual")


def _constant_matrix(rows) -> tuple[np.ndarray, bool]:
    n = len(rows)
    d = len(rows[0])
    M = np.zeros((n, d))
    for i in range(n):
        for j in range(d):
            p = rows[i][j]
            if p.degree() > 0:
                return M, False
            M[i, j] = p.coeff((0,) * p.space.nvars)
    return M, True


def _column_growth_bounded(model: SystemModel) -> bool:
    """True when every g entry is linear in x with coefficients of |.| <= 1.

    Each column then satisfies ||g_col(x)||^2 <= ||x||^2, the growth
    condition behind the closed-form dual bound.
    """
    for row in model.g:
        for p in row:
            for exps, c in p.items():
                if sum(exps) != 1 or abs(c) > 1.0 + 1e-12:
                    return False
    cols = len(model.g[0])
    for cidx in range(cols):
        total = 0.0
        for row in model.g:
            for exps, c in row[cidx].items():
                total += c * c
        if total > 1.0 + 1e-9:
            return False
    return True


def _dual_radius_interval(model: SystemModel, cbf: CbfCandidate, radius_so_far) -> float:
    """Fallback M_zeta from interval arithmetic over the state/theta box."""
    lds = lie_derivatives(model, cbf)
    box = {}
    sp = lds.lg[0].space
    for nm in sp.names:
        if nm in radius_so_far:
            box[nm] = (-radius_so_far[nm], radius_so_far[nm])
    tset = cbf.theta_set.coordinate_bounds()
    tnames = [n for n in sp.names if n.startswith("t")]
    for nm, (lo, hi) in zip(tnames, tset):
        box[nm] = (lo, hi)
    sups = np.array([poly_abs_sup_on_box(p, box) for p in lds.lg])
    return dual_bound(model.control, sups if model.control.kind == "box" else float(np.linalg.norm(sups)))


# --------------------------------------------------------------------------
# Closed-form inner value (the brute-force oracle)
# --------------------------------------------------------------------------

def inner_argmax_control(
    model: SystemModel, lg_vals: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Optimal (u*, zeta*, value) of the inner control maximization.

    ``lg_vals`` holds L_g b evaluated at a point. Where the gradient is
    zero the optimal face is a continuum; the interior point u = 0 with
    zeta = 0 is returned, which satisfies every KKT row.
    """
    cs = model.control
    g = np.asarray(lg_vals, dtype=float)
    if cs.kind == "box":
        w = np.asarray(cs.halfwidths)
        u = np.where(g > 0, w, np.where(g < 0, -w, 0.0))
        zeta = np.abs(g) / (2.0 * w)
        return u, zeta, float(np.abs(g) @ w)
    if cs.kind == "ellipsoid":
        Wm = np.asarray(cs.W, dtype=float)
        Winv = np.linalg.inv(Wm)
        val2 = float(g @ Winv @ g)
        if val2 <= 0:
            return np.zeros(cs.m), np.zeros(1), 0.0
        val = math.sqrt(val2)
        u = Winv @ g / val
        return u, np.array([val / 2.0]), val
    if cs.kind == "polytope":
        if cs.vertices is None:
            raise UnsupportedKindError("polytope support value needs a vertex list")
        V = np.asarray(cs.vertices, dtype=float)
        vals = V @ g
        best = int(np.argmax(vals))
        u = V[best]
        Wm = np.asarray(cs.W, dtype=float)
        d = np.asarray(cs.d, dtype=float)
        active = np.abs(Wm @ u + d) <= 1e-9
        zeta = np.zeros(len(d))
        if active.any():
            from scipy.optimize import nnls

            sol, _ = nnls(Wm[active].T, g)
            zeta[active] = sol
        return u, zeta, float(vals[best])
    raise UnsupportedKindError(f"no closed-form support value for kind {cs.kind!r}")


def inner_closed_form(
    model: SystemModel, cbf: CbfCandidate, x: Sequence[float], theta: Sequence[float]
) -> float:
    """L_f b + max_u L_g b u + min_eps L_J b eps at a single point."""
    lds = lie_derivatives(model, cbf)
    point = {"x": list(x), "t": list(theta)}
    lf = lds.lf.evaluate(point)
    gv = np.array([p.evaluate(point) for p in lds.lg])
    _, _, vu = inner_argmax_control(model, gv)
    veps = 0.0
    if model.has_disturbance:
        jv = np.array([p.evaluate(point) for p in lds.lj])
        veps = -model.m_eps * float(np.linalg.norm(jv))
    return float(lf + vu + veps)


def complete_point(
    model: SystemModel, cbf: CbfCandidate, x: Sequence[float], theta: Sequence[float]
) -> dict:
    """Extend a boundary state to a full decision point at the inner optimum."""
    lds = lie_derivatives(model, cbf)
    point = {"x": list(x), "t": list(theta)}
    gv = np.array([p.evaluate(point) for p in lds.lg])
    u, zeta, _ = inner_argmax_control(model, gv)
    out = {"x": list(map(float, x)), "u": list(map(float, u)), "zeta": list(map(float, zeta))}
    if model.has_disturbance:
        jv = np.array([p.evaluate(point) for p in lds.lj])
        out["z"] = [float(np.linalg.norm(jv))]
    return out


def boundary_points(cbf: CbfCandidate, theta: Sequence[float], npoints: int) -> np.ndarray:
    """Deterministic parametrization of the zero level set (2-D families)."""
    th = np.asarray(theta, dtype=float)
    phi = np.linspace(0.0, 2.0 * np.pi, npoints, endpoint=False)
    if cbf.family == "circular":
        if cbf.n != 2:
            raise UnsupportedKindError("boundary grid implemented for planar states")
        r = math.sqrt(max(th[0], 0.0))
        return np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    if cbf.family == "elliptical":
        A = np.array([[th[0], th[2]], [th[2], th[1]]])
        w, Q = np.linalg.eigh(A)
        if w.min() <= 0:
            raise ValueError("parameter outside the positive-definite region")
        Ainv_half = (Q / np.sqrt(w)) @ Q.T
        circ = np.column_stack([np.cos(phi), np.sin(phi)])
        return circ @ Ainv_half.T
    raise UnsupportedKindError(f"no boundary parametrization for family {cbf.family!r}")


def value_grid_oracle(
    model: SystemModel, cbf: CbfCandidate, theta: Sequence[float], npoints: int = 10_000
) -> tuple[float, np.ndarray]:
    """Brute-force V(theta): min of the closed-form inner value on a boundary grid."""
    pts = boundary_points(cbf, theta, npoints)
    lds = lie_derivatives(model, cbf)
    bind = {
        (f"t{i+1}" if cbf.k > 1 else "t"): float(v) for i, v in enumerate(np.atleast_1d(theta))
    }
    lf = lds.lf.substitute(bind).evaluate_many({"x": pts})
    gvals = np.column_stack([p.substitute(bind).evaluate_many({"x": pts}) for p in lds.lg])
    cs = model.control
    if cs.kind == "box":
        vu = np.abs(gvals) @ np.asarray(cs.halfwidths)
    elif cs.kind == "ellipsoid":
        Winv = np.linalg.inv(np.asarray(cs.W, dtype=float))
        vu = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", gvals, Winv, gvals), 0.0))
    elif cs.kind == "polytope":
        if cs.vertices is None:
            raise UnsupportedKindError("polytope support value needs a vertex list")
        vu = (gvals @ np.asarray(cs.vertices, dtype=float).T).max(axis=1)
    else:
        raise UnsupportedKindError(cs.kind)
    total = lf + vu
    if model.has_disturbance:
        jvals = np.column_stack([p.substitute(bind).evaluate_many({"x": pts}) for p in lds.lj])
        total = total - model.m_eps * np.linalg.norm(jvals, axis=1)
    i = int(np.argmin(total))
    return float(total[i]), pts[i]


# --------------------------------------------------------------------------
# Bundled benchmark systems
# --------------------------------------------------------------------------

def vanderpol_model(u_max: float = 5.0, m_eps: float = 0.0) -> SystemModel:
    """Controlled Van der Pol oscillator, optionally with matched disturbance."""
    sp = state_space(2)
    x1 = Polynomial.variable(sp, "x1")
    x2 = Polynomial.variable(sp, "x2")
    f = (x2, x2 * 0.5 - x2 * x2 * x2 * 0.5 - x1)
    g = ((Polynomial.zero(sp),), (x1,))
    J = None
    if m_eps > 0:
        J = ((Polynomial.zero(sp),), (Polynomial.constant(sp, 1.0),))
    control = ControlSet(kind="box", m=1, halfwidths=(u_max,))
    return SystemModel(f=f, g=g, J=J, m_eps=m_eps, control=control)


def circular_cbf(theta_max: float = 2.0, theta_min: float = 0.0, n: int = 2) -> CbfCandidate:
    sp = cbf_space(n, 1)
    b = Polynomial.variable(sp, "t")
    for i in range(n):
        xv = Polynomial.variable(sp, sp.names[i])
        b = b - xv * xv
    return CbfCandidate(b=b, theta_set=ThetaSet(kind="interval", lower=theta_min, upper=theta_max))


def elliptical_cbf(lower: float, upper: float, xi: float) -> CbfCandidate:
    sp = cbf_space(2, 3)
    x1 = Polynomial.variable(sp, "x1")
    x2 = Polynomial.variable(sp, "x2")
    t1 = Polynomial.variable(sp, "t1")
    t2 = Polynomial.variable(sp, "t2")
    t3 = Polynomial.variable(sp, "t3")
    b = 1.0 - (t1 * x1 * x1 + t2 * x2 * x2 + 2.0 * t3 * x1 * x2)
    return CbfCandidate(
        b=b, theta_set=ThetaSet(kind="ellipse-coupled", lower=lower, upper=upper, xi=xi)
    )
