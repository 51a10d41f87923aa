"""Block-diagonal semidefinite programs and an embedded first-order solver.

Problems are stored in SDPA-like primal form

    min <C, X>   s.t.  <A_j, X> = b_j (j = 1..p),   X in K,

where ``X`` is block diagonal and ``K`` is a product of dense PSD blocks
(positive block size) and nonnegative diagonal blocks (negative size, the
SDPA convention). Matrix entries are stored as sparse upper-triangle
coordinates with symmetric completion implied, exactly as SDPA files do.

The embedded solver is an ADMM / operator-splitting iteration: the iterate
alternates between an exact projection onto the affine subspace
``{x : Ax = b}`` (one sparse factorization, reused every iteration) and a
per-block eigendecomposition projection onto the cone. Diagonal Ruiz
equilibration preconditions the data. The iteration is deterministic:
identical inputs and settings reproduce bitwise-identical iterates.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ParseError, SolverFailure

_SQRT2 = np.sqrt(2.0)

# Normalized certificate thresholds for infeasibility/unboundedness detection.
INFEAS_CERT_TOL = 1e-9
UNBOUND_CERT_TOL = 1e-9


# --------------------------------------------------------------------------
# Problem container
# --------------------------------------------------------------------------

@dataclass
class SdpProblem:
    """Sparse block-diagonal SDP in primal standard form.

    ``entries`` holds constraint coefficients as parallel arrays
    (row, block, i, j, value) with 0-based indices, i <= j, and the SDPA
    symmetric-completion convention: an off-diagonal value v means the
    constraint matrix has v at (i, j) and (j, i). ``obj`` holds the
    objective matrix C in the same (block, i, j, value) layout.
    """

    blocks: tuple[int, ...]
    obj: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    entries: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    b: np.ndarray

    @property
    def num_constraints(self) -> int:
        return len(self.b)

    @property
    def block_sizes(self) -> list[int]:
        return [abs(s) for s in self.blocks]

    def validate(self):
        if self.num_constraints < 1:
            raise ValueError("problem needs at least one constraint")
        rows = self.entries[0]
        if len(rows) and (rows.min() < 0 or rows.max() >= self.num_constraints):
            raise ValueError("constraint row index out of range")
        for arr_blk, arr_i, arr_j in (
            (self.obj[0], self.obj[1], self.obj[2]),
            (self.entries[1], self.entries[2], self.entries[3]),
        ):
            for blk, i, j in zip(arr_blk, arr_i, arr_j):
                size = abs(self.blocks[blk])
                if not (0 <= i <= j < size):
                    raise ValueError(f"entry ({i},{j}) outside block {blk} of size {size}")
                if self.blocks[blk] < 0 and i != j:
                    raise ValueError("diagonal block admits only diagonal entries")


class SdpBuilder:
    """Incremental constructor for :class:`SdpProblem`."""

    def __init__(self, blocks: Sequence[int]):
        self.blocks = tuple(int(s) for s in blocks)
        self._obj: list[tuple[int, int, int, float]] = []
        self._ent: list[tuple[int, int, int, int, float]] = []
        self._b: list[float] = []

    def add_obj(self, blk: int, i: int, j: int, val: float):
        if val != 0.0:
            self._obj.append((blk, min(i, j), max(i, j), float(val)))

    def new_row(self, rhs: float) -> int:
        self._b.append(float(rhs))
        return len(self._b) - 1

    def add_entry(self, row: int, blk: int, i: int, j: int, val: float):
        if val != 0.0:
            self._ent.append((row, blk, min(i, j), max(i, j), float(val)))

    def build(self) -> SdpProblem:
        if self._obj:
            ob, oi, oj, ov = map(np.asarray, zip(*self._obj))
        else:
            ob = oi = oj = np.zeros(0, dtype=int)
            ov = np.zeros(0)
        if self._ent:
            er, eb, ei, ej, ev = map(np.asarray, zip(*self._ent))
        else:
            er = eb = ei = ej = np.zeros(0, dtype=int)
            ev = np.zeros(0)
        prob = SdpProblem(
            blocks=self.blocks,
            obj=(ob.astype(np.int32), oi.astype(np.int32), oj.astype(np.int32), ov.astype(float)),
            entries=(
                er.astype(np.int64),
                eb.astype(np.int32),
                ei.astype(np.int32),
                ej.astype(np.int32),
                ev.astype(float),
            ),
            b=np.asarray(self._b, dtype=float),
        )
        prob.validate()
        return prob


# --------------------------------------------------------------------------
# svec layout
# --------------------------------------------------------------------------

class _BlockLayout:
    """Mapping between block-diagonal symmetric matrices and a flat svec.

    PSD blocks use the scaled upper triangle (off-diagonal times sqrt(2))
    so that matrix inner products become plain dot products. Diagonal
    blocks embed as-is.
    """

    def __init__(self, blocks: Sequence[int]):
        self.blocks = tuple(blocks)
        self.offsets: list[int] = []
        self.tri: list = []
        pos = 0
        for s in blocks:
            self.offsets.append(pos)
            if s > 0:
                iu = np.triu_indices(s)
                self.tri.append(iu)
                pos += s * (s + 1) // 2
            else:
                self.tri.append(None)
                pos += -s
        self.dim = pos
        # per-flat-position block id (for block-scalar equilibration)
        self.col_block = np.zeros(self.dim, dtype=np.int32)
        for k, s in enumerate(blocks):
            start = self.offsets[k]
            width = s * (s + 1) // 2 if s > 0 else -s
            self.col_block[start : start + width] = k

    def flat_index(self, blk: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Flat svec positions of upper-triangle entries (i <= j)."""
        out = np.empty(len(blk), dtype=np.int64)
        for k, s in enumerate(self.blocks):
            sel = blk == k
            if not sel.any():
                continue
            if s > 0:
                ii, jj = i[sel], j[sel]
                # row-major upper triangle: offset of row ii plus (jj - ii)
                out[sel] = self.offsets[k] + ii * (2 * s - ii - 1) // 2 + jj
            else:
                out[sel] = self.offsets[k] + i[sel]
        return out

    def entry_scale(self, blk: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Factor turning an SDPA entry value into its svec coefficient."""
        scale = np.ones(len(blk))
        psd = np.array([self.blocks[k] > 0 for k in blk])
        off = (i != j) & psd
        scale[off] = _SQRT2
        return scale

    def to_matrices(self, x: np.ndarray) -> list[np.ndarray]:
        mats = []
        for k, s in enumerate(self.blocks):
            start = self.offsets[k]
            if s > 0:
                v = x[start : start + s * (s + 1) // 2]
                M = np.zeros((s, s))
                iu = self.tri[k]
                M[iu] = v
                M = M + M.T
                M[np.diag_indices(s)] /= 2.0
                offd = ~np.eye(s, dtype=bool)
                M[offd] /= _SQRT2
                mats.append(M)
            else:
                mats.append(x[start : start - s].copy())
        return mats

    def from_matrices(self, mats: Sequence[np.ndarray]) -> np.ndarray:
        x = np.zeros(self.dim)
        for k, s in enumerate(self.blocks):
            start = self.offsets[k]
            if s > 0:
                M = mats[k]
                iu = self.tri[k]
                v = M[iu].copy()
                offd = iu[0] != iu[1]
                v[offd] *= _SQRT2
                x[start : start + len(v)] = v
            else:
                x[start : start - s] = mats[k]
        return x

    def project_cone(self, x: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the product cone."""
        out = x.copy()
        for k, s in enumerate(self.blocks):
            start = self.offsets[k]
            if s > 0:
                width = s * (s + 1) // 2
                v = x[start : start + width]
                M = np.zeros((s, s))
                iu = self.tri[k]
                M[iu] = v
                M = M + M.T
                M[np.diag_indices(s)] /= 2.0
                offd_mask = ~np.eye(s, dtype=bool)
                M[offd_mask] /= _SQRT2
                w, Q = np.linalg.eigh(M)
                pos = w > 0
                if pos.all():
                    continue
                if not pos.any():
                    out[start : start + width] = 0.0
                    continue
                Mp = (Q[:, pos] * w[pos]) @ Q[:, pos].T
                vp = Mp[iu].copy()
                off = iu[0] != iu[1]
                vp[off] *= _SQRT2
                out[start : start + width] = vp
            else:
                width = -s
                np.maximum(x[start : start + width], 0.0, out=out[start : start + width])
        return out

    def min_eig(self, x: np.ndarray) -> float:
        """Smallest eigenvalue across blocks (diagonal blocks: min entry)."""
        worst = np.inf
        for k, s in enumerate(self.blocks):
            start = self.offsets[k]
            if s > 0:
                width = s * (s + 1) // 2
                v = x[start : start + width]
                M = np.zeros((s, s))
                iu = self.tri[k]
                M[iu] = v
                M = M + M.T
                M[np.diag_indices(s)] /= 2.0
                offd_mask = ~np.eye(s, dtype=bool)
                M[offd_mask] /= _SQRT2
                w = np.linalg.eigvalsh(M)
                worst = min(worst, w[0])
            else:
                width = -s
                if width:
                    worst = min(worst, x[start : start + width].min())
        return float(worst)


def _assemble(problem: SdpProblem, layout: _BlockLayout):
    """Objective vector and constraint matrix in svec coordinates."""
    ob, oi, oj, ov = problem.obj
    c = np.zeros(layout.dim)
    if len(ob):
        cols = layout.flat_index(ob, oi, oj)
        vals = ov * layout.entry_scale(ob, oi, oj)
        np.add.at(c, cols, vals)
    er, eb, ei, ej, ev = problem.entries
    cols = layout.flat_index(eb, ei, ej)
    vals = ev * layout.entry_scale(eb, ei, ej)
    A = sp.csr_matrix(
        (vals, (er, cols)), shape=(problem.num_constraints, layout.dim)
    )
    A.sum_duplicates()
    return c, A


# --------------------------------------------------------------------------
# Solver
# --------------------------------------------------------------------------

@dataclass
class SolverSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iters: int = 200_000
    rho: float = 1.0
    alpha: float = 1.6
    adaptive_rho: bool = True
    adapt_until: int = 5_000  # penalty updates freeze after this iteration
    scaling: bool = True
    check_every: int = 50
    detect_infeasibility: bool = True
    verbose: bool = False

    @staticmethod
    def from_env(**overrides) -> "SolverSettings":
        s = SolverSettings(**overrides)
        env = os.environ.get("RCBF_SDP_MAXITERS")
        if env and "max_iters" not in overrides:
            s = replace(s, max_iters=int(env))
        return s

    # Stage presets. Moment relaxations of the verification programs are
    # degenerate (non-unique duals) and converge fastest at a fixed
    # penalty; penalty churn traps them in limit cycles. The small
    # parameter-only relaxations and generic problems do better with
    # residual balancing left on.
    @staticmethod
    def _preset(base: dict, overrides: dict) -> "SolverSettings":
        if "max_iters" in overrides or os.environ.get("RCBF_SDP_MAXITERS"):
            base.pop("max_iters", None)  # explicit caps beat the preset
        base.update(overrides)
        return SolverSettings.from_env(**base)

    @staticmethod
    def for_moment(**overrides) -> "SolverSettings":
        return SolverSettings._preset(
            dict(rho=5.0, adaptive_rho=False, max_iters=30_000), overrides
        )

    @staticmethod
    def for_sos(**overrides) -> "SolverSettings":
        return SolverSettings._preset(
            dict(rho=1.0, adaptive_rho=True, adapt_until=10**9, max_iters=80_000), overrides
        )

    @staticmethod
    def for_theta(**overrides) -> "SolverSettings":
        return SolverSettings._preset(
            dict(rho=1.0, adaptive_rho=True, adapt_until=10**9, max_iters=40_000), overrides
        )


@dataclass
class SdpSolution:
    status: str  # optimal | max-iters | infeasible | unbounded
    x_blocks: list
    y: np.ndarray
    primal_obj: float
    dual_obj: float
    residuals: dict
    iterations: int
    seconds: float

    @property
    def gap(self) -> float:
        return self.residuals.get("gap", np.inf)


class _AffineProjector:
    """Exact projection onto {x : Ax = b} via a cached sparse factorization."""

    def __init__(self, A: sp.csr_matrix, b: np.ndarray):
        self.A = A
        self.AT = A.T.tocsr()
        self.b = b
        gram = (A @ self.AT).tocsc()
        self._reg = 0.0
        try:
            self._lu = spla.splu(gram)
            test = self._lu.solve(np.ones(gram.shape[0]))
            if not np.all(np.isfinite(test)):
                raise RuntimeError("singular normal matrix")
        except Exception:
            diag_mean = max(float(gram.diagonal().mean()), 1e-12)
            self._reg = 1e-10 * diag_mean
            gram = gram + self._reg * sp.identity(gram.shape[0], format="csc")
            self._lu = spla.splu(gram)
        self._gram = gram

    def solve_normal(self, rhs: np.ndarray) -> np.ndarray:
        w = self._lu.solve(rhs)
        if self._reg:
            # one refinement step compensates the ridge
            w += self._lu.solve(rhs - self._gram @ w + self._reg * w)
        return w

    def project(self, v: np.ndarray):
        """Returns (projection, normal-equation multiplier)."""
        w = self.solve_normal(self.A @ v - self.b)
        return v - self.AT @ w, w


def _ruiz_equilibrate(A: sp.csr_matrix, col_block: np.ndarray, n_blocks: int, iters: int = 10):
    """Row scaling plus per-block scalar column scaling (cone-invariant)."""
    p, n = A.shape
    d_r = np.ones(p)
    d_cb = np.ones(n_blocks)
    for _ in range(iters):
        Aabs = sp.csr_matrix(
            (np.abs(A.data), A.indices, A.indptr), shape=A.shape
        )
        row_max = np.asarray(Aabs.max(axis=1).todense()).ravel()
        row_max[row_max == 0] = 1.0
        r = 1.0 / np.sqrt(row_max)
        A = sp.diags(r) @ A
        d_r *= r
        col_max = np.asarray(Aabs.max(axis=0).todense()).ravel()
        blk_max = np.ones(n_blocks)
        for k in range(n_blocks):
            sel = col_block == k
            m = col_max[sel].max() if sel.any() else 1.0
            blk_max[k] = m if m > 0 else 1.0
        e = 1.0 / np.sqrt(blk_max)
        col_scale = e[col_block]
        A = A @ sp.diags(col_scale)
        d_cb *= e
    return A.tocsr(), d_r, d_cb


def sdp_solve(problem: SdpProblem, settings: SolverSettings | None = None) -> SdpSolution:
    """Solve with the embedded splitting method.

    Returns the best iterate with residuals; ``status`` is ``optimal`` when
    tolerances are met, ``max-iters`` otherwise, or an infeasibility
    certificate status when one is detected.
    """
    st = settings or SolverSettings()
    t0 = time.perf_counter()
    problem.validate()
    layout = _BlockLayout(problem.blocks)
    c0, A0 = _assemble(problem, layout)
    b0 = problem.b.copy()

    # drop all-zero rows (presolve); remember to re-expand duals
    row_nnz = np.diff(A0.indptr)
    keep = row_nnz > 0
    if not keep.all():
        if np.any(np.abs(b0[~keep]) > 0):
            # 0 = nonzero row: trivially infeasible
            return SdpSolution(
                status="infeasible",
                x_blocks=layout.to_matrices(np.zeros(layout.dim)),
                y=np.zeros(len(b0)),
                primal_obj=np.nan,
                dual_obj=np.nan,
                residuals={"primal": np.inf, "dual": np.inf, "gap": np.inf, "cone": 0.0},
                iterations=0,
                seconds=time.perf_counter() - t0,
            )
        A = A0[keep]
        b = b0[keep]
    else:
        A, b = A0, b0

    # equilibration
    if st.scaling:
        A_s, d_r, d_cb = _ruiz_equilibrate(A.tocsr(), layout.col_block, len(problem.blocks))
        col_scale = d_cb[layout.col_block]
    else:
        A_s = A.tocsr()
        d_r = np.ones(A.shape[0])
        col_scale = np.ones(layout.dim)
    b_s = d_r * b
    c_s = col_scale * c0
    s_b = float(np.linalg.norm(b_s))
    s_b = s_b if s_b > 1e-12 else 1.0
    s_c = float(np.linalg.norm(c_s))
    s_c = s_c if s_c > 1e-12 else 1.0
    b_s = b_s / s_b
    c_s = c_s / s_c

    proj = _AffineProjector(A_s, b_s)

    n = layout.dim
    rho = st.rho
    z = np.zeros(n)
    u = np.zeros(n)
    z_prev = np.zeros(n)
    status = "max-iters"
    iters_done = st.max_iters
    y_scaled = np.zeros(A_s.shape[0])
    norm_b = 1.0 + np.linalg.norm(b0)
    norm_c = 1.0 + np.linalg.norm(c0)

    def unscale_x(vec):
        return (vec * col_scale) * s_b

    def unscale_y(w):
        return (d_r * w) * s_c

    rp = rd = gap = np.inf
    check = max(1, st.check_every)
    for it in range(1, st.max_iters + 1):
        x, w = proj.project(z - u - c_s / rho)
        y_scaled = -rho * w
        x_hat = st.alpha * x + (1.0 - st.alpha) * z
        z_prev, z = z, layout.project_cone(x_hat + u)
        u = u + x_hat - z

        if it % check == 0 or it == st.max_iters:
            x_orig = unscale_x(z)
            y_orig = unscale_y(y_scaled)
            pobj = float(c0 @ x_orig)
            dobj = float(b @ y_orig[: len(b)]) if len(b) == len(y_orig) else float(b @ y_orig)
            rp = float(np.linalg.norm(A @ x_orig - b)) / norm_b
            rd_vec = c0 - (A.T @ y_orig)
            sproj = layout.project_cone(rd_vec)
            rd = float(np.linalg.norm(rd_vec - sproj)) / norm_c
            gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
            tol = st.eps_abs + st.eps_rel
            if st.verbose and (it // check) % 20 == 0:
                print(f"  iter {it:7d}  rp {rp:.3e}  rd {rd:.3e}  gap {gap:.3e}")
            if rp <= tol and rd <= tol and gap <= tol:
                status = "optimal"
                iters_done = it
                break

            if st.detect_infeasibility and it >= 10 * check:
                # normalized certificates from iterate drift
                dy = y_scaled / max(np.linalg.norm(y_scaled), 1e-300)
                aty = A_s.T @ dy
                if (
                    b_s @ dy > INFEAS_CERT_TOL ** 0.5
                    and np.linalg.norm(aty + layout.project_cone(-aty))
                    <= INFEAS_CERT_TOL ** 0.5 * max(1.0, np.linalg.norm(aty))
                    and rp > 1e-4
                    and np.linalg.norm(u) > 1e3
                ):
                    status = "infeasible"
                    iters_done = it
                    break
                dz = z - z_prev
                nz = np.linalg.norm(dz)
                if nz > 1e-300:
                    d = dz / nz
                    if (
                        c_s @ d < -(UNBOUND_CERT_TOL ** 0.5)
                        and np.linalg.norm(A_s @ d) <= UNBOUND_CERT_TOL ** 0.5
                        and np.linalg.norm(d - layout.project_cone(d)) <= UNBOUND_CERT_TOL ** 0.5
                        and abs(c0 @ unscale_x(z)) > 1e6
                    ):
                        status = "unbounded"
                        iters_done = it
                        break

            if (
                st.adaptive_rho
                and it <= st.adapt_until
                and it % (10 * check) == 0
                and rp > 0
                and rd > 0
            ):
                # geometric residual balancing with hysteresis during a
                # burn-in window; late updates restart ADMM transients and
                # can trap degenerate problems in a limit cycle
                factor = float(np.clip(np.sqrt(rp / rd), 0.2, 5.0))
                if factor > 1.5 or factor < 1.0 / 1.5:
                    rho *= factor
                    u /= factor
    else:
        iters_done = st.max_iters

    x_orig = unscale_x(z)
    y_orig = unscale_y(y_scaled)
    # re-expand duals over dropped rows
    if not keep.all():
        full_y = np.zeros(len(b0))
        full_y[keep] = y_orig
        y_orig = full_y
    pobj = float(c0 @ x_orig)
    dobj = float(b0 @ y_orig)
    rp = float(np.linalg.norm(A0 @ x_orig - b0)) / norm_b
    rd_vec = c0 - (A0.T @ y_orig)
    rd = float(np.linalg.norm(rd_vec - layout.project_cone(rd_vec))) / norm_c
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    cone = layout.min_eig(x_orig)
    return SdpSolution(
        status=status,
        x_blocks=layout.to_matrices(x_orig),
        y=y_orig,
        primal_obj=pobj,
        dual_obj=dobj,
        residuals={"primal": rp, "dual": rd, "gap": gap, "cone": cone},
        iterations=iters_done,
        seconds=time.perf_counter() - t0,
    )


# --------------------------------------------------------------------------
# SDPA sparse format
# --------------------------------------------------------------------------

def export_sdpa(problem: SdpProblem) -> bytes:
    """Serialize to sparse SDPA bytes (.dat-s).

    The file stores the standard pair: the objective matrix written as
    ``matno 0`` is the negated cost (F0 = -C), so a stock SDPA solver's
    reported optimum is the negative of this problem's minimum. The
    companion :func:`parse_sdpa` inverts the mapping exactly.
    """
    out = io.StringIO()
    p = problem.num_constraints
    out.write(f"{p}\n")
    out.write(f"{len(problem.blocks)}\n")
    out.write(" ".join(str(s) for s in problem.blocks) + "\n")
    out.write(" ".join(f"{v:.17g}" for v in problem.b) + "\n")

    ob, oi, oj, ov = problem.obj
    obj_items = sorted(
        (int(bb), int(ii), int(jj), -float(vv))
        for bb, ii, jj, vv in zip(ob, oi, oj, ov)
    )
    for bb, ii, jj, vv in obj_items:
        if vv != 0.0:
            out.write(f"0 {bb + 1} {ii + 1} {jj + 1} {vv:.17g}\n")
    er, eb, ei, ej, ev = problem.entries
    items = sorted(
        (int(rr) + 1, int(bb), int(ii), int(jj), float(vv))
        for rr, bb, ii, jj, vv in zip(er, eb, ei, ej, ev)
    )
    for rr, bb, ii, jj, vv in items:
        if vv != 0.0:
            out.write(f"{rr} {bb + 1} {ii + 1} {jj + 1} {vv:.17g}\n")
    return out.getvalue().encode()


def parse_sdpa(data: bytes | str) -> SdpProblem:
    """Parse sparse SDPA bytes produced by :func:`export_sdpa`."""
    text = data.decode() if isinstance(data, bytes) else data
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith(('"', "*"))]
    if len(lines) < 4:
        raise ParseError("truncated SDPA data")
    p = int(lines[0].split()[0])
    nblocks = int(lines[1].split()[0])
    blocks = tuple(int(tok.rstrip(",;")) for tok in lines[2].replace("(", " ").replace(")", " ").split())[:nblocks]
    b = np.array([float(tok.rstrip(",;")) for tok in lines[3].split()][:p])
    builder = SdpBuilder(blocks)
    for _ in range(p):
        builder.new_row(0.0)
    for ln in lines[4:]:
        toks = ln.split()
        if len(toks) != 5:
            raise ParseError(f"bad SDPA entry line: {ln!r}")
        mat, blk, i, j, val = int(toks[0]), int(toks[1]) - 1, int(toks[2]) - 1, int(toks[3]) - 1, float(toks[4])
        if mat == 0:
            builder.add_obj(blk, i, j, -val)
        else:
            builder.add_entry(mat - 1, blk, i, j, val)
    prob = builder.build()
    return SdpProblem(blocks=prob.blocks, obj=prob.obj, entries=prob.entries, b=b)


def write_sdpa(problem: SdpProblem, path: str):
    with open(path, "wb") as fh:
        fh.write(export_sdpa(problem))


def read_sdpa(path: str) -> SdpProblem:
    with open(path, "rb") as fh:
        return parse_sdpa(fh.read())


# --------------------------------------------------------------------------
# External backends (accuracy escape hatch)
# --------------------------------------------------------------------------

def solve_with_backend(
    problem: SdpProblem, backend: str = "embedded", settings: SolverSettings | None = None
) -> SdpSolution:
    """Route a problem to a solver backend.

    ``embedded`` uses :func:`sdp_solve`. ``cvxpy:<solver>`` (for example
    ``cvxpy:CLARABEL`` or ``cvxpy:SCS``) hands the same data to an external
    conic solver for cross-checking; cvxpy must be installed.
    """
    if backend == "embedded":
        return sdp_solve(problem, settings)
    if backend.startswith("cvxpy"):
        solver = backend.split(":", 1)[1] if ":" in backend else "CLARABEL"
        return _solve_cvxpy(problem, solver)
    raise SolverFailure(f"unknown backend {backend!r}")


def _solve_cvxpy(problem: SdpProblem, solver: str) -> SdpSolution:
    import cvxpy as cp

    t0 = time.perf_counter()
    sizes = problem.blocks
    vars_ = []
    offsets = []
    pos = 0
    for s in sizes:
        if s > 0:
            vars_.append(cp.Variable((s, s), symmetric=True))
            offsets.append(pos)
            pos += s * s
        else:
            vars_.append(cp.Variable(-s, nonneg=True))
            offsets.append(pos)
            pos += -s

    # dense-vec coefficient matrices (duplicate off-diagonal entries)
    def vec_cols(blks, iis, jjs, vals):
        cols, vv = [], []
        for bb, ii, jj, val in zip(blks, iis, jjs, vals):
            s = sizes[bb]
            if s > 0:
                cols.append(offsets[bb] + ii * s + jj)
                vv.append(val)
                if ii != jj:
                    cols.append(offsets[bb] + jj * s + ii)
                    vv.append(val)
            else:
                cols.append(offsets[bb] + ii)
                vv.append(val)
        return cols, vv

    ob, oi, oj, ov = problem.obj
    ccols, cvals = vec_cols(ob, oi, oj, ov)
    cvec = np.zeros(pos)
    np.add.at(cvec, ccols, cvals)

    er, eb, ei, ej, ev = problem.entries
    acols, avals = [], []
    arows = []
    for rr, bb, ii, jj, val in zip(er, eb, ei, ej, ev):
        cc, vv = vec_cols([bb], [ii], [jj], [val])
        acols.extend(cc)
        avals.extend(vv)
        arows.extend([rr] * len(cc))
    Afull = sp.csr_matrix(
        (avals, (arows, acols)), shape=(problem.num_constraints, pos)
    )

    zexpr = cp.hstack([cp.vec(v, order="C") if v.ndim == 2 else v for v in vars_])
    constraints = [Afull @ zexpr == problem.b]
    for s, v in zip(sizes, vars_):
        if s > 0:
            constraints.append(v >> 0)
    prob = cp.Problem(cp.Minimize(cvec @ zexpr), constraints)
    prob.solve(solver=solver, verbose=False)
    status_map = {
        "optimal": "optimal",
        "optimal_inaccurate": "optimal",
        "infeasible": "infeasible",
        "infeasible_inaccurate": "infeasible",
        "unbounded": "unbounded",
        "unbounded_inaccurate": "unbounded",
    }
    status = status_map.get(prob.status, "max-iters")
    if status in ("infeasible", "unbounded") or vars_[0].value is None:
        return SdpSolution(
            status=status,
            x_blocks=[np.zeros((abs(s), abs(s))) if s > 0 else np.zeros(-s) for s in sizes],
            y=np.zeros(problem.num_constraints),
            primal_obj=np.nan,
            dual_obj=np.nan,
            residuals={"primal": np.inf, "dual": np.inf, "gap": np.inf, "cone": 0.0},
            iterations=0,
            seconds=time.perf_counter() - t0,
        )
    x_blocks = []
    for s, v in zip(sizes, vars_):
        val = np.asarray(v.value)
        x_blocks.append(0.5 * (val + val.T) if s > 0 else val.ravel())
    y = np.asarray(constraints[0].dual_value).ravel()
    pobj = float(prob.value)
    dobj = float(problem.b @ y) if y.shape == problem.b.shape else pobj
    if abs(dobj - pobj) > 0.5 * (1 + abs(pobj)) and y.shape == problem.b.shape:
        y = -y
        dobj = float(problem.b @ y)
    xflat_layout = _BlockLayout(problem.blocks)
    xflat = xflat_layout.from_matrices(x_blocks)
    c0, A0 = _assemble(problem, xflat_layout)
    rp = float(np.linalg.norm(A0 @ xflat - problem.b)) / (1 + np.linalg.norm(problem.b))
    return SdpSolution(
        status=status,
        x_blocks=x_blocks,
        y=y,
        primal_obj=pobj,
        dual_obj=dobj,
        residuals={
            "primal": rp,
            "dual": np.nan,
            "gap": abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj)),
            "cone": xflat_layout.min_eig(xflat),
        },
        iterations=int(prob.solver_stats.num_iters or 0) if prob.solver_stats else 0,
        seconds=time.perf_counter() - t0,
    )
