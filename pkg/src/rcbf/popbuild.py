"""Reduction of the inner min-max to a single-level polynomial program.

The inner control maximization is replaced by its KKT system (primal and
dual feasibility, stationarity, complementarity) and the worst-case
disturbance by a norm lift ``z^2 = ||L_J b||^2`` whose sign the outer
minimization resolves. The result is a standard polynomial optimization
problem over y = [x; z; u; zeta], either with the parameter fixed
numerically or kept symbolic for synthesis.

Constraint ordering is fixed (lift, boundary, KKT equalities, KKT
inequalities, bound rows, parameter rows) so downstream SDP layouts are
reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .errors import SpaceMismatchError
from .model import (
    BoundSet,
    CbfCandidate,
    ControlSet,
    SystemModel,
    decision_space,
    lie_derivatives,
)
from .polyalg import Polynomial, VariableSpace


@dataclass(frozen=True)
class KktSystem:
    """First-order optimality rows of the inner control maximization.

    ``stationarity`` (one row per input) and ``complementarity`` (one per
    constraint) are equalities; ``primal`` keeps the c_i(u) <= 0
    convention and ``dual`` the zeta_i >= 0 convention.
    """

    stationarity: tuple[Polynomial, ...]
    complementarity: tuple[Polynomial, ...]
    primal: tuple[Polynomial, ...]
    dual: tuple[Polynomial, ...]


def kkt_system(cs: ControlSet, lgb: Sequence[Polynomial], space: VariableSpace) -> KktSystem:
    """KKT rows for max_u L_g b . u over the control set, in ``space``.

    No smoothness of the optimal control is assumed; bang-bang solutions
    are carried implicitly by the complementarity rows.
    """
    if len(lgb) != cs.m:
        raise SpaceMismatchError(f"L_g b row has {len(lgb)} entries, control has {cs.m}")
    cons = cs.constraint_polys(space)
    names = space.names
    usl = space.block_slice("u")
    u_names = names[usl.start : usl.stop]
    zsl = space.block_slice("zeta")
    zeta_vars = [Polynomial.variable(space, names[i]) for i in range(zsl.start, zsl.stop)]

    stationarity = []
    for j, uname in enumerate(u_names):
        row = -lgb[j].embed(space)
        for i, ci in enumerate(cons):
            row = row + zeta_vars[i] * ci.differentiate(uname)
        stationarity.append(row)
    complementarity = [zeta_vars[i] * cons[i] for i in range(len(cons))]
    return KktSystem(
        stationarity=tuple(stationarity),
        complementarity=tuple(complementarity),
        primal=tuple(cons),
        dual=tuple(zeta_vars),
    )


@dataclass(frozen=True)
class StandardPop:
    """min objective s.t. equalities = 0, inequalities >= 0.

    ``mode`` is ``fixed`` (parameter substituted numerically; variables
    are y only) or ``symbolic`` (parameter block kept, with its membership
    rows appended to the inequalities).
    """

    objective: Polynomial
    equalities: tuple[Polynomial, ...]
    eq_labels: tuple[str, ...]
    inequalities: tuple[Polynomial, ...]
    ineq_labels: tuple[str, ...]
    space: VariableSpace
    mode: str
    theta: tuple[float, ...] | None = None

    @property
    def t_max(self) -> int:
        """Maximum degree with the parameter counted as a variable."""
        degs = [self.objective.degree()]
        degs += [p.degree() for p in self.equalities]
        degs += [p.degree() for p in self.inequalities]
        return max(degs)

    def degree_in_y(self) -> int:
        """Maximum degree counting only the decision block y."""
        try:
            tsl = self.space.block_slice("t")
            y_idx = [i for i in range(self.space.nvars) if not (tsl.start <= i < tsl.stop)]
        except SpaceMismatchError:
            y_idx = list(range(self.space.nvars))
        degs = [self.objective.degree_in(y_idx)]
        degs += [p.degree_in(y_idx) for p in self.equalities]
        degs += [p.degree_in(y_idx) for p in self.inequalities]
        return max(degs)

    def feasibility_violation(self, assignment, skip_labels: tuple[str, ...] = ()) -> float:
        """Worst constraint violation at a point (0 means feasible)."""
        worst = 0.0
        for p, lab in zip(self.equalities, self.eq_labels):
            if lab in skip_labels:
                continue
            worst = max(worst, abs(p.evaluate(assignment)))
        for p, lab in zip(self.inequalities, self.ineq_labels):
            if lab in skip_labels:
                continue
            worst = max(worst, -min(0.0, p.evaluate(assignment)))
        return worst


def build_verification_pop(
    model: SystemModel,
    cbf: CbfCandidate,
    theta: Sequence[float] | None,
    bounds: BoundSet,
    include_dual_bound: bool = True,
    include_ball: bool = False,
) -> StandardPop:
    """Assemble the single-level program; ``theta=None`` keeps it symbolic.

    The fixed-parameter form is obtained by substituting into the symbolic
    form, so the two modes agree coefficient-exactly by construction.
    """
    k = cbf.k
    space = decision_space(model.n, model.has_disturbance, model.m, model.control.l_u, k)
    lds = lie_derivatives(model, cbf)

    names = space.names
    usl = space.block_slice("u")
    u_vars = [Polynomial.variable(space, names[i]) for i in range(usl.start, usl.stop)]

    objective = lds.lf.embed(space)
    for j in range(model.m):
        objective = objective + lds.lg[j].embed(space) * u_vars[j]

    equalities: list[Polynomial] = []
    eq_labels: list[str] = []
    if model.has_disturbance:
        zname = names[space.block_slice("z").start]
        zvar = Polynomial.variable(space, zname)
        objective = objective - zvar * model.m_eps
        norm2 = Polynomial.zero(space)
        for p in lds.lj:
            pe = p.embed(space)
            norm2 = norm2 + pe * pe
        equalities.append(zvar * zvar - norm2)
        eq_labels.append("lift")
    equalities.append(cbf.b.embed(space))
    eq_labels.append("boundary")

    kkt = kkt_system(model.control, [p.embed(space) for p in lds.lg], space)
    equalities.extend(kkt.stationarity)
    eq_labels.extend(["stationarity"] * len(kkt.stationarity))
    equalities.extend(kkt.complementarity)
    eq_labels.extend(["complementarity"] * len(kkt.complementarity))

    inequalities: list[Polynomial] = []
    ineq_labels: list[str] = []
    inequalities.extend(-c for c in kkt.primal)
    ineq_labels.extend(["control"] * len(kkt.primal))
    inequalities.extend(kkt.dual)
    ineq_labels.extend(["dualfeas"] * len(kkt.dual))

    for row, lab in zip(bounds.rows, bounds.labels):
        if lab == "dual" and not include_dual_bound:
            continue
        inequalities.append(row.embed(space))
        ineq_labels.append(f"bound:{lab}")
    if include_ball and bounds.ball_row is not None:
        inequalities.append(bounds.ball_row.embed(space))
        ineq_labels.append("bound:ball")

    for i, row in enumerate(cbf.theta_set.constraint_polys(space)):
        inequalities.append(row)
        ineq_labels.append("theta")

    pop = StandardPop(
        objective=objective,
        equalities=tuple(equalities),
        eq_labels=tuple(eq_labels),
        inequalities=tuple(inequalities),
        ineq_labels=tuple(ineq_labels),
        space=space,
        mode="symbolic",
        theta=None,
    )
    if theta is None:
        return pop
    return fix_theta(pop, theta)


def fix_theta(pop: StandardPop, theta: Sequence[float]) -> StandardPop:
    """Substitute the parameter numerically; parameter rows are dropped."""
    if pop.mode != "symbolic":
        raise SpaceMismatchError("parameter already fixed")
    space = pop.space
    tsl = space.block_slice("t")
    tnames = space.names[tsl.start : tsl.stop]
    theta = [float(v) for v in theta]
    if len(theta) != len(tnames):
        raise SpaceMismatchError(f"expected {len(tnames)} parameter values, got {len(theta)}")
    bind = dict(zip(tnames, theta))
    yspace = VariableSpace(tuple(b for b in space.blocks if b[0] != "t"))

    def fix(p: Polynomial) -> Polynomial:
        return p.substitute(bind).project(yspace)

    eqs, eq_labs, ineqs, ineq_labs = [], [], [], []
    for p, lab in zip(pop.equalities, pop.eq_labels):
        eqs.append(fix(p))
        eq_labs.append(lab)
    for p, lab in zip(pop.inequalities, pop.ineq_labels):
        if lab == "theta":
            continue
        ineqs.append(fix(p))
        ineq_labs.append(lab)
    return StandardPop(
        objective=fix(pop.objective),
        equalities=tuple(eqs),
        eq_labels=tuple(eq_labs),
        inequalities=tuple(ineqs),
        ineq_labels=tuple(ineq_labs),
        space=yspace,
        mode="fixed",
        theta=tuple(theta),
    )


def dump_pop(pop: StandardPop) -> str:
    """Structured text dump (objective and labeled constraint lists)."""
    lines = [f"mode: {pop.mode}"]
    if pop.theta is not None:
        lines.append("theta: " + " ".join(f"{v!r}" for v in pop.theta))
    lines.append(f"variables: {' '.join(pop.space.names)}")
    lines.append(f"minimize: {pop.objective.to_text()}")
    for p, lab in zip(pop.equalities, pop.eq_labels):
        lines.append(f"eq[{lab}]: {p.to_text()} = 0")
    for p, lab in zip(pop.inequalities, pop.ineq_labels):
        lines.append(f"ineq[{lab}]: {p.to_text()} >= 0")
    return "\n".join(lines) + "\n"


def write_pop(pop: StandardPop, path: str):
    with open(path, "w") as fh:
        fh.write(dump_pop(pop))
