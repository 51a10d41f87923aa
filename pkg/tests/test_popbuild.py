import math

import numpy as np
import pytest

from rcbf.model import (
    CbfCandidate,
    ControlSet,
    ThetaSet,
    cbf_space,
    circular_cbf,
    complete_point,
    decision_space,
    elliptical_cbf,
    inner_argmax_control,
    inner_closed_form,
    lie_derivatives,
    vanderpol_model,
    variable_bounds,
)
from rcbf.polyalg import Polynomial, parse_polynomial
from rcbf.popbuild import build_verification_pop, dump_pop, fix_theta, kkt_system


@pytest.fixture(scope="module")
def clean():
    return vanderpol_model()


@pytest.fixture(scope="module")
def uncertain():
    return vanderpol_model(m_eps=0.1)


class TestKktSystem:
    def test_box_vdp_rows(self, clean):
        space = decision_space(2, False, 1, 1, 1)
        lgb = [parse_polynomial("-2*x1*x2", space)]
        kkt = kkt_system(clean.control, lgb, space)
        assert kkt.stationarity[0] == parse_polynomial("2*x1*x2 + 2*zeta*u", space)
        assert kkt.complementarity[0] == parse_polynomial("zeta*u^2 - 25*zeta", space)
        assert kkt.primal[0] == parse_polynomial("u^2 - 25", space)
        assert kkt.dual[0] == parse_polynomial("zeta", space)

    def test_zero_gradient_row(self, clean):
        space = decision_space(2, False, 1, 1, 1)
        kkt = kkt_system(clean.control, [Polynomial.zero(space)], space)
        # zeta = 0 with interior u satisfies stationarity
        val = kkt.stationarity[0].evaluate({"x": [1, 1], "u": 0.3, "zeta": 0.0, "t": 0})
        assert val == 0.0

    def test_ellipsoid_stationarity(self):
        cs = ControlSet(kind="ellipsoid", m=2, W=((1.0, 0.0), (0.0, 1.0)))
        space = decision_space(2, False, 2, 1, 1)
        lgb = [Polynomial.constant(space, 1.0), Polynomial.zero(space)]
        kkt = kkt_system(cs, lgb, space)
        assert kkt.stationarity[0] == parse_polynomial("-1 + 2*zeta*u1", space)
        assert kkt.stationarity[1] == parse_polynomial("2*zeta*u2", space)

    def test_counts(self):
        cs = ControlSet(
            kind="polytope", m=2,
            W=((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)),
            d=(-1.0,) * 4,
        )
        space = decision_space(2, False, 2, 4, 1)
        lgb = [Polynomial.zero(space)] * 2
        kkt = kkt_system(cs, lgb, space)
        assert len(kkt.stationarity) == 2
        assert len(kkt.complementarity) == 4
        assert len(kkt.primal) == 4 and len(kkt.dual) == 4


class TestBuildPop:
    def test_clean_fixed_structure(self, clean):
        cbf = circular_cbf()
        bounds = variable_bounds(clean, cbf)
        pop = build_verification_pop(clean, cbf, [0.1], bounds)
        assert pop.mode == "fixed"
        assert pop.space.names == ("x1", "x2", "u", "zeta")
        assert "lift" not in pop.eq_labels
        assert pop.eq_labels[0] == "boundary"
        boundary = pop.equalities[0]
        assert boundary == parse_polynomial("0.1 - x1^2 - x2^2", pop.space)
        assert pop.t_max == 4

    def test_uncertain_symbolic_structure(self, uncertain):
        cbf = elliptical_cbf(0.25, 0.75, 0.6)
        bounds = variable_bounds(uncertain, cbf)
        pop = build_verification_pop(uncertain, cbf, None, bounds)
        assert pop.mode == "symbolic"
        assert "z" in pop.space.names
        assert pop.eq_labels[0] == "lift"
        coupling = [
            p for p, l in zip(pop.inequalities, pop.ineq_labels) if l == "theta"
        ]
        target = parse_polynomial("0.36*t1*t2 - t3^2", pop.space)
        assert any((p - target).is_zero for p in coupling)

    def test_no_disturbance_drops_lift_block(self, clean):
        cbf = circular_cbf()
        bounds = variable_bounds(clean, cbf)
        pop = build_verification_pop(clean, cbf, None, bounds)
        assert "z" not in pop.space.names
        assert all(l != "lift" for l in pop.eq_labels)

    def test_constraint_order_is_fixed(self, uncertain):
        cbf = elliptical_cbf(0.25, 0.75, 0.6)
        bounds = variable_bounds(uncertain, cbf)
        pop = build_verification_pop(uncertain, cbf, None, bounds)
        assert list(pop.eq_labels) == ["lift", "boundary", "stationarity", "complementarity"]
        assert list(pop.ineq_labels[:2]) == ["control", "dualfeas"]
        assert [l for l in pop.ineq_labels if l.startswith("bound:")] == [
            "bound:state", "bound:lift", "bound:dual",
        ]
        assert pop.ineq_labels[-1] == "theta"

    def test_dual_bound_toggle(self, clean):
        cbf = circular_cbf()
        bounds = variable_bounds(clean, cbf)
        pop = build_verification_pop(clean, cbf, None, bounds, include_dual_bound=False)
        assert all(l != "bound:dual" for l in pop.ineq_labels)

    def test_dump_contains_labels(self, clean):
        cbf = circular_cbf()
        bounds = variable_bounds(clean, cbf)
        pop = build_verification_pop(clean, cbf, [0.3], bounds)
        text = dump_pop(pop)
        assert "eq[boundary]" in text and "ineq[control]" in text


class TestPopSemantics:
    def test_feasibility_witness_high_theta(self, clean):
        cbf = circular_cbf()
        bounds = variable_bounds(clean, cbf)
        pop = build_verification_pop(clean, cbf, [1.1], bounds)
        pt = {"x1": math.sqrt(1.1), "x2": 0.0, "u": 3.0, "zeta": 0.0}
        assert pop.feasibility_violation(pt) <= 1e-9

    def test_kkt_soundness_on_samples(self, clean):
        cbf = circular_cbf()
        lds = lie_derivatives(clean, cbf)
        bounds = variable_bounds(clean, cbf)
        pop_sym = build_verification_pop(clean, cbf, None, bounds)
        rng = np.random.default_rng(5)
        for _ in range(100):
            theta = rng.uniform(0.05, 2.0)
            phi = rng.uniform(0, 2 * np.pi)
            x = [math.sqrt(theta) * math.cos(phi), math.sqrt(theta) * math.sin(phi)]
            gv = np.array([p.evaluate({"x": x, "t": [theta]}) for p in lds.lg])
            u, zeta, _ = inner_argmax_control(clean, gv)
            pop = fix_theta(pop_sym, [theta])
            pt = {"x1": x[0], "x2": x[1], "u": float(u[0]), "zeta": float(zeta[0])}
            assert pop.feasibility_violation(pt) <= 1e-9

    def test_objective_matches_inner_value(self, uncertain):
        cbf = circular_cbf()
        bounds = variable_bounds(uncertain, cbf)
        pop_sym = build_verification_pop(uncertain, cbf, None, bounds)
        rng = np.random.default_rng(9)
        for _ in range(50):
            theta = rng.uniform(0.05, 2.0)
            phi = rng.uniform(0, 2 * np.pi)
            x = [math.sqrt(theta) * math.cos(phi), math.sqrt(theta) * math.sin(phi)]
            full = complete_point(uncertain, cbf, x, [theta])
            pop = fix_theta(pop_sym, [theta])
            flat = {
                "x1": full["x"][0],
                "x2": full["x"][1],
                "z": full["z"][0],
                "u": full["u"][0],
                "zeta": full["zeta"][0],
            }
            assert pop.feasibility_violation(flat) <= 1e-9
            obj = pop.objective.evaluate(flat)
            assert obj == pytest.approx(
                inner_closed_form(uncertain, cbf, x, [theta]), abs=1e-9
            )

    def test_mode_consistency(self, uncertain):
        cbf = elliptical_cbf(0.25, 0.75, 0.6)
        bounds = variable_bounds(uncertain, cbf)
        pop_sym = build_verification_pop(uncertain, cbf, None, bounds)
        theta = [0.4, 0.5, 0.1]
        via_fix = fix_theta(pop_sym, theta)
        direct = build_verification_pop(uncertain, cbf, theta, bounds)
        assert via_fix.objective == direct.objective
        assert via_fix.equalities == direct.equalities
        assert via_fix.inequalities == direct.inequalities
        # manual substitution agrees coefficient-exactly, row by row
        tnames = ("t1", "t2", "t3")
        bind = dict(zip(tnames, theta))
        for p_sym, p_fix in zip(pop_sym.equalities, via_fix.equalities):
            assert p_sym.substitute(bind).project(via_fix.space) == p_fix
