import math

import numpy as np
import pytest

from rcbf.errors import UnsupportedKindError
from rcbf.model import (
    CbfCandidate,
    ControlSet,
    SystemModel,
    ThetaSet,
    boundary_points,
    cbf_space,
    circular_cbf,
    complete_point,
    dual_bound,
    elliptical_cbf,
    inner_argmax_control,
    inner_closed_form,
    lie_derivatives,
    poly_range_on_box,
    state_space,
    value_grid_oracle,
    vanderpol_model,
    variable_bounds,
)
from rcbf.polyalg import Polynomial, parse_polynomial


@pytest.fixture(scope="module")
def clean():
    return vanderpol_model()


@pytest.fixture(scope="module")
def uncertain():
    return vanderpol_model(m_eps=0.1)


@pytest.fixture(scope="module")
def circ():
    return circular_cbf()


@pytest.fixture(scope="module")
def ell():
    return elliptical_cbf(0.25, 0.75, 0.6)


class TestLieDerivatives:
    def test_clean_circular_closed_forms(self, clean, circ):
        lds = lie_derivatives(clean, circ)
        sp = circ.b.space
        x2 = Polynomial.variable(sp, "x2")
        x1 = Polynomial.variable(sp, "x1")
        assert lds.lf == -x2 * x2 * (1 - x2 * x2)
        assert lds.lg[0] == x1 * x2 * (-2.0)
        assert lds.lj is None

    def test_uncertain_disturbance_row(self, uncertain, circ):
        lds = lie_derivatives(uncertain, circ)
        x2 = Polynomial.variable(circ.b.space, "x2")
        assert lds.lj[0] == x2 * (-2.0)

    def test_constant_candidate_gives_zeros(self, clean):
        sp = cbf_space(2, 1)
        cbf = CbfCandidate(
            b=Polynomial.constant(sp, 7.0),
            theta_set=ThetaSet(kind="interval", lower=0.0, upper=1.0),
        )
        lds = lie_derivatives(clean, cbf)
        assert lds.lf.is_zero and all(p.is_zero for p in lds.lg)

    def test_linearity(self, clean):
        sp = cbf_space(2, 1)
        rng = np.random.default_rng(7)
        ts = ThetaSet(kind="interval", lower=0.0, upper=1.0)

        def rand_b():
            coeffs = {}
            for _ in range(6):
                e = tuple(int(v) for v in rng.integers(0, 3, size=3))
                coeffs[e] = float(rng.uniform(-2, 2))
            return Polynomial(sp, coeffs)

        for _ in range(10):
            b1, b2 = rand_b(), rand_b()
            l1 = lie_derivatives(clean, CbfCandidate(b=b1, theta_set=ts))
            l2 = lie_derivatives(clean, CbfCandidate(b=b2, theta_set=ts))
            l12 = lie_derivatives(clean, CbfCandidate(b=b1 + b2, theta_set=ts))
            assert (l12.lf - (l1.lf + l2.lf)).is_zero
            assert all(
                (a - (b + c)).is_zero for a, b, c in zip(l12.lg, l1.lg, l2.lg)
            )


class TestDualBound:
    def test_box_vdp_constant(self, clean):
        # sup |L_g b| <= theta_max = 2 on the feasible set, halfwidth 5
        assert dual_bound(clean.control, 2.0) == pytest.approx(0.2)

    def test_unit_ellipsoid(self):
        cs = ControlSet(kind="ellipsoid", m=2, W=((1.0, 0.0), (0.0, 1.0)))
        assert dual_bound(cs, 2.0) == pytest.approx(1.0)

    def test_zero_gradient_forces_zero_dual(self, clean):
        assert dual_bound(clean.control, 0.0) == 0.0

    def test_polytope_active_set(self):
        cs = ControlSet(
            kind="polytope",
            m=2,
            W=((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)),
            d=(-1.0, -1.0, -1.0, -1.0),
        )
        # unit-box polytope: every active-set Gram has lambda_min = 1
        assert dual_bound(cs, 3.0) == pytest.approx(3.0)

    def test_general_kind_rejected(self):
        cs = ControlSet(kind="general", m=1, general_polys=("u^4 - 1",))
        with pytest.raises(UnsupportedKindError):
            dual_bound(cs, 1.0)


class TestVariableBounds:
    def test_circular_rows(self, clean, circ):
        bs = variable_bounds(clean, circ)
        assert "state" in bs.labels and "dual" in bs.labels
        assert bs.var_radius["u"] == 5.0
        assert bs.var_radius["zeta"] == pytest.approx(0.2)
        assert bs.var_radius["x1"] == pytest.approx(math.sqrt(2.0))

    def test_elliptical_closed_forms_at_reference_theta(self, uncertain, ell):
        bs = variable_bounds(uncertain, ell)
        theta = [0.25, 0.25, 0.15]
        # x bound saturates at ||x||^2 = 12.5, z at z^2 = 2, zeta at 0.25
        state = next(r for r, l in zip(bs.rows, bs.labels) if l == "state")
        lift = next(r for r, l in zip(bs.rows, bs.labels) if l == "lift")
        dual = next(r for r, l in zip(bs.rows, bs.labels) if l == "dual")
        r = math.sqrt(12.5)
        pt = {"x": [r, 0.0], "z": [math.sqrt(2.0)], "u": [0.0], "zeta": [0.5], "t": theta}
        assert state.evaluate(pt) == pytest.approx(0.0, abs=1e-9)
        assert lift.evaluate(pt) == pytest.approx(0.0, abs=1e-9)
        assert dual.evaluate(pt) == pytest.approx(0.0, abs=1e-9)

    def test_bound_validity_on_samples(self, uncertain, ell):
        lds = lie_derivatives(uncertain, ell)
        bs = variable_bounds(uncertain, ell)
        rng = np.random.default_rng(11)
        w = uncertain.control.halfwidths[0]

        def sampler(i):
            while True:
                th = [
                    rng.uniform(0.25, 0.75),
                    rng.uniform(0.25, 0.75),
                    rng.uniform(-0.45, 0.45),
                ]
                if ell.theta_set.contains(th):
                    break
            phi = rng.uniform(0, 2 * np.pi)
            x = boundary_points(ell, th, 720)[int(phi / (2 * np.pi) * 720)]
            point = {"x": list(x), "t": th}
            gv = np.array([p.evaluate(point) for p in lds.lg])
            u, zeta, _ = inner_argmax_control(uncertain, gv)
            jv = np.array([p.evaluate(point) for p in lds.lj])
            return {
                "x": list(x),
                "z": [float(np.linalg.norm(jv))],
                "u": list(u),
                "zeta": list(zeta),
                "t": th,
            }

        worst = bs.validate_by_sampling(sampler, count=1000)
        assert worst >= -1e-9

    def test_unknown_family_needs_overrides(self, clean):
        sp = cbf_space(2, 1)
        b = parse_polynomial("t - x1^4 - x2^4", sp)
        cbf = CbfCandidate(b=b, theta_set=ThetaSet(kind="interval", lower=0.0, upper=1.0))
        assert cbf.family == "general"
        with pytest.raises(UnsupportedKindError):
            variable_bounds(clean, cbf)


class TestInnerClosedForm:
    def test_reported_minimum_low_theta(self, clean, circ):
        val = inner_closed_form(clean, circ, [0.0, math.sqrt(0.1)], [0.1])
        assert val == pytest.approx(-0.09, abs=1e-12)

    def test_reported_minimum_high_theta(self, clean, circ):
        val = inner_closed_form(clean, circ, [math.sqrt(1.1), 0.0], [1.1])
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_uncertain_circular_zero_on_axis(self, uncertain, circ):
        for theta in (0.2, 0.7, 1.3):
            val = inner_closed_form(uncertain, circ, [math.sqrt(theta), 0.0], [theta])
            assert val == pytest.approx(0.0, abs=1e-12)

    def test_oracle_consistency_random_boundary(self, clean, circ):
        lds = lie_derivatives(clean, circ)
        rng = np.random.default_rng(3)
        for _ in range(200):
            theta = rng.uniform(0.05, 2.0)
            phi = rng.uniform(0, 2 * np.pi)
            x = [math.sqrt(theta) * math.cos(phi), math.sqrt(theta) * math.sin(phi)]
            point = {"x": x, "t": [theta]}
            expected = lds.lf.evaluate(point) + 5.0 * abs(lds.lg[0].evaluate(point))
            assert inner_closed_form(clean, circ, x, [theta]) == pytest.approx(
                expected, abs=1e-12
            )


class TestGridOracle:
    def test_clean_values_and_minimizers(self, clean, circ):
        v, xm = value_grid_oracle(clean, circ, [0.1])
        assert v == pytest.approx(-0.09, abs=1e-6)
        assert abs(xm[0]) < 1e-3 and abs(abs(xm[1]) - 0.3162) < 1e-3
        v, xm = value_grid_oracle(clean, circ, [1.1])
        assert v == pytest.approx(0.0, abs=1e-6)
        assert abs(abs(xm[0]) - 1.0488) < 1e-3 and abs(xm[1]) < 1e-3

    def test_closed_form_matches_grid_min(self, clean, circ):
        # V(theta) = min(0, theta^2 - theta) for the clean circular family
        for theta in (0.1, 0.35, 0.8, 1.0, 1.6):
            v, _ = value_grid_oracle(clean, circ, [theta], npoints=20000)
            assert v == pytest.approx(min(0.0, theta**2 - theta), abs=5e-6)

    def test_uncertain_circular_never_positive(self, uncertain, circ):
        for theta in (0.1, 0.5, 1.0, 1.5, 2.0):
            v, _ = value_grid_oracle(uncertain, circ, [theta])
            assert v <= 1e-9


class TestCompletion:
    def test_complete_point_satisfies_kkt(self, uncertain, circ):
        x = [0.3, math.sqrt(0.5 - 0.09)]
        full = complete_point(uncertain, circ, x, [0.5])
        assert set(full) == {"x", "z", "u", "zeta"}
        # stationarity: -L_g b + 2 zeta u = 0
        lds = lie_derivatives(uncertain, circ)
        g = lds.lg[0].evaluate({"x": x, "t": [0.5]})
        assert -g + 2 * full["zeta"][0] * full["u"][0] == pytest.approx(0.0, abs=1e-12)

    def test_zero_gradient_interior_completion(self, clean, circ):
        full = complete_point(clean, circ, [math.sqrt(1.1), 0.0], [1.1])
        assert full["u"][0] == 0.0 and full["zeta"][0] == 0.0


class TestIntervalArithmetic:
    def test_range_even_power(self):
        sp = state_space(1)
        p = parse_polynomial("x^2", sp)
        lo, hi = poly_range_on_box(p, {"x": (-2.0, 3.0)})
        assert lo == 0.0 and hi == 9.0

    def test_range_affine(self):
        sp = state_space(2)
        p = parse_polynomial("2*x1 - x2 + 1", sp)
        lo, hi = poly_range_on_box(p, {"x1": (-1.0, 1.0), "x2": (0.0, 2.0)})
        assert lo == -3.0 and hi == 3.0
