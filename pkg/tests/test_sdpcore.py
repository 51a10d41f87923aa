import numpy as np
import pytest

from rcbf.sdpcore import (
    SdpBuilder,
    SdpProblem,
    SolverSettings,
    export_sdpa,
    parse_sdpa,
    read_sdpa,
    sdp_solve,
    solve_with_backend,
    write_sdpa,
)


def analytic_problem():
    # min X11 s.t. X11 + X22 = 1, X psd: optimum 0 at diag(0, 1)
    b = SdpBuilder([2])
    b.add_obj(0, 0, 0, 1.0)
    r = b.new_row(1.0)
    b.add_entry(r, 0, 0, 0, 1.0)
    b.add_entry(r, 0, 1, 1, 1.0)
    return b.build()


def random_feasible(rng, nblk=2, size=4, p=6):
    """Random SDP assembled from a known complementary primal-dual pair."""
    blocks = [size] * nblk
    b = SdpBuilder(blocks)
    Xs, Ss = [], []
    for _ in range(nblk):
        Q = np.linalg.qr(rng.normal(size=(size, size)))[0]
        d = np.concatenate([rng.uniform(0.5, 2, size // 2), np.zeros(size - size // 2)])
        Xs.append((Q * d) @ Q.T)
        ds = np.concatenate([np.zeros(size // 2), rng.uniform(0.5, 2, size - size // 2)])
        Ss.append((Q * ds) @ Q.T)
    A_mats = [
        [0.5 * (M + M.T) for M in [rng.normal(size=(size, size)) for _ in range(nblk)]]
        for _ in range(p)
    ]
    ystar = rng.normal(size=p)
    Cs = [Ss[k] + sum(ystar[j] * A_mats[j][k] for j in range(p)) for k in range(nblk)]
    bvec = [sum(np.tensordot(A_mats[j][k], Xs[k]) for k in range(nblk)) for j in range(p)]
    for k in range(nblk):
        for i in range(size):
            for jj in range(i, size):
                b.add_obj(k, i, jj, Cs[k][i, jj])
    for j in range(p):
        r = b.new_row(bvec[j])
        for k in range(nblk):
            for i in range(size):
                for jj in range(i, size):
                    b.add_entry(r, k, i, jj, A_mats[j][k][i, jj])
    pstar = sum(np.tensordot(Cs[k], Xs[k]) for k in range(nblk))
    return b.build(), pstar


class TestAnalyticCases:
    def test_min_corner_entry(self):
        sol = sdp_solve(analytic_problem(), SolverSettings(max_iters=10000))
        assert sol.status == "optimal"
        assert sol.primal_obj == pytest.approx(0.0, abs=1e-7)
        assert sol.x_blocks[0][1, 1] == pytest.approx(1.0, abs=1e-6)

    def test_min_trace_with_fixed_entry(self):
        b = SdpBuilder([2])
        b.add_obj(0, 0, 0, 1.0)
        b.add_obj(0, 1, 1, 1.0)
        r = b.new_row(1.0)
        b.add_entry(r, 0, 0, 0, 1.0)
        sol = sdp_solve(b.build(), SolverSettings(max_iters=10000))
        assert sol.primal_obj == pytest.approx(1.0, abs=1e-7)

    def test_infeasible_diagonal_sign(self):
        b = SdpBuilder([2])
        b.add_obj(0, 0, 0, 1.0)
        r = b.new_row(-1.0)
        b.add_entry(r, 0, 0, 0, 1.0)
        sol = sdp_solve(b.build(), SolverSettings(max_iters=50000))
        assert sol.status == "infeasible"

    def test_diagonal_block_lp(self):
        # min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0 -> 1 at (1, 0)
        b = SdpBuilder([-2])
        b.add_obj(0, 0, 0, 1.0)
        b.add_obj(0, 1, 1, 2.0)
        r = b.new_row(1.0)
        b.add_entry(r, 0, 0, 0, 1.0)
        b.add_entry(r, 0, 1, 1, 1.0)
        sol = sdp_solve(b.build(), SolverSettings(max_iters=10000))
        assert sol.primal_obj == pytest.approx(1.0, abs=1e-7)
        assert sol.x_blocks[0][0] == pytest.approx(1.0, abs=1e-6)


class TestKktOnRandoms:
    def test_fifty_random_feasible_instances(self):
        worst_kkt = 0.0
        worst_err = 0.0
        for trial in range(50):
            prob, pstar = random_feasible(np.random.default_rng(trial))
            sol = sdp_solve(prob, SolverSettings(max_iters=60000))
            worst_err = max(worst_err, abs(sol.primal_obj - pstar) / (1 + abs(pstar)))
            worst_kkt = max(
                worst_kkt,
                sol.residuals["primal"],
                sol.residuals["dual"],
                sol.residuals["gap"],
            )
        assert worst_kkt <= 1e-6
        assert worst_err <= 1e-5

    def test_cone_membership(self):
        for trial in range(5):
            prob, _ = random_feasible(np.random.default_rng(100 + trial))
            sol = sdp_solve(prob, SolverSettings(max_iters=60000))
            assert sol.residuals["cone"] >= -10 * 1e-8


class TestDeterminism:
    def test_bitwise_identical_runs(self):
        prob, _ = random_feasible(np.random.default_rng(3))
        s1 = sdp_solve(prob, SolverSettings(max_iters=2000))
        s2 = sdp_solve(prob, SolverSettings(max_iters=2000))
        assert all(np.array_equal(a, b) for a, b in zip(s1.x_blocks, s2.x_blocks))
        assert np.array_equal(s1.y, s2.y)
        assert s1.primal_obj == s2.primal_obj

    def test_env_iteration_cap(self, monkeypatch):
        monkeypatch.setenv("RCBF_SDP_MAXITERS", "123")
        assert SolverSettings.from_env().max_iters == 123
        assert SolverSettings.for_moment().max_iters == 123
        monkeypatch.delenv("RCBF_SDP_MAXITERS")
        assert SolverSettings.from_env(max_iters=77).max_iters == 77


class TestSdpaFormat:
    def test_single_constraint_file_shape(self):
        # feasibility problem with one constraint on a 2x2 block: the file
        # is exactly five lines (four header lines plus one entry)
        b = SdpBuilder([2])
        r = b.new_row(1.0)
        b.add_entry(r, 0, 0, 0, 1.0)
        data = export_sdpa(b.build()).decode()
        lines = data.strip().splitlines()
        assert lines[0] == "1"
        assert lines[1] == "1"
        assert lines[2] == "2"
        assert len(lines) == 5

    def test_round_trip_byte_identity(self):
        prob, _ = random_feasible(np.random.default_rng(17))
        data = export_sdpa(prob)
        again = export_sdpa(parse_sdpa(data))
        assert data == again

    def test_round_trip_preserves_solution(self, tmp_path):
        prob, pstar = random_feasible(np.random.default_rng(23))
        path = tmp_path / "prob.dat-s"
        write_sdpa(prob, str(path))
        back = read_sdpa(str(path))
        sol = sdp_solve(back, SolverSettings(max_iters=60000))
        assert sol.primal_obj == pytest.approx(pstar, rel=1e-5, abs=1e-6)

    def test_mixed_blocks_round_trip(self):
        b = SdpBuilder([2, -3])
        b.add_obj(0, 0, 1, 0.5)
        b.add_obj(1, 2, 2, -1.0)
        r = b.new_row(2.0)
        b.add_entry(r, 0, 0, 0, 1.0)
        b.add_entry(r, 1, 0, 0, 1.0)
        data = export_sdpa(b.build())
        assert export_sdpa(parse_sdpa(data)) == data


class TestExternalBackend:
    def test_cross_check_against_conic_solver(self):
        pytest.importorskip("cvxpy")
        prob, pstar = random_feasible(np.random.default_rng(41))
        ours = sdp_solve(prob, SolverSettings(max_iters=60000))
        ext = solve_with_backend(prob, "cvxpy:CLARABEL")
        assert ext.status == "optimal"
        assert ours.primal_obj == pytest.approx(ext.primal_obj, rel=1e-5, abs=1e-6)
        assert ext.primal_obj == pytest.approx(pstar, rel=1e-6, abs=1e-7)

    def test_unknown_backend_rejected(self):
        from rcbf.errors import SolverFailure

        with pytest.raises(SolverFailure):
            solve_with_backend(analytic_problem(), "nope")
