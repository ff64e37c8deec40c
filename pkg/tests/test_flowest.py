import numpy as np
import pytest
import scipy.sparse as sp

import qp_oracles
from mesocal.flowest import (ADMMSettings, FlowProblem, build_qp, estimate_all_tods,
                             evaluate_objective, recover_flows, round_path_flows,
                             solve_admm, solve_flow_problem)
from mesocal.netmodel import IncidenceSet


def incidence_from_dense(phi, omega, lengths=None):
    phi = np.asarray(phi, float)
    omega = np.asarray(omega, float)
    n, m = phi.shape
    e = omega.shape[0]
    if lengths is None:
        lengths = np.ones(e) * 100.0
    psi = (omega * np.asarray(lengths)[:, None]).T
    return IncidenceSet(
        phi=sp.csr_matrix(phi), omega=sp.csr_matrix(omega), psi_len=sp.csr_matrix(psi),
        od_pairs=tuple((i, i + 100) for i in range(n)),
        path_ids=tuple(f"p{j}" for j in range(m)),
        link_ids=tuple(f"e{k}" for k in range(e)),
    )


def tiny_problem(gamma=1.0, rho=1.0):
    """One OD pair, two single-link paths, one measured link with prior 6,
    total-trips prior 10 and generous bounds."""
    inc = incidence_from_dense([[1, 1]], [[1, 0], [0, 1]])
    return FlowProblem(
        incidence=inc,
        G=sp.csr_matrix(np.array([[0.5], [0.5]])),
        weight_diag=np.array([1.0, 0.0]),
        x_tilde=10.0,
        z_tilde=np.array([6.0, 0.0]),
        gamma=gamma, rho=rho,
        alpha=np.array([20.0]),
        beta=np.array([20.0, 20.0]),
        capacity=np.array([20.0, 20.0]),
    )


TINY_Y_STAR = np.array([38.0 / 7.0, 34.0 / 7.0])
TINY_OBJ_STAR = 4.0 / 7.0


class TestOracles:
    """The test oracles must agree with each other before they judge the
    package solver."""

    def test_enumeration_on_tiny(self):
        qp = build_qp(tiny_problem())
        x, obj = qp_oracles.kkt_enumeration_qp(qp.P, qp.q, qp.A, qp.l, qp.u)
        assert np.allclose(x, TINY_Y_STAR, atol=1e-8)
        assert obj + qp.const == pytest.approx(TINY_OBJ_STAR, abs=1e-8)

    def test_active_set_matches_enumeration_small(self):
        rng = np.random.default_rng(100)
        checked = 0
        while checked < 30:
            prob = qp_oracles.random_flow_problem(rng, n_od_max=2, paths_per_od=2,
                                                  n_links_max=5)
            qp = build_qp(prob)
            if qp.A.shape[0] > 10:
                continue
            x_enum, f_enum = qp_oracles.kkt_enumeration_qp(qp.P, qp.q, qp.A, qp.l, qp.u)
            x_as, f_as = qp_oracles.dense_active_set_qp(qp.P, qp.q, qp.A, qp.l, qp.u)
            assert f_as == pytest.approx(f_enum, abs=1e-6 * (1 + abs(f_enum)))
            checked += 1

    def test_active_set_matches_cvxopt_medium(self):
        cvxopt = pytest.importorskip("cvxopt")
        from cvxopt import matrix, solvers
        solvers.options["show_progress"] = False
        rng = np.random.default_rng(101)
        for _ in range(20):
            prob = qp_oracles.random_flow_problem(rng)
            qp = build_qp(prob)
            A = qp.A.toarray()
            G = np.vstack([A, -A])
            h = np.concatenate([qp.u, -qp.l])
            sol = solvers.qp(matrix(qp.P + 1e-9 * np.eye(len(qp.q))), matrix(qp.q),
                             matrix(G), matrix(h))
            assert sol["status"] == "optimal"
            x_ip = np.array(sol["x"]).ravel()
            f_ip = 0.5 * x_ip @ qp.P @ x_ip + qp.q @ x_ip
            _, f_as = qp_oracles.dense_active_set_qp(qp.P, qp.q, qp.A, qp.l, qp.u)
            assert f_as == pytest.approx(f_ip, abs=1e-5 * (1 + abs(f_ip)))


class TestBuildQP:
    def test_zero_weights_give_rank_one(self):
        prob = tiny_problem(gamma=0.0, rho=0.0)
        qp = build_qp(prob)
        s = np.ones(2)
        assert np.allclose(qp.P, 2 * np.outer(s, s))
        assert np.linalg.matrix_rank(qp.P) == 1

    def test_tiny_instance_hand_expansion(self):
        qp = build_qp(tiny_problem())
        assert np.allclose(qp.P, [[5.0, 1.0], [1.0, 3.0]])
        assert np.allclose(qp.q, [-32.0, -20.0])
        assert qp.const == pytest.approx(136.0)
        # constraint stack is [I; Phi; Omega] with the documented bounds
        assert qp.A.shape == (5, 2)
        assert np.allclose(qp.u, [20.0] * 5)
        assert np.allclose(qp.l, 0.0)

    def test_perfect_assignment_degeneracy(self):
        inc = incidence_from_dense([[1.0]], [[1.0]])
        prob = FlowProblem(
            incidence=inc, G=sp.csr_matrix([[1.0]]), weight_diag=np.zeros(1),
            x_tilde=5.0, z_tilde=np.zeros(1), gamma=123.4, rho=0.0,
            alpha=np.array([10.0]), beta=np.array([10.0]), capacity=np.array([10.0]))
        qp = build_qp(prob)
        # (I - G Phi) == 0 so gamma contributes nothing
        assert np.allclose(qp.P, [[2.0]])
        assert np.allclose(qp.q, [-10.0])

    def test_p_symmetric_psd_random(self):
        rng = np.random.default_rng(200)
        for _ in range(40):
            qp = build_qp(qp_oracles.random_flow_problem(rng))
            assert np.allclose(qp.P, qp.P.T)
            evals = np.linalg.eigvalsh(qp.P)
            assert evals.min() >= -1e-8

    def test_objective_matches_three_terms(self):
        rng = np.random.default_rng(201)
        for _ in range(40):
            prob = qp_oracles.random_flow_problem(rng)
            qp = build_qp(prob)
            y = rng.uniform(0, 20, qp.P.shape[0])
            direct = evaluate_objective(prob, y)
            assert qp.objective(y) == pytest.approx(direct, rel=1e-9, abs=1e-9)

    def test_dimension_mismatch_rejected(self):
        prob = tiny_problem()
        prob.weight_diag = np.zeros(3)
        with pytest.raises(ValueError, match="weight_diag"):
            build_qp(prob)

    def test_scaling_invariance(self):
        # scaling all three term weights by c scales (P, q) by c and keeps
        # the strictly constrained minimizer in place
        base = tiny_problem()
        qp1 = build_qp(base)
        c = 3.7
        scaled = tiny_problem(gamma=c, rho=c)
        scaled.total_weight = c
        qp2 = build_qp(scaled)
        assert np.allclose(qp2.P, c * qp1.P)
        assert np.allclose(qp2.q, c * qp1.q)
        s1 = solve_admm(qp1, ADMMSettings())
        s2 = solve_admm(qp2, ADMMSettings())
        assert np.allclose(s1.y, s2.y, atol=1e-6)


class TestSolveADMM:
    def test_origin_optimal_when_priors_zero(self):
        prob = tiny_problem()
        prob.x_tilde = 0.0
        prob.z_tilde = np.zeros(2)
        sol = solve_flow_problem(prob)
        assert sol.status == "solved"
        assert np.allclose(sol.y, 0.0, atol=1e-6)
        assert sol.objective == pytest.approx(0.0, abs=1e-8)

    def test_tiny_instance_against_oracle(self):
        sol = solve_flow_problem(tiny_problem())
        assert sol.status == "solved"
        assert np.allclose(sol.y, TINY_Y_STAR, atol=1e-4)
        assert sol.objective == pytest.approx(TINY_OBJ_STAR, abs=1e-4)

    def test_randomized_against_active_set(self):
        rng = np.random.default_rng(300)
        for _ in range(25):
            prob = qp_oracles.random_flow_problem(rng)
            qp = build_qp(prob)
            sol = solve_admm(qp, ADMMSettings())
            assert sol.status == "solved"
            _, f_oracle = qp_oracles.dense_active_set_qp(qp.P, qp.q, qp.A, qp.l, qp.u)
            f_oracle += qp.const
            assert abs(sol.objective - f_oracle) <= 1e-4 * max(1.0, abs(f_oracle))
            ay = qp.A @ sol.y
            assert np.all(ay >= qp.l - 1e-6 * (1 + np.abs(qp.l)))
            assert np.all(ay <= qp.u + 1e-6 * (1 + np.abs(qp.u)))

    def test_deterministic_bit_identical(self):
        prob = tiny_problem()
        qp = build_qp(prob)
        s1 = solve_admm(qp, ADMMSettings())
        s2 = solve_admm(qp, ADMMSettings())
        assert s1.y.tobytes() == s2.y.tobytes()
        assert s1.residual_history == s2.residual_history
        assert s1.iterations == s2.iterations

    def test_projected_gradient_at_solution(self):
        # with generous OD and link bounds only the path box can be active,
        # so the projected gradient over that box must vanish
        rng = np.random.default_rng(301)
        for _ in range(15):
            prob = qp_oracles.random_flow_problem(rng)
            prob.alpha = np.full(prob.incidence.n_od, 1e6)
            prob.capacity = np.full(prob.incidence.n_links, 1e6)
            qp = build_qp(prob)
            sol = solve_admm(qp, ADMMSettings())
            assert sol.status == "solved"
            g = qp.P @ sol.y + qp.q
            beta = qp.u[:qp.n_paths]
            stepped = np.clip(sol.y - g, 0.0, beta)
            pg = np.max(np.abs(sol.y - stepped))
            assert pg <= 1e-5 * (1.0 + np.max(np.abs(qp.q)))

    def test_rho_monotonically_reduces_link_error(self):
        errs = []
        for rho in (0.25, 1.0, 4.0, 16.0):
            prob = tiny_problem(rho=rho)
            sol = solve_flow_problem(prob)
            link_err = prob.weight_diag * (prob.incidence.omega @ sol.y - prob.z_tilde)
            errs.append(float(link_err @ link_err))
        assert all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))

    def test_infeasible_bounds_detected(self):
        qp = build_qp(tiny_problem())
        qp.l = qp.u + 1.0
        sol = solve_admm(qp, ADMMSettings())
        assert sol.status == "infeasible"

    def test_max_iter_status(self):
        qp = build_qp(tiny_problem())
        sol = solve_admm(qp, ADMMSettings(max_iter=3, check_interval=1))
        assert sol.status == "max_iter"
        assert sol.iterations == 3


class TestRecoverAndRound:
    def test_zero_flow(self):
        inc = tiny_problem().incidence
        x, z = recover_flows(np.zeros(2), inc)
        assert np.all(x == 0) and np.all(z == 0)

    def test_simple_sum(self):
        inc = incidence_from_dense([[1, 1]], [[1, 1]])
        x, z = recover_flows(np.array([3.0, 4.0]), inc)
        assert x.tolist() == [7.0]
        assert z.tolist() == [7.0]

    def test_random_matches_dense(self):
        rng = np.random.default_rng(400)
        for _ in range(20):
            prob = qp_oracles.random_flow_problem(rng)
            y = rng.uniform(0, 9, prob.incidence.n_paths)
            x, z = recover_flows(y, prob.incidence)
            assert np.allclose(x, prob.incidence.phi.toarray() @ y)
            assert np.allclose(z, prob.incidence.omega.toarray() @ y)

    def make_solution(self, y, beta):
        from mesocal.flowest import FlowSolution
        return FlowSolution(y=np.asarray(y, float), x=np.zeros(0), z=np.zeros(0),
                            objective=0.0, primal_residual=0.0, dual_residual=0.0,
                            status="solved", iterations=1,
                            path_upper=np.asarray(beta, float))

    def test_half_up_rounding(self):
        y_int, drift = round_path_flows(self.make_solution([2.4, 2.6], [10, 10]))
        assert y_int.tolist() == [2, 3]
        assert drift == pytest.approx(0.0)

    def test_clamp_after_rounding(self):
        y_int, _ = round_path_flows(self.make_solution([7.5], [7.0]))
        assert y_int.tolist() == [7]

    def test_drift_bound_random(self):
        rng = np.random.default_rng(401)
        for _ in range(50):
            m = int(rng.integers(1, 40))
            y = rng.uniform(0, 30, m)
            y_int, drift = round_path_flows(self.make_solution(y, np.full(m, 1e9)))
            assert drift <= m / 2 + 1e-12
            assert np.all(np.abs(y_int - y) <= 0.5 + 1e-12)

    def test_rejects_infeasible_status(self):
        sol = self.make_solution([1.0], [2.0])
        sol.status = "infeasible"
        with pytest.raises(ValueError):
            round_path_flows(sol)


class TestEstimateAllTODs:
    def test_identical_problems_identical_solutions(self):
        problems = {tod: tiny_problem() for tod in range(1, 7)}
        solutions, report = estimate_all_tods(problems)
        ys = [solutions[t].y.tobytes() for t in sorted(solutions)]
        assert len(set(ys)) == 1
        assert all(report[t]["status"] == "solved" for t in report)

    def test_failure_isolated(self):
        problems = {tod: tiny_problem() for tod in range(1, 7)}
        problems[3].alpha = np.array([-5.0])  # invalid bound
        solutions, report = estimate_all_tods(problems)
        assert report[3]["status"] == "error"
        assert 3 not in solutions
        assert sum(1 for t in report if report[t].get("status") == "solved") == 5

    def test_totals_track_injected_prior(self):
        # with a link prior consistent with the injected total, the estimated
        # totals stay close to the total-trips prior
        rng = np.random.default_rng(402)
        problems = {}
        injected = {}
        for tod in range(1, 7):
            prob = tiny_problem()
            prob.x_tilde = float(rng.uniform(4, 15))
            prob.z_tilde = np.array([0.6 * prob.x_tilde, 0.0])
            injected[tod] = prob.x_tilde
            problems[tod] = prob
        solutions, _ = estimate_all_tods(problems)
        for tod, sol in solutions.items():
            assert sol.x.sum() == pytest.approx(injected[tod], rel=0.05)
