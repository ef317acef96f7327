import numpy as np
import pytest

from conftest import random_spd
from ddseq.errors import ContractError
from ddseq.krylov import (
    DeflationState,
    StoppingRule,
    check_stop,
    deflated_pcg,
    harmonic_ritz,
    pcg,
    project_initial,
    ritz_converged,
    update_basis,
    write_residual_csv,
    write_ritz_csv,
)


def operator(A):
    return lambda v: A @ v


class TestStoppingRule:
    def test_threshold_relative_to_rhs(self):
        rule = StoppingRule("relative_to_rhs", tol=1e-3)
        assert rule.threshold(r0_norm=5.0, b_norm=2.0) == pytest.approx(2e-3)
        assert check_stop(rule, 1.9e-3, 5.0, 2.0)
        assert not check_stop(rule, 2e-3, 5.0, 2.0)

    def test_threshold_relative_to_initial(self):
        rule = StoppingRule("relative_to_initial", tol=1e-3)
        assert rule.threshold(r0_norm=5.0, b_norm=2.0) == pytest.approx(5e-3)
        assert check_stop(rule, 4.9e-3, 5.0, 2.0)

    def test_validation(self):
        with pytest.raises(ContractError):
            StoppingRule("relative_to_truth")
        with pytest.raises(ContractError):
            StoppingRule(tol=0.0)
        with pytest.raises(ContractError):
            StoppingRule(tol=1.5)
        with pytest.raises(ContractError):
            StoppingRule(max_iters=0)


class TestRitzConvergence:
    def test_relative_stagnation_threshold(self):
        base = np.array([2.0, 1.0])
        assert not ritz_converged(np.array([2.0, 1.0 + 3e-5]), base)
        assert ritz_converged(np.array([2.0, 1.0 + 2e-5]), base)

    def test_degenerate_inputs(self):
        assert not ritz_converged(None, np.array([1.0]))
        assert not ritz_converged(np.array([1.0]), None)
        assert not ritz_converged(np.array([1.0, 2.0]), np.array([1.0]))
        assert not ritz_converged(np.zeros(2), np.zeros(2))


class TestPcg:
    def test_matches_dense_solve(self, rng):
        A = random_spd(30, rng)
        b = rng.standard_normal(30)
        rule = StoppingRule(tol=1e-12, max_iters=200)
        x, report = pcg(operator(A), b, rule=rule)
        assert report.converged
        np.testing.assert_allclose(x, np.linalg.solve(A, b),
                                   rtol=1e-9, atol=1e-10)
        assert report.residual_history[0] == pytest.approx(np.linalg.norm(b))
        assert report.iterations == len(report.residual_history) - 1
        assert len(report.alphas) == report.iterations
        assert len(report.betas) == report.iterations - 1
        assert report.true_residual <= report.threshold * 10.0

    def test_jacobi_preconditioner_still_correct(self, rng):
        A = random_spd(25, rng) + np.diag(np.linspace(1.0, 50.0, 25))
        d = np.diag(A)
        b = rng.standard_normal(25)
        rule = StoppingRule(tol=1e-11, max_iters=300)
        x, report = pcg(operator(A), b, apply_M=lambda r: r / d, rule=rule)
        assert report.converged
        np.testing.assert_allclose(x, np.linalg.solve(A, b),
                                   rtol=1e-8, atol=1e-9)

    def test_zero_rhs_returns_immediately(self):
        A = np.eye(4)
        x, report = pcg(operator(A), np.zeros(4))
        np.testing.assert_array_equal(x, 0.0)
        assert report.converged
        assert report.iterations == 0

    def test_warm_start_skips_work(self, rng):
        A = random_spd(20, rng)
        b = rng.standard_normal(20)
        exact = np.linalg.solve(A, b)
        x, report = pcg(operator(A), b, x0=exact,
                        rule=StoppingRule(tol=1e-8))
        assert report.iterations == 0
        assert report.converged

    def test_iteration_cap_flags_failure(self, rng):
        A = random_spd(40, rng) + np.diag(np.logspace(0, 6, 40))
        b = rng.standard_normal(40)
        rule = StoppingRule(tol=1e-13, max_iters=3)
        x, report = pcg(operator(A), b, rule=rule)
        assert not report.converged
        assert report.iterations == 3

    def test_true_residual_guard_catches_drift(self, rng):
        # sabotage the iterate from a callback: the recurrence residual
        # still hits the threshold, the recomputed one cannot
        A = random_spd(15, rng)
        b = rng.standard_normal(15)

        def sabotage(x, r):
            x[0] += 50.0

        x, report = pcg(operator(A), b, rule=StoppingRule(tol=1e-10),
                        callback=sabotage)
        assert not report.converged
        assert report.true_residual > 10.0 * report.threshold

    def test_error_decreases_in_operator_norm(self, rng):
        A = random_spd(25, rng)
        b = rng.standard_normal(25)
        exact = np.linalg.solve(A, b)
        errs = []

        def track(x, r):
            e = x - exact
            errs.append(float(e @ (A @ e)))

        pcg(operator(A), b, rule=StoppingRule(tol=1e-12, max_iters=100),
            callback=track)
        diffs = np.diff(errs)
        assert np.all(diffs <= 1e-12 * max(errs))


class TestDeflatedPcg:
    def test_empty_state_reproduces_pcg_exactly(self, rng):
        A = random_spd(30, rng)
        b = rng.standard_normal(30)
        rule = StoppingRule(tol=1e-10, max_iters=200)
        x_p, rep_p = pcg(operator(A), b, rule=rule)
        state = DeflationState("b2", limit=5)
        x_d, rep_d = deflated_pcg(operator(A), b, state, rule=rule)
        np.testing.assert_array_equal(x_d, x_p)
        np.testing.assert_array_equal(rep_d.residual_history,
                                       rep_p.residual_history)
        assert rep_d.alphas == rep_p.alphas
        assert rep_d.betas == rep_p.betas
        assert state.directions.shape == (30, rep_p.iterations)

    def test_none_state_allowed(self, rng):
        A = random_spd(10, rng)
        b = rng.standard_normal(10)
        x, report = deflated_pcg(operator(A), b, None,
                                 rule=StoppingRule(tol=1e-10))
        assert report.converged

    def test_zero_rhs_clears_directions(self, rng):
        A = random_spd(8, rng)
        state = DeflationState("b1", limit=3)
        x, report = deflated_pcg(operator(A), np.zeros(8), state)
        assert report.converged and report.iterations == 0
        assert state.directions.shape == (8, 0)

    def test_recycled_basis_still_solves_correctly(self, rng):
        A = random_spd(40, rng)
        rule = StoppingRule(tol=1e-12, max_iters=300)
        state = DeflationState("b2", limit=8)
        b1 = rng.standard_normal(40)
        deflated_pcg(operator(A), b1, state, rule=rule)
        update_basis(state, step=1)
        assert state.k == 8
        b2 = rng.standard_normal(40)
        x, report = deflated_pcg(operator(A), b2, state, rule=rule)
        assert report.converged
        assert report.basis_size == 8
        np.testing.assert_allclose(x, np.linalg.solve(A, b2),
                                   rtol=1e-8, atol=1e-9)

    def test_initial_residual_orthogonal_to_basis(self, rng):
        A = random_spd(35, rng)
        rule = StoppingRule(tol=1e-12, max_iters=300)
        state = DeflationState("b2", limit=6)
        deflated_pcg(operator(A), rng.standard_normal(35), state, rule=rule)
        update_basis(state, step=1)
        b = rng.standard_normal(35)
        x0 = project_initial(state, operator(A), b)
        r0 = b - A @ x0
        assert np.abs(state.basis.T @ r0).max() <= 1e-10 * np.linalg.norm(b)

    def test_projected_residual_stays_orthogonal_throughout(self, rng):
        A = random_spd(35, rng)
        rule = StoppingRule(tol=1e-11, max_iters=300)
        state = DeflationState("b3", limit=5)
        deflated_pcg(operator(A), rng.standard_normal(35), state, rule=rule)
        update_basis(state, step=1)
        b = rng.standard_normal(35)
        b_norm = np.linalg.norm(b)
        W = state.basis
        seen = []

        def track(x, r):
            seen.append(np.abs(W.T @ r).max())

        deflated_pcg(operator(A), b, state, rule=rule, callback=track)
        assert seen and max(seen) <= 1e-10 * b_norm

    def test_new_directions_conjugate_to_basis(self, rng):
        A = random_spd(35, rng)
        rule = StoppingRule(tol=1e-11, max_iters=300)
        state = DeflationState("b4", limit=5)
        deflated_pcg(operator(A), rng.standard_normal(35), state, rule=rule)
        update_basis(state, step=1)
        deflated_pcg(operator(A), rng.standard_normal(35), state, rule=rule)
        P = state.directions
        cross = state.basis_image.T @ P
        scale = (np.linalg.norm(A)
                 * np.linalg.norm(P, axis=0).max()
                 * max(np.linalg.norm(state.basis, axis=0).max(), 1.0))
        assert np.abs(cross).max() <= 1e-8 * scale

    def test_deflating_exact_eigenvectors_kills_extreme_modes(self, rng):
        # spectrum with a spread-out tail of large eigenvalues: removing
        # their eigenvectors exactly should cut the iteration count hard
        diag = np.concatenate([np.linspace(1.0, 2.0, 20), np.logspace(2, 5, 10)])
        Q, _ = np.linalg.qr(rng.standard_normal((30, 30)))
        A = (Q * diag) @ Q.T
        A = 0.5 * (A + A.T)
        b = rng.standard_normal(30)
        rule = StoppingRule(tol=1e-10, max_iters=400)
        _, plain = pcg(operator(A), b, rule=rule)

        state = DeflationState("b4", limit=10)
        W = Q[:, -10:]
        AW = A @ W
        state.set_basis(W, AW, gram=W.T @ AW)
        _, deflated = deflated_pcg(operator(A), b, state, rule=rule)
        assert deflated.converged
        assert deflated.iterations < plain.iterations
        assert deflated.iterations <= 20


class TestProjection:
    def test_projector_is_idempotent(self, rng):
        A = random_spd(30, rng)
        state = DeflationState("b4", limit=4)
        vecs = np.linalg.qr(rng.standard_normal((30, 4)))[0]
        state.set_basis(vecs, A @ vecs, gram=vecs.T @ A @ vecs)

        def project(v):
            return v - state.basis @ state.gram_solve(
                state.basis_image.T @ v
            )

        v = rng.standard_normal(30)
        once = project(v)
        twice = project(once)
        assert np.linalg.norm(twice - once) <= 1e-10 * np.linalg.norm(v)

    def test_project_initial_without_basis_passes_through(self, rng):
        A = random_spd(10, rng)
        b = rng.standard_normal(10)
        np.testing.assert_array_equal(
            project_initial(None, operator(A), b), np.zeros(10)
        )
        prev = rng.standard_normal(10)
        state = DeflationState("b1", limit=2)
        np.testing.assert_array_equal(
            project_initial(state, operator(A), b, x_prev=prev), prev
        )


class TestBasisUpdates:
    def test_b1_fills_then_freezes(self, rng):
        n = 12
        A = random_spd(n, rng)
        state = DeflationState("b1", limit=4)
        P1 = rng.standard_normal((n, 3))
        state.directions = P1
        state.directions_image = A @ P1
        update_basis(state, step=1)
        assert state.k == 3 and not state.frozen
        np.testing.assert_array_equal(state.basis, P1)
        P2 = rng.standard_normal((n, 2))
        state.directions = P2
        state.directions_image = A @ P2
        update_basis(state, step=2)
        assert state.k == 4
        np.testing.assert_array_equal(
            state.basis, np.column_stack([P1, P2[:, :1]])
        )
        assert state.frozen and state.frozen_at_step == 2
        state.directions = rng.standard_normal((n, 2))
        state.directions_image = A @ state.directions
        update_basis(state, step=3)
        assert state.k == 4 and state.frozen_at_step == 2

    def test_b2_keeps_most_recent_window(self, rng):
        n = 10
        A = random_spd(n, rng)
        state = DeflationState("b2", limit=3)
        P1 = rng.standard_normal((n, 3))
        state.directions = P1
        state.directions_image = A @ P1
        update_basis(state, step=1)
        P2 = rng.standard_normal((n, 2))
        state.directions = P2
        state.directions_image = A @ P2
        update_basis(state, step=2)
        expected = np.column_stack([P1[:, 2:], P2])
        np.testing.assert_array_equal(state.basis, expected)
        assert not state.frozen

    def test_diagonal_gram_matches_definition(self, rng):
        n = 10
        A = random_spd(n, rng)
        state = DeflationState("b2", limit=5)
        P = rng.standard_normal((n, 4))
        state.directions = P
        state.directions_image = A @ P
        update_basis(state, step=1)
        np.testing.assert_allclose(
            state.gram_diag, np.diag(P.T @ A @ P), rtol=1e-12
        )

    @pytest.mark.parametrize("strategy,pick", [
        ("b4", lambda w: w[::-1][:3]),
        ("b3", lambda w: w[:3]),
    ])
    def test_harmonic_ritz_exact_on_full_space(self, rng, strategy, pick):
        # with V = I and no preconditioner the harmonic pencil reduces to
        # A^2 y = theta A y, so the Ritz values are A's eigenvalues
        n = 6
        A = random_spd(n, rng)
        state = DeflationState(strategy, limit=3)
        state.directions = np.eye(n)
        state.directions_image = A.copy()
        update_basis(state, step=1)
        expected = pick(np.linalg.eigvalsh(A))
        np.testing.assert_allclose(state.ritz_curr, expected,
                                   rtol=1e-9, atol=1e-10)
        assert state.k == 3

    def test_full_gram_solve_matches_dense(self, rng):
        n = 14
        A = random_spd(n, rng)
        state = DeflationState("b4", limit=4)
        P = rng.standard_normal((n, 6))
        state.directions = P
        state.directions_image = A @ P
        update_basis(state, step=1)
        W = state.basis
        gram = W.T @ A @ W
        v = rng.standard_normal(4)
        np.testing.assert_allclose(
            state.gram_solve(v), np.linalg.solve(gram, v),
            rtol=1e-8, atol=1e-10,
        )

    def test_ritz_values_invariant_under_direction_scaling(self, rng):
        n = 12
        A = random_spd(n, rng)
        P = rng.standard_normal((n, 5))
        thetas = []
        for scale in (1.0, 2.0**20):
            state = DeflationState("b4", limit=5)
            state.directions = P * scale
            state.directions_image = (A @ P) * scale
            update_basis(state, step=1)
            thetas.append(state.ritz_curr.copy())
        np.testing.assert_allclose(thetas[0], thetas[1], rtol=1e-12)

    def test_harmonic_ritz_residual_contract(self, rng):
        n = 10
        A = random_spd(n, rng)
        V = np.linalg.qr(rng.standard_normal((n, 4)))[0]
        AV = A @ V
        theta, Y = harmonic_ritz(V, AV, lambda v: v)
        lhs = AV.T @ AV
        rhs = V.T @ AV
        for j in range(4):
            r = lhs @ Y[:, j] - theta[j] * (rhs @ Y[:, j])
            assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(lhs)

    def test_none_strategy_is_inert(self, rng):
        state = DeflationState("none")
        state.directions = rng.standard_normal((5, 2))
        state.directions_image = state.directions.copy()
        update_basis(state, step=1)
        assert state.k == 0 and state.update_count == 0

    def test_stationary_sequence_freezes_ritz(self, rng):
        n = 30
        A = random_spd(n, rng)
        b = rng.standard_normal(n)
        rule = StoppingRule(tol=1e-10, max_iters=200)
        state = DeflationState("b4", limit=5)
        x = None
        for step in range(1, 11):
            x, report = deflated_pcg(operator(A), b, state, x_prev=x,
                                     rule=rule)
            assert report.converged
            update_basis(state, step=step)
            if state.frozen:
                break
        assert state.frozen
        assert state.frozen_at_step <= 10
        count = state.update_count
        state.directions = rng.standard_normal((n, 2))
        state.directions_image = A @ state.directions
        update_basis(state, step=99)
        assert state.update_count == count
        assert state.frozen_at_step != 99

    def test_invalid_construction(self):
        with pytest.raises(ContractError):
            DeflationState("b9")
        with pytest.raises(ContractError):
            DeflationState("b1", limit=0)


class TestCsvWriters:
    def test_residual_csv_layout(self, tmp_path, rng):
        A = random_spd(12, rng)
        reports = []
        for _ in range(2):
            _, rep = pcg(operator(A), rng.standard_normal(12),
                         rule=StoppingRule(tol=1e-8))
            reports.append(rep)
        path = tmp_path / "residuals.csv"
        write_residual_csv(reports, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,iter,relres_rhs,relres_r0"
        expected_rows = sum(len(r.residual_history) for r in reports)
        assert len(lines) == 1 + expected_rows
        first = lines[1].split(",")
        assert first[:2] == ["1", "0"]
        assert float(first[2]) == pytest.approx(1.0)

    def test_ritz_csv_blanks_for_missing_steps(self, tmp_path):
        per_step = [None, np.array([3.0, 1.0]), None]
        path = tmp_path / "ritz.csv"
        write_ritz_csv(per_step, 4, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,theta_1,theta_2,theta_3,theta_4"
        assert lines[1] == "1,,,,"
        fields = lines[2].split(",")
        assert float(fields[1]) == pytest.approx(3.0)
        assert fields[3] == "" and fields[4] == ""
        assert lines[3] == "3,,,,"
