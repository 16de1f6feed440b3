import numpy as np
import pytest
from scipy.optimize import minimize

from bros.blockmat import BlockShape, BlockVar, inner, lift_up, norm, project_down
from bros.problems import (
    HyperCleaning,
    InnerSolveError,
    QuadraticBilevel,
    aux_solution,
    exact_hypergradient,
    load_feature_table,
    lower_solution,
    make_block_quadratic,
    make_counterexample,
    make_hypercleaning,
    make_hypercleaning_from_tables,
    make_quadratic,
    sample_projected_oracles,
)
from bros.randsrc import ProjectorSet, RngStream, sample_gaussian_blockvar, sample_projector_set
from bros.solvers import stationarity_surrogate

from conftest import random_blockvar, rel_err


def central_fd(fun, x, h):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


@pytest.fixture(scope="module")
def quad():
    return make_quadratic(RngStream(3), 5, 3, 4, conditioning=6.0)


@pytest.fixture(scope="module")
def cleaning():
    return make_hypercleaning(RngStream(5), 30, 20, 8, 3, 0.3, ridge=0.1)


class TestQuadratic:
    def test_identity_hessian(self):
        p = make_quadratic(RngStream(1), 3, 2, 2, conditioning=1.0)
        assert np.array_equal(p.H, np.eye(6))
        x = np.array([0.3, -1.2])
        assert np.allclose(p.lower_solution(x).flat(), p.C @ x, atol=1e-14)
        assert np.allclose(p.aux_solution(x).flat(), p.D, atol=1e-14)

    def test_spectrum_and_strong_convexity(self, quad):
        eigs = np.linalg.eigvalsh(quad.H)
        assert eigs[0] == pytest.approx(1.0, abs=1e-10)
        assert eigs[-1] == pytest.approx(6.0, abs=1e-10)
        assert quad.mu_g == pytest.approx(1.0, abs=1e-10)
        assert np.allclose(quad.H, np.kron(quad.column_hessian, np.eye(3)))

    def test_aux_residual(self, quad):
        x = np.linspace(-1, 1, 4)
        Y = lower_solution(quad, x)
        Z = aux_solution(quad, x)
        assert norm(quad.hvp(x, Y, Z) - quad.grad_y_f(x, Y)) < 1e-10
        assert norm(quad.grad_y_g(x, Y)) < 1e-10

    def test_hypergradient_finite_difference(self, quad):
        x = np.array([0.5, -0.3, 1.1, 0.2])
        fd = central_fd(quad.phi, x, 1e-5)
        assert rel_err(exact_hypergradient(quad, x), fd) < 1e-5

    def test_general_structure(self):
        p = make_quadratic(RngStream(2), 3, 2, 2, conditioning=3.0, structure="general")
        assert p.column_hessian is None
        x = np.array([0.2, 0.4])
        assert rel_err(p.exact_hypergradient(x), central_fd(p.phi, x, 1e-5)) < 1e-5
        with pytest.raises(ValueError):
            make_quadratic(RngStream(2), 3, 2, 2, structure="banded")

    def test_hvp_self_adjoint(self, quad, gen):
        x = np.zeros(4)
        Y = quad.lower_solution(x)
        for _ in range(5):
            W1, W2 = random_blockvar(gen, quad.shape), random_blockvar(gen, quad.shape)
            assert inner(W1, quad.hvp(x, Y, W2)) == pytest.approx(inner(W2, quad.hvp(x, Y, W1)), abs=1e-8)

    def test_jvp_is_mixed_partial(self, quad, gen):
        Y = random_blockvar(gen, quad.shape)
        W = random_blockvar(gen, quad.shape)
        x = gen.standard_normal(4)
        fd = central_fd(lambda z: inner(quad.grad_y_g(z, Y), W), x, 1e-5)
        assert np.allclose(quad.jvp(x, Y, W), fd, atol=1e-6)

    def test_validation(self):
        shape = BlockShape(((2, 1),))
        with pytest.raises(ValueError):
            QuadraticBilevel(shape, np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones((2, 1)), np.ones(2))
        with pytest.raises(ValueError):
            QuadraticBilevel(shape, np.diag([1.0, -1.0]), np.ones((2, 1)), np.ones(2))
        with pytest.raises(ValueError):
            make_quadratic(RngStream(0), 3, 2, 1, conditioning=0.5)


class TestCounterexample:
    def test_closed_forms(self):
        p = make_counterexample()
        for x in (-2.0, -1.0, 0.0, 0.7):
            assert np.array_equal(p.lower_solution([x])[0][:, 0], [x, 0.0, 0.0])
            assert np.array_equal(p.aux_solution([x])[0][:, 0], [1.0, 0.0, 0.0])
            assert p.exact_hypergradient([x])[0] == pytest.approx(x + 1.0, abs=1e-15)

    def test_named_points(self):
        p = make_counterexample()
        assert p.exact_hypergradient([-20 / 39])[0] == pytest.approx(19 / 39, abs=1e-15)
        assert p.exact_hypergradient([-1.0])[0] == 0.0
        assert stationarity_surrogate(p, [-1.0]) < 1e-12
        assert p.sigma_grad == 0 and p.sigma_op == 0 and p.d_x == 1


class TestOracles:
    def test_noiseless_composition(self, quad, gen):
        x = gen.standard_normal(4)
        Y = random_blockvar(gen, quad.shape)
        P = sample_projector_set(RngStream(9), quad.shape, (3,))
        s = sample_projected_oracles(quad, RngStream(1), x, Y, P)
        B = random_blockvar(gen, quad.shape.reduced((3,)))
        assert s.hvp(B).allclose(project_down(P, quad.hvp(x, Y, lift_up(P, B))))
        assert np.allclose(s.jvp(B), quad.jvp(x, Y, lift_up(P, B)), atol=1e-12)
        assert s.v.allclose(project_down(P, quad.grad_y_g(x, Y)))
        assert s.uy.allclose(project_down(P, quad.grad_y_f(x, Y)))
        assert np.array_equal(s.ux, quad.grad_x_f(x, Y))

    def test_subspace_native_path_matches_composition(self, gen):
        p = make_quadratic(RngStream(4), 6, 2, 2, conditioning=3.0)
        x, Y = np.zeros(2), random_blockvar(gen, p.shape)
        P = sample_projector_set(RngStream(5), p.shape, (3,))
        B = random_blockvar(gen, p.shape.reduced((3,)))
        native = p.sample_projected_oracles(RngStream(6), x, Y, P).hvp(B)
        assert native.allclose(project_down(P, p.hvp(x, Y, lift_up(P, B))))

    @pytest.mark.parametrize("structure", ["general", "block"])
    def test_noiseless_general_and_block_composition(self, gen, structure):
        if structure == "block":
            p = make_block_quadratic(RngStream(4), [(4, 2), (3, 3)], 2)
            ranks = (2, 3)
        else:
            p = make_quadratic(RngStream(4), 5, 2, 2, structure="general")
            ranks = (3,)
        x, Y = np.zeros(2), random_blockvar(gen, p.shape)
        P = sample_projector_set(RngStream(5), p.shape, ranks)
        B = random_blockvar(gen, p.shape.reduced(ranks))
        got = p.sample_projected_oracles(RngStream(6), x, Y, P).hvp(B)
        assert got.allclose(project_down(P, p.hvp(x, Y, lift_up(P, B))), atol=1e-12)

    def test_frozen_realization(self, gen):
        p = make_quadratic(RngStream(4), 4, 2, 2, conditioning=3.0, sigma_grad=0.3, sigma_op=0.5)
        P = sample_projector_set(RngStream(5), p.shape, (2,))
        s = p.sample_projected_oracles(RngStream(6), np.zeros(2), BlockVar.zeros(p.shape), P)
        B = random_blockvar(gen, p.shape.reduced((2,)))
        a, b = s.hvp(B), s.hvp(B)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))
        assert np.array_equal(s.jvp(B), s.jvp(B))
        assert s.queries == 2
        # linear in the query for a fixed realization
        assert s.hvp(2.5 * B).allclose(2.5 * a)

    def test_operator_noise_symmetric_and_scaled(self, gen):
        p = make_quadratic(RngStream(4), 4, 2, 2, conditioning=1.0, sigma_op=0.5)
        I = ProjectorSet.identity(p.shape)
        x, Y = np.zeros(2), BlockVar.zeros(p.shape)
        s = p.sample_projected_oracles(RngStream(1), x, Y, I)
        W1, W2 = random_blockvar(gen, p.shape), random_blockvar(gen, p.shape)
        assert inner(W1, s.hvp(W2)) == pytest.approx(inner(W2, s.hvp(W1)), abs=1e-10)
        ratios = []
        for t in range(200):
            s = p.sample_projected_oracles(RngStream(2).child(t), x, Y, I)
            ratios.append(norm(s.hvp(W1) - p.hvp(x, Y, W1)) ** 2 / norm(W1) ** 2)
        assert 0.1 < np.mean(ratios) < 2.0

    def test_conditional_unbiased_gradient(self, gen):
        p = make_quadratic(RngStream(7), 4, 2, 2, conditioning=2.0, sigma_grad=0.2)
        P = sample_projector_set(RngStream(8), p.shape, (2,))
        x, Y = np.ones(2), random_blockvar(gen, p.shape)
        target = project_down(P, p.grad_y_g(x, Y))
        trials = 100_000
        acc = np.zeros((2, 2))
        for t in range(trials):
            acc += p.sample_projected_oracles(RngStream(9).child(t), x, Y, P).v[0]
        assert rel_err(acc / trials, target[0]) < 0.01

    def test_lifted_gradient_unbiased(self, gen):
        p = make_quadratic(RngStream(7), 4, 2, 2, conditioning=2.0, sigma_grad=0.2)
        x, Y = np.ones(2), random_blockvar(gen, p.shape)
        acc = np.zeros((4, 2))
        trials = 40_000
        for t in range(trials):
            sub = RngStream(10).child(t)
            P = sample_projector_set(sub, p.shape, (2,))
            acc += lift_up(P, p.sample_projected_oracles(sub, x, Y, P).v)[0]
        assert rel_err(acc / trials, p.grad_y_g(x, Y)[0]) < 0.01


class TestBlockQuadratic:
    def test_coupled_and_diagonal(self):
        c = make_block_quadratic(RngStream(1), [(4, 2), (3, 2)], 2, coupled=True)
        d = make_block_quadratic(RngStream(1), [(4, 2), (3, 2)], 2, coupled=False)
        assert np.abs(c.H[:8, 8:]).max() > 0
        assert not d.H[:8, 8:].any()
        x = np.array([0.3, -0.4])
        assert rel_err(c.exact_hypergradient(x), central_fd(c.phi, x, 1e-5)) < 1e-5


class TestHyperCleaning:
    def test_structure(self, cleaning):
        assert cleaning.shape.layers == ((3, 8),)
        assert cleaning.d_x == 30 and cleaning.mu_g == 0.1
        assert len(cleaning.corrupted) == 9
        assert (cleaning.y_tr[cleaning.corrupted] != cleaning.clean_labels[cleaning.corrupted]).all()

    def test_inner_solves(self, cleaning):
        x = np.linspace(-1, 1, 30)
        Y = cleaning.lower_solution(x)
        assert norm(cleaning.grad_y_g(x, Y)) <= 1e-10
        Z = cleaning.aux_solution(x, Y)
        rhs = cleaning.grad_y_f(x, Y)
        assert norm(cleaning.hvp(x, Y, Z) - rhs) <= 1e-8 * max(1.0, norm(rhs))

    def test_hessian_matches_hvp(self, cleaning, gen):
        x = gen.standard_normal(30)
        Y = random_blockvar(gen, cleaning.shape)
        W = random_blockvar(gen, cleaning.shape)
        H = cleaning.hessian_matrix(x, Y)
        assert np.allclose(H @ W.flat(), cleaning.hvp(x, Y, W).flat(), atol=1e-12)
        assert np.allclose(H, H.T, atol=1e-14)
        assert np.linalg.eigvalsh(H)[0] >= 0.1 - 1e-12

    def test_gradient_matches_finite_difference(self, cleaning, gen):
        x = gen.standard_normal(30)
        Y = random_blockvar(gen, cleaning.shape)
        W = random_blockvar(gen, cleaning.shape)
        h = 1e-6
        fd = (cleaning.g(x, Y + h * W) - cleaning.g(x, Y - h * W)) / (2 * h)
        assert inner(cleaning.grad_y_g(x, Y), W) == pytest.approx(fd, rel=1e-6)
        fd_f = (cleaning.f(x, Y + h * W) - cleaning.f(x, Y - h * W)) / (2 * h)
        assert inner(cleaning.grad_y_f(x, Y), W) == pytest.approx(fd_f, rel=1e-6)
        jfd = central_fd(lambda z: inner(cleaning.grad_y_g(z, Y), W), x, 1e-6)
        assert np.allclose(cleaning.jvp(x, Y, W), jfd, atol=1e-8)

    def test_hypergradient_matches_finite_difference(self, cleaning):
        x = np.random.default_rng(0).standard_normal(30) * 0.5
        Y = cleaning.lower_solution(x, tol=1e-10)
        Z = cleaning.aux_solution(x, Y)
        grad = cleaning.grad_x_f(x, Y) - cleaning.jvp(x, Y, Z)
        fd = central_fd(lambda z: cleaning.phi(z), x, 1e-4)
        assert rel_err(grad, fd) < 1e-4

    def test_full_batch_oracle_is_deterministic_gradient(self, cleaning, gen):
        x = gen.standard_normal(30)
        Y = random_blockvar(gen, cleaning.shape)
        I = ProjectorSet.identity(cleaning.shape)
        s = cleaning.sample_projected_oracles(RngStream(3), x, Y, I)
        assert s.v.allclose(cleaning.grad_y_g(x, Y), atol=1e-14)
        assert s.uy.allclose(cleaning.grad_y_f(x, Y), atol=1e-14)
        W = random_blockvar(gen, cleaning.shape)
        assert s.hvp(W).allclose(cleaning.hvp(x, Y, W), atol=1e-14)
        assert np.allclose(s.jvp(W), cleaning.jvp(x, Y, W), atol=1e-14)

    def test_minibatch_unbiased(self, gen):
        p = make_hypercleaning(RngStream(5), 30, 20, 8, 3, 0.3, ridge=0.1, batch_size=5, val_batch_size=4)
        x = gen.standard_normal(30)
        Y = random_blockvar(gen, p.shape)
        I = ProjectorSet.identity(p.shape)
        acc = np.zeros((3, 8))
        trials = 20_000
        for t in range(trials):
            acc += p.sample_projected_oracles(RngStream(4).child(t), x, Y, I).v[0]
        assert rel_err(acc / trials, p.grad_y_g(x, Y)[0]) < 0.01

    def test_no_noise_reduces_to_ridge_logistic(self):
        p = make_hypercleaning(RngStream(8), 40, 20, 5, 3, 0.0, ridge=0.05)
        assert len(p.corrupted) == 0
        x = np.zeros(40)  # every weight equals 1/2
        Y = p.lower_solution(x)
        assert norm(p.grad_y_g(x, Y)) < 1e-6

        def plain(w):
            W = w.reshape(3, 5)
            Z = p.A_tr @ W.T
            lse = np.log(np.exp(Z - Z.max(1, keepdims=True)).sum(1)) + Z.max(1)
            return 0.5 * np.mean(lse - Z[np.arange(40), p.y_tr]) + 0.025 * w @ w

        ref = minimize(plain, np.zeros(15), method="BFGS", options={"gtol": 1e-10}).x
        assert np.allclose(Y.flat(), ref, atol=1e-5)

    def test_degenerate_inputs(self):
        with pytest.raises(ValueError):
            make_hypercleaning(RngStream(0), 10, 10, 3, 1, 0.1, ridge=0.1)
        with pytest.raises(ValueError):
            make_hypercleaning(RngStream(0), 10, 10, 3, 2, 1.0, ridge=0.1)
        with pytest.raises(ValueError):
            HyperCleaning(np.ones((4, 2)), [0, 1, 0, 1], np.ones((2, 2)), [0, 1], 2, ridge=0.0)
        with pytest.raises(ValueError):
            HyperCleaning(np.ones((4, 2)), [0, 0, 0, 0], np.ones((2, 2)), [0, 1], 2, ridge=0.1)

    def test_newton_failure_reports_residual(self, cleaning):
        with pytest.raises(InnerSolveError) as info:
            cleaning.lower_solution(np.full(30, 0.123), tol=1e-30, max_iter=2)
        assert info.value.residual > 0


class TestTables:
    def test_round_trip(self, tmp_path, cleaning):
        def dump(path, A, y):
            lines = ["label," + ",".join(f"f{j}" for j in range(A.shape[1])), "# comment"]
            lines += [f"{lab}," + ",".join(repr(float(v)) for v in row) for lab, row in zip(y, A)]
            path.write_text("\n".join(lines) + "\n")

        dump(tmp_path / "tr.csv", cleaning.A_tr, cleaning.y_tr)
        dump(tmp_path / "va.csv", cleaning.A_val, cleaning.y_val)
        A, y = load_feature_table(tmp_path / "tr.csv")
        assert np.array_equal(A, cleaning.A_tr) and np.array_equal(y, cleaning.y_tr)
        p = make_hypercleaning_from_tables(tmp_path / "tr.csv", tmp_path / "va.csv", ridge=0.1)
        x = np.zeros(30)
        assert p.phi(x) == pytest.approx(cleaning.phi(x), rel=1e-12)

    def test_ragged_rows(self, tmp_path):
        (tmp_path / "bad.csv").write_text("0,1.0,2.0\n1,3.0\n")
        with pytest.raises(ValueError):
            load_feature_table(tmp_path / "bad.csv")
        (tmp_path / "empty.csv").write_text("# nothing\n")
        with pytest.raises(ValueError):
            load_feature_table(tmp_path / "empty.csv")
