import numpy as np
import pytest

from sgdlimit.errors import DegenerateDataError
from sgdlimit.gradient_flow import on_manifold
from sgdlimit.loss_models import (
    MotorProblem,
    OlmProblem,
    QuadraticLoss,
    ScaledLoss,
    canonical_param,
    fd_step,
    fd_third_contraction,
    motor_loss_eval,
    motor_third_contraction,
    olm_generate,
    olm_loss_eval,
    olm_third_contraction,
    rotation,
)

from conftest import olm_point


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


def fd_gradient(loss, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (loss.value(x + e) - loss.value(x - e)) / (2 * h)
    return g


def fd_hessian(loss, x, h):
    H = np.empty((x.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        H[:, i] = (loss.gradient(x + e) - loss.gradient(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def random_sym(rng, D):
    A = rng.standard_normal((D, D))
    return A + A.T


MODELS = {
    "olm": lambda: olm_generate(4, 6, 2, seed=3),
    "olm_boolean": lambda: olm_generate(5, 8, 2, dist="boolean", seed=4),
    "motor5": lambda: MotorProblem(5),
    "motor8": lambda: MotorProblem(8, np.array([0.6, 0.8])),
}


@pytest.mark.parametrize("name", sorted(MODELS))
def test_derivative_chain(name):
    """value -> gradient -> hessian -> third contraction, on 20 random points."""
    loss = MODELS[name]()
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.standard_normal(loss.dim)
        h = fd_step(x)
        assert rel(loss.gradient(x), fd_gradient(loss, x, h)) < 1e-5
        assert rel(loss.hessian(x), fd_hessian(loss, x, h)) < 1e-4
        A = random_sym(rng, loss.dim)
        assert rel(loss.third_contraction(x, A), fd_third_contraction(loss, x, A)) < 1e-3


@pytest.mark.parametrize("name", sorted(MODELS))
def test_third_contraction_linear(name):
    loss = MODELS[name]()
    rng = np.random.default_rng(1)
    x = rng.standard_normal(loss.dim)
    A, B = random_sym(rng, loss.dim), random_sym(rng, loss.dim)
    lhs = loss.third_contraction(x, 2.0 * A - 3.0 * B)
    rhs = 2.0 * loss.third_contraction(x, A) - 3.0 * loss.third_contraction(x, B)
    assert rel(lhs, rhs) < 1e-12
    np.testing.assert_array_equal(loss.third_contraction(x, np.zeros((loss.dim, loss.dim))), 0.0)


class TestOlm:
    def test_generate_boolean_small(self):
        p = olm_generate(2, 2, 1, dist="boolean", seed=5)
        assert set(np.unique(p.Z)) <= {-1.0, 1.0}
        assert np.linalg.matrix_rank(p.Z) == 2
        np.testing.assert_array_equal(p.y, p.Z @ p.w_star)
        assert np.count_nonzero(p.w_star) == 1

    def test_generate_square_gaussian_full_rank(self):
        for seed in range(5):
            p = olm_generate(10, 10, 3, seed=seed)
            assert np.linalg.matrix_rank(p.Z) == 10

    def test_generate_deterministic(self):
        a, b = olm_generate(6, 9, 2, seed=11), olm_generate(6, 9, 2, seed=11)
        np.testing.assert_array_equal(a.Z, b.Z)
        np.testing.assert_array_equal(a.w_star, b.w_star)

    def test_sparsity_and_magnitudes(self):
        p = olm_generate(5, 20, 4, seed=2, magnitude_range=(0.5, 2.0))
        nz = p.w_star[p.w_star != 0]
        assert nz.size == 4
        assert np.all((np.abs(nz) >= 0.5) & (np.abs(nz) <= 2.0))

    def test_boolean_rank_failure(self):
        outcomes = []
        for seed in range(40):
            try:
                p = olm_generate(2, 2, 1, dist="boolean", seed=seed, max_retries=1)
                outcomes.append(np.linalg.matrix_rank(p.Z) == 2)
            except DegenerateDataError:
                outcomes.append(None)
        assert None in outcomes
        assert all(o for o in outcomes if o is not None)

    @pytest.mark.parametrize("kappa, d", [(0, 5), (5, 5)])
    def test_bad_sparsity(self, kappa, d):
        with pytest.raises(ValueError):
            olm_generate(3, d, kappa)

    def test_interpolating_point(self):
        p = olm_generate(3, 5, 2, seed=0)
        x = canonical_param(p.w_star)
        v, g, _ = olm_loss_eval(p, x)
        assert v == pytest.approx(0.0, abs=1e-28)
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_hand_evaluation(self):
        p = OlmProblem(np.array([[1.0]]), np.array([0.0]), np.array([0.0]), 0)
        v, g, _ = olm_loss_eval(p, np.array([1.0, 0.0]))
        assert v == pytest.approx(0.5)
        np.testing.assert_allclose(g, [2.0, 0.0])

    def test_hessian_on_manifold(self, olm_small, olm_small_points):
        p = olm_small
        for x in olm_small_points:
            u, v = p.split(x)
            rows = np.concatenate([p.Z * u, -p.Z * v], axis=1)
            expected = 4.0 / p.n * rows.T @ rows
            np.testing.assert_allclose(p.hessian(x), expected, atol=1e-10)

    def test_third_contraction_unit_direction_on_manifold(self, olm_small, olm_small_points):
        # d/du_j of H[u_j, u_j]: 8/n sum z^2 u_j from the Gauss-Newton part plus
        # 4/n sum z^2 u_j from the derivative of the residual term
        p = olm_small
        x = olm_small_points[0]
        u, v = p.split(x)
        s = (p.Z**2).sum(axis=0)
        for j in range(p.d):
            A = np.zeros((p.dim, p.dim))
            A[j, j] = 1.0
            out = olm_third_contraction(p, x, A)
            assert out[j] == pytest.approx(12.0 / p.n * s[j] * u[j], rel=1e-9)
            assert rel(out, fd_third_contraction(p, x, A)) < 1e-6

    def test_rank_on_manifold(self, olm_small, olm_small_points):
        for x in olm_small_points:
            assert np.linalg.norm(olm_small.gradient(x)) <= 1e-10
            assert on_manifold(olm_small, x).rank == olm_small.n

    def test_text_round_trip(self, tmp_path):
        p = olm_generate(4, 7, 2, seed=9)
        path = tmp_path / "olm.txt"
        p.save(path)
        q = OlmProblem.load(path)
        np.testing.assert_array_equal(p.Z, q.Z)
        np.testing.assert_array_equal(p.w_star, q.w_star)
        np.testing.assert_array_equal(p.y, q.y)
        assert (q.sparsity, q.seed) == (2, 9)
        assert p.to_text().splitlines()[0].split() == ["4", "7", "2", "9"]

    def test_batched_evaluation(self, rng):
        p = olm_generate(3, 4, 1, seed=0)
        X = rng.standard_normal((6, p.dim))
        np.testing.assert_allclose(p.value(X), [p.value(x) for x in X])
        np.testing.assert_allclose(p.gradient(X), [p.gradient(x) for x in X])


class TestCanonicalParam:
    def test_example(self):
        np.testing.assert_array_equal(canonical_param(np.array([4.0, -9.0])), [2.0, 0.0, 0.0, 3.0])

    def test_zero(self):
        np.testing.assert_array_equal(canonical_param(np.zeros(2)), np.zeros(4))

    def test_round_trip(self, rng):
        w = rng.standard_normal(10)
        x = canonical_param(w)
        u, v = x[:10], x[10:]
        np.testing.assert_allclose(u * u - v * v, w, rtol=1e-15, atol=1e-15)
        np.testing.assert_array_equal(u * v, 0.0)


class TestMotor:
    def test_zero_on_circle(self, motor5):
        v, g, _ = motor_loss_eval(motor5, motor5.circle_point(0.0))
        assert v == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_value_vanishes_on_whole_circle(self, motor5):
        for th in np.linspace(0, 2 * np.pi, 13):
            assert motor5.value(motor5.circle_point(th)) == pytest.approx(0.0, abs=1e-30)

    def test_hessian_on_circle(self):
        m = MotorProblem(7)
        for th in np.linspace(0, 2 * np.pi, 9):
            x = m.circle_point(th)
            H = m.hessian(x)
            np.testing.assert_allclose(H[:2, :2], np.outer(x[:2], x[:2]), atol=1e-15)
            np.testing.assert_allclose(np.diag(H)[2:], 2 + m.directions @ x[:2])
            np.testing.assert_array_equal(H[:2, 2:], 0.0)
            assert on_manifold(m, x).rank == m.dim - 1

    def test_directions_are_rotations(self):
        m = MotorProblem(6, np.array([0.6, 0.8]))
        for j, d in enumerate(m.directions):
            np.testing.assert_allclose(d, rotation(m.alpha * j) @ m.v_unit, atol=1e-15)
        assert m.alpha == pytest.approx(2 * np.pi / 4)

    def test_third_contraction_fd(self, motor5, rng):
        for th in (0.0, 1.0, 2.5):
            x = motor5.circle_point(th)
            A = random_sym(rng, 5)
            assert rel(motor_third_contraction(motor5, x, A), fd_third_contraction(motor5, x, A)) < 1e-3

    def test_noise_variances(self, motor5):
        x = motor5.circle_point(0.4)
        w = np.array([x[1], -x[0]])
        c = 1 + motor5.directions @ w
        h = 2 + motor5.directions @ x[:2]
        var = motor5.noise_variances(x)
        np.testing.assert_array_equal(var[:2], 0.0)
        np.testing.assert_allclose(var[2:], c * h)

    def test_noise_variances_clamped(self, motor5):
        x = np.array([3.0, 0.0, 0.0, 0.0, 0.0])
        assert np.all(motor5.noise_variances(x) >= 0)

    @pytest.mark.parametrize("kwargs", [{"dim": 4}, {"v_unit": np.array([1.0, 1.0])}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MotorProblem(**kwargs)


class TestGenericLosses:
    def test_quadratic_fd_third_is_zero(self, rng):
        A = random_sym(rng, 4)
        q = QuadraticLoss(A @ A.T)
        x = rng.standard_normal(4)
        np.testing.assert_allclose(fd_third_contraction(q, x, random_sym(rng, 4)), 0.0, atol=1e-6)

    def test_scaled_loss(self, rng):
        m = MotorProblem(5)
        s = ScaledLoss(m, 2.0)
        x = rng.standard_normal(5)
        A = random_sym(rng, 5)
        assert s.value(x) == pytest.approx(2 * m.value(x))
        np.testing.assert_allclose(s.hessian(x), 2 * m.hessian(x))
        np.testing.assert_allclose(s.third_contraction(x, A), 2 * m.third_contraction(x, A))
        assert s.manifold_rank == m.manifold_rank

    def test_fd_matches_analytic_on_olm_random_points(self, rng):
        p = olm_generate(3, 4, 1, seed=2)
        for _ in range(3):
            x = rng.standard_normal(p.dim)
            A = random_sym(rng, p.dim)
            assert rel(fd_third_contraction(p, x, A), p.third_contraction(x, A)) < 1e-3
