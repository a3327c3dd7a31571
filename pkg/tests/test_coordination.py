import itertools

import numpy as np
import pytest

from fedmoe.federation.coordination import (
    compose_coordinated_update,
    coordinate,
    objective,
    project_simplex,
    solve_conflict_weights,
)


def grid_minimum(deltas: np.ndarray, mean_delta: np.ndarray, c: float, resolution: float = 1e-3) -> float:
    """Dense simplex grid search; the independent oracle for the solver."""
    m = deltas.shape[0]
    steps = int(round(1.0 / resolution))
    if m == 1:
        weights = np.array([[1.0]])
    elif m == 2:
        w0 = np.linspace(0.0, 1.0, steps + 1)
        weights = np.stack([w0, 1.0 - w0], axis=1)
    elif m == 3:
        idx = np.arange(steps + 1)
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        mask = ii + jj <= steps
        a = ii[mask] / steps
        b = jj[mask] / steps
        weights = np.stack([a, b, 1.0 - a - b], axis=1)
    else:
        raise ValueError("grid oracle supports at most 3 deltas")
    gram = deltas @ deltas.T
    lin = deltas @ mean_delta
    phi = c * c * float(mean_delta @ mean_delta)
    quad = np.einsum("pi,ij,pj->p", weights, gram, weights)
    values = weights @ lin + np.sqrt(phi) * np.sqrt(np.maximum(quad, 0.0))
    return float(values.min())


class TestProjection:
    def test_inside_point_unchanged(self):
        w = np.array([0.2, 0.3, 0.5])
        assert np.allclose(project_simplex(w), w)

    def test_projection_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v = rng.normal(0, 3, int(rng.integers(1, 9)))
            p = project_simplex(v)
            assert (p >= 0).all()
            assert abs(p.sum() - 1.0) < 1e-9

    def test_matches_bruteforce_projection(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            v = rng.normal(0, 2, 4)
            p = project_simplex(v)
            # oracle: dense search over the simplex grid
            best, best_d = None, np.inf
            steps = 60
            for a in range(steps + 1):
                for b in range(steps + 1 - a):
                    for c in range(steps + 1 - a - b):
                        d = steps - a - b - c
                        w = np.array([a, b, c, d]) / steps
                        dist = float(((w - v) ** 2).sum())
                        if dist < best_d:
                            best, best_d = w, dist
            assert float(((p - v) ** 2).sum()) <= best_d + 1e-9


class TestSolver:
    def test_single_delta_closed_form(self):
        delta = np.array([3.0, 4.0])
        result = solve_conflict_weights([delta], delta, c=0.5)
        assert np.array_equal(result.weights, [1.0])
        assert np.array_equal(result.u_w, delta)
        assert np.sqrt(result.phi) == pytest.approx(2.5)
        assert result.objective == pytest.approx(37.5)

    def test_opposite_deltas_cancel(self):
        d = np.array([1.0, -2.0, 0.5])
        result = coordinate([d, -d], c=0.5)
        assert result.phi == pytest.approx(0.0)
        assert np.linalg.norm(result.u_star) == pytest.approx(0.0)

    def test_all_zero_deltas_degenerate(self):
        result = coordinate([np.zeros(3), np.zeros(3)], c=0.4)
        assert np.array_equal(result.u_star, np.zeros(3))
        assert result.objective == 0.0

    def test_matches_grid_search(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            m = int(rng.integers(1, 4))
            dim = int(rng.integers(2, 13))
            deltas = rng.normal(0, 10.0 ** rng.uniform(-1, 1), (m, dim))
            c = float(rng.uniform(0, 0.9))
            mean_delta = deltas.mean(axis=0)
            result = solve_conflict_weights(list(deltas), mean_delta, c)
            assert result.objective - grid_minimum(deltas, mean_delta, c) < 1e-4


class TestCompose:
    def test_zero_radius_returns_mean(self):
        rng = np.random.default_rng(2)
        deltas = [rng.normal(0, 1, 6) for _ in range(4)]
        result = coordinate(deltas, c=0.0)
        assert np.array_equal(result.u_star, result.mean_delta)

    def test_single_delta_scaling(self):
        delta = np.array([1.0, 2.0, 2.0])
        for c in (0.1, 0.4, 0.8):
            result = coordinate([delta], c=c)
            assert np.allclose(result.u_star, (1.0 + c) * delta, atol=1e-12)

    def test_ball_boundary_tightness(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = int(rng.integers(2, 9))
            deltas = [rng.normal(0, 2, 10) for _ in range(m)]
            c = float(rng.uniform(0.05, 0.9))
            result = coordinate(deltas, c)
            if np.linalg.norm(result.u_w) > 1e-12:
                radius = np.linalg.norm(result.u_star - result.mean_delta)
                assert radius == pytest.approx(c * np.linalg.norm(result.mean_delta), abs=1e-6)

    def test_worst_pair_improvement(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            m = int(rng.integers(2, 7))
            deltas = [rng.normal(0, 1, 8) for _ in range(m)]
            result = coordinate(deltas, c=0.4)
            at_star = min(float(d @ result.u_star) for d in deltas)
            at_mean = min(float(d @ result.mean_delta) for d in deltas)
            assert at_star >= at_mean - 1e-6

    def test_continuity_in_c(self):
        rng = np.random.default_rng(5)
        deltas = [rng.normal(0, 1, 5) for _ in range(3)]
        norms = []
        for c in (0.2, 0.1, 0.05, 0.01, 0.001):
            result = coordinate(deltas, c)
            norms.append(np.linalg.norm(result.u_star - result.mean_delta))
        assert all(a > b for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1e-2
        exact = coordinate(deltas, 0.0)
        assert np.array_equal(exact.u_star, exact.mean_delta)


class TestObjectiveHelper:
    def test_matches_solver_value(self):
        rng = np.random.default_rng(6)
        deltas = rng.normal(0, 1, (3, 5))
        mean_delta = deltas.mean(axis=0)
        result = solve_conflict_weights(list(deltas), mean_delta, 0.3)
        assert objective(result.weights, deltas, mean_delta, 0.3) == pytest.approx(result.objective)
