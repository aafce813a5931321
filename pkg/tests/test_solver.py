import numpy as np
import pytest

from licalib.errors import ConvergenceError, InvalidArgumentError
from licalib.estimation.solver import (
    DampingOptions,
    NormalSystem,
    covariance_diagonal,
    levenberg_marquardt,
    observability_aware_step,
    schur_complement,
    solve_full,
    solve_tsvd,
    symmetric_spectrum,
)


def _system(information: np.ndarray, rhs: np.ndarray) -> NormalSystem:
    return NormalSystem(np.asarray(information, dtype=float), np.asarray(rhs, dtype=float), 0.0, len(rhs))


def _random_spd(size: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    jac = rng.normal(size=(3 * size, size))
    return jac.T @ jac


class _Rosenbrock:
    """Two residuals whose minimum sits at (1, 1)."""

    def __init__(self) -> None:
        self.linearized_costs: list[float] = []

    @staticmethod
    def _residuals(x: np.ndarray) -> np.ndarray:
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    def linearize(self, x: np.ndarray) -> NormalSystem:
        r = self._residuals(x)
        jac = np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
        system = NormalSystem(jac.T @ jac, -jac.T @ r, self.cost(x), 2)
        self.linearized_costs.append(system.cost)
        return system

    def cost(self, x: np.ndarray) -> float:
        return float(0.5 * np.sum(self._residuals(x) ** 2))

    def retract(self, x: np.ndarray, step: np.ndarray) -> np.ndarray:
        return x + step


class _Unreachable(_Rosenbrock):
    def retract(self, x: np.ndarray, step: np.ndarray) -> np.ndarray:
        raise InvalidArgumentError("outside the parameter domain")


def test_full_solve_matches_dense_solve() -> None:
    information = _random_spd(5)
    rhs = np.arange(5.0)
    expected = np.linalg.solve(information + 0.5 * np.eye(5), rhs)
    assert np.allclose(solve_full(_system(information, rhs), 0.5), expected)


def test_singular_system_falls_back_to_least_squares() -> None:
    step = solve_full(_system(np.diag([2.0, 0.0]), [4.0, 0.0]))
    assert np.allclose(step, [2.0, 0.0])


def test_spectrum_is_descending_and_non_negative() -> None:
    values, vectors = symmetric_spectrum(np.diag([1.0, 5.0, -1e-15]))
    assert list(values) == sorted(values, reverse=True)
    assert np.all(values >= 0.0)
    assert np.allclose(np.abs(vectors[:, 0]), [0.0, 1.0, 0.0])


def test_truncated_solve_freezes_weak_direction() -> None:
    result = solve_tsvd(_system(np.diag([100.0, 1.0, 1e-9]), [100.0, 2.0, 5.0]), epsilon=1e-3)
    assert result.rank == 2
    assert np.allclose(result.step, [1.0, 2.0, 0.0])
    assert result.dropped.shape == (1, 3)
    assert np.allclose(np.abs(result.dropped[0]), [0.0, 0.0, 1.0])
    assert result.dropped @ result.step == pytest.approx(0.0, abs=1e-12)


def test_truncation_of_every_direction_gives_zero_step() -> None:
    result = solve_tsvd(_system(np.diag([1e-6, 1e-7]), [1.0, 1.0]), epsilon=1.0)
    assert result.all_dropped
    assert np.allclose(result.step, 0.0)


def test_non_positive_threshold_rejected() -> None:
    with pytest.raises(InvalidArgumentError):
        solve_tsvd(_system(np.eye(2), [1.0, 1.0]), epsilon=0.0)


def test_schur_complement_matches_marginal_inverse() -> None:
    information = _random_spd(6, seed=1)
    keep = np.array([4, 5])
    reduced, *_ = schur_complement(information, keep)
    marginal = np.linalg.inv(information)[np.ix_(keep, keep)]
    assert np.allclose(np.linalg.inv(reduced), marginal)


def test_observability_step_equals_damped_solve_without_truncation() -> None:
    system = _system(_random_spd(8, seed=2), np.linspace(-1.0, 1.0, 8))
    step, info = observability_aware_step(system, np.array([5, 6, 7]), damping=0.1, relative=1e-12)
    assert info.rank == 3
    assert np.allclose(step, solve_full(system, 0.1))


def test_observability_step_never_moves_along_dropped_directions() -> None:
    rng = np.random.default_rng(3)
    jac = rng.normal(size=(40, 8))
    # columns 6 and 7 only ever appear as their sum
    jac[:, 7] = jac[:, 6]
    system = _system(jac.T @ jac, jac.T @ rng.normal(size=40))
    protected = np.array([5, 6, 7])
    step, info = observability_aware_step(system, protected, damping=1e-3, relative=1e-6)
    assert info.rank == 2
    assert info.dropped.shape == (1, 3)
    assert np.allclose(np.abs(info.dropped[0]), [0.0, np.sqrt(0.5), np.sqrt(0.5)])
    assert info.dropped @ step[protected] == pytest.approx(0.0, abs=1e-10)


def test_covariance_of_diagonal_system() -> None:
    variances = covariance_diagonal(_system(np.diag([4.0, 0.25, 1e-12]), np.zeros(3)))
    assert np.allclose(variances, [0.25, 4.0, 0.0])


def test_levenberg_marquardt_reaches_minimum_without_cost_increase() -> None:
    problem = _Rosenbrock()
    result = levenberg_marquardt(problem, np.array([-1.2, 1.0]), iterations=200)
    assert np.allclose(result.state, [1.0, 1.0], atol=1e-4)
    assert result.accepted > 0
    costs = problem.linearized_costs
    assert all(later <= earlier for earlier, later in zip(costs, costs[1:], strict=False))


def test_zero_gradient_converges_immediately() -> None:
    result = levenberg_marquardt(_Rosenbrock(), np.array([1.0, 1.0]), iterations=10)
    assert result.converged
    assert result.accepted == 0
    assert result.iterations == 1


def test_runaway_damping_raises() -> None:
    with pytest.raises(ConvergenceError):
        levenberg_marquardt(_Unreachable(), np.array([-1.2, 1.0]), iterations=5, options=DampingOptions())
