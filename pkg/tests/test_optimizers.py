import numpy as np
import pytest

from errors import BoundsViolationError, BudgetError, BudgetExhaustedError, UnknownAlgorithmError
from optimizers import (AlgorithmId, BudgetedProblem, RunResult, parse_algorithm, run_abc, run_algorithm,
                        run_cmaes, run_lshade, solve)
from problems import make_instance


@pytest.fixture
def sphere():
    return make_instance(1, 2, 1)


@pytest.fixture
def rastrigin():
    return make_instance(3, 5, 2)


class TestAlgorithmIds:
    @pytest.mark.parametrize('value,expected', [
        ('abc', AlgorithmId.ABC), ('CMA-ES', AlgorithmId.CMAES), ('l-shade', AlgorithmId.LSHADE),
        ('1', AlgorithmId.CMAES), (2, AlgorithmId.LSHADE), (AlgorithmId.ABC, AlgorithmId.ABC),
    ])
    def test_parse(self, value, expected):
        assert parse_algorithm(value) is expected

    @pytest.mark.parametrize('value', ['PSO', 3, '-1', None])
    def test_unknown(self, value):
        with pytest.raises(UnknownAlgorithmError):
            parse_algorithm(value)

    def test_codes_follow_argmin_order(self):
        assert AlgorithmId(int(np.argmin([1e-10, 0.5, 0.3]))) is AlgorithmId.ABC


class TestBudgetedProblem:
    def test_counts_and_best_so_far(self, sphere):
        bp = BudgetedProblem(sphere, 10)
        bp.evaluate(np.array([[1.0, 1.0], [2.0, 2.0]]))
        bp.evaluate(sphere.x_opt)
        assert bp.used_evals == 3
        assert bp.remaining == 7
        assert bp.best_error == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_array_equal(bp.best_x, sphere.x_opt)

    def test_refuses_batch_beyond_budget(self, sphere):
        bp = BudgetedProblem(sphere, 3)
        with pytest.raises(BudgetExhaustedError):
            bp.evaluate(np.zeros((4, 2)))
        assert bp.used_evals == 0

    def test_refuses_out_of_bounds(self, sphere):
        bp = BudgetedProblem(sphere, 3)
        with pytest.raises(BoundsViolationError):
            bp.evaluate(np.array([[6.0, 0.0]]))

    def test_negative_budget(self, sphere):
        with pytest.raises(BudgetError):
            BudgetedProblem(sphere, -1)

    def test_trajectory_checkpoints(self, sphere):
        bp = BudgetedProblem(sphere, 250)
        rng = np.random.default_rng(0)
        for _ in range(5):
            bp.evaluate(rng.uniform(-5.0, 5.0, size=(50, 2)))
        trajectory = bp.finalize()
        assert [count for count, _ in trajectory] == [100, 200, 250]
        errors = [error for _, error in trajectory]
        assert errors == sorted(errors, reverse=True)
        assert errors[-1] == bp.best_error


class TestBudgets:
    @pytest.mark.parametrize('runner,budget', [(run_abc, 1000), (run_cmaes, 1010), (run_lshade, 1000)])
    def test_exact_budget(self, rastrigin, runner, budget):
        bp = BudgetedProblem(rastrigin, budget)
        result = runner(bp, seed=3)
        assert result.evals_used == budget
        assert bp.used_evals == budget
        assert result.trajectory[-1] == (budget, result.best_error)

    @pytest.mark.parametrize('runner,budget', [(run_abc, 124), (run_cmaes, 39), (run_lshade, 199)])
    def test_budget_too_small(self, rastrigin, runner, budget):
        with pytest.raises(BudgetError):
            runner(BudgetedProblem(rastrigin, budget), seed=0)

    @pytest.mark.parametrize('algorithm', list(AlgorithmId))
    def test_deterministic(self, rastrigin, algorithm):
        a = solve(algorithm, rastrigin, 800, seed=11)
        b = solve(algorithm, rastrigin, 800, seed=11)
        assert a.best_error == b.best_error
        assert a.trajectory == b.trajectory

    def test_seed_matters(self, rastrigin):
        assert solve('CMAES', rastrigin, 800, 1).best_error != solve('CMAES', rastrigin, 800, 2).best_error


class TestLshade:
    def test_population_shrinks_to_minimum(self, rastrigin):
        result = run_lshade(BudgetedProblem(rastrigin, 3000), seed=0)
        sizes = result.population_sizes
        assert sizes[0] == 200
        assert sizes[-1] == 4
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))


class TestCmaes:
    def test_covariance_stays_symmetric(self, rastrigin):
        checks = []

        def inspect(es):
            checks.append(np.array_equal(es.C, es.C.T) and np.all(es.eigenvalues > 0))

        run_cmaes(BudgetedProblem(rastrigin, 4000), seed=0, on_generation=inspect)
        assert len(checks) == 100
        assert all(checks)


def test_run_result_dict(rastrigin):
    result = solve('ABC', rastrigin, 500, seed=4)
    restored = RunResult.from_dict(result.to_dict())
    assert restored.algorithm is AlgorithmId.ABC
    assert restored.best_error == result.best_error
    assert restored.descriptor == rastrigin.descriptor
    assert result.to_row()[:2] == ['ABC', 3]


@pytest.mark.slow
@pytest.mark.parametrize('algorithm', list(AlgorithmId))
def test_solves_sphere(algorithm):
    result = solve(algorithm, make_instance(1, 2, 1), 20000, seed=0)
    assert result.best_error < 1e-6


@pytest.mark.slow
def test_cmaes_solves_rotated_ellipsoid():
    result = solve('CMAES', make_instance(15, 10, 1), 100000, seed=0)
    assert result.best_error < 1e-8


@pytest.mark.slow
@pytest.mark.parametrize('algorithm', [AlgorithmId.CMAES, AlgorithmId.LSHADE])
def test_sphere_d10_median_over_seeds(algorithm):
    sphere = make_instance(1, 10, 1)
    errors = [solve(algorithm, sphere, 100000, seed=s).best_error for s in range(11)]
    assert np.median(errors) < 1e-8


@pytest.mark.slow
def test_abc_sphere_every_seed():
    sphere = make_instance(1, 2, 1)
    for s in range(11):
        result = run_algorithm(AlgorithmId.ABC, BudgetedProblem(sphere, 20000), seed=s)
        assert result.evals_used == 20000
        assert result.best_error < 1e-3
