"""The algorithm set: artificial bee colony, CMA-ES and L-SHADE.

Every algorithm draws all randomness from one ``numpy.random.Generator``
seeded by the run seed and spends evaluations only through a
``BudgetedProblem``, which refuses anything past the budget and keeps the
best-so-far trajectory.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from errors import (BoundsViolationError, BudgetError, BudgetExhaustedError,
                    UnknownAlgorithmError)
from problems import InstanceDescriptor, ProblemInstance, evaluate_batch

logger = logging.getLogger(__name__)

TRAJECTORY_EVERY = 100

ABC_FOOD_SOURCES = 125
CMAES_POPSIZE = 40
CMAES_INITIAL_SIGMA = 3.0
CMAES_MAX_RESAMPLES = 100
CMAES_MAX_CONDITION = 1e14
LSHADE_INIT_SIZE = 200
LSHADE_MIN_SIZE = 4
LSHADE_MEMORY_SIZE = 6
LSHADE_P_BEST = 0.11
LSHADE_ARCHIVE_RATE = 2.6

RUN_CSV_HEADER = ['algorithm', 'class_id', 'instance_seed', 'run_seed', 'best_error', 'evals']


class AlgorithmId(IntEnum):
    ABC = 0
    CMAES = 1
    LSHADE = 2


_ALIASES = {'ABC': AlgorithmId.ABC, 'CMAES': AlgorithmId.CMAES, 'CMA-ES': AlgorithmId.CMAES,
            'LSHADE': AlgorithmId.LSHADE, 'L-SHADE': AlgorithmId.LSHADE}


def parse_algorithm(value) -> AlgorithmId:
    """Accept an AlgorithmId, its integer code, or a (case-insensitive) name."""
    if isinstance(value, AlgorithmId):
        return value
    if isinstance(value, str):
        key = value.strip().upper()
        if key in _ALIASES:
            return _ALIASES[key]
        if key.isdigit():
            value = int(key)
        else:
            raise UnknownAlgorithmError(f"Unknown algorithm {value!r}; expected one of ABC, CMAES, LSHADE")
    try:
        return AlgorithmId(int(value))
    except (TypeError, ValueError):
        raise UnknownAlgorithmError(f"Unknown algorithm id {value!r}; expected 0 (ABC), 1 (CMAES) or 2 (LSHADE)")


class BudgetedProblem:
    """An instance wrapped with an evaluation budget and best-so-far bookkeeping."""

    def __init__(self, instance: ProblemInstance, max_evals: int, checkpoint_every: int = TRAJECTORY_EVERY):
        if int(max_evals) < 0:
            raise BudgetError(f"Evaluation budget must be >= 0, got {max_evals}")
        self.instance = instance
        self.max_evals = int(max_evals)
        self.checkpoint_every = int(checkpoint_every)
        self.used_evals = 0
        self.best_error = float('inf')
        self.best_x: Optional[np.ndarray] = None
        self.trajectory: List[Tuple[int, float]] = []

    @property
    def remaining(self) -> int:
        return self.max_evals - self.used_evals

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Objective values for a batch of candidates, counted in row order."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if n > self.remaining:
            raise BudgetExhaustedError(
                f"Batch of {n} evaluations exceeds the remaining budget {self.remaining} "
                f"({self.used_evals}/{self.max_evals} used)")
        inst = self.instance
        if np.any(x < inst.lower) or np.any(x > inst.upper):
            raise BoundsViolationError(
                f"Candidate outside [{inst.lower[0]}, {inst.upper[0]}]^{inst.dim} submitted for evaluation")
        values = evaluate_batch(inst, x)
        if n == 0:
            return values

        errors = np.maximum(values - inst.f_opt, 0.0)
        running = np.minimum.accumulate(np.concatenate([[self.best_error], errors]))[1:]
        idx = int(np.argmin(errors))
        if errors[idx] < self.best_error:
            self.best_x = x[idx].copy()
        start = self.used_evals
        self.used_evals += n
        self.best_error = float(running[-1])

        every = self.checkpoint_every
        for count in range((start // every + 1) * every, self.used_evals + 1, every):
            self.trajectory.append((count, float(running[count - start - 1])))
        return values

    def finalize(self) -> List[Tuple[int, float]]:
        if self.used_evals and (not self.trajectory or self.trajectory[-1][0] != self.used_evals):
            self.trajectory.append((self.used_evals, self.best_error))
        return self.trajectory


@dataclass
class RunResult:
    algorithm: AlgorithmId
    seed: int
    best_error: float
    evals_used: int
    trajectory: List[Tuple[int, float]]
    descriptor: InstanceDescriptor
    population_sizes: List[int] = field(default_factory=list)

    def to_row(self) -> List[Any]:
        return [self.algorithm.name, self.descriptor.class_id, self.descriptor.seed, self.seed,
                repr(self.best_error), self.evals_used]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'algorithm': self.algorithm.name,
            'seed': self.seed,
            'best_error': self.best_error,
            'evals_used': self.evals_used,
            'trajectory': [list(p) for p in self.trajectory],
            'descriptor': self.descriptor.to_line(),
            'population_sizes': list(self.population_sizes),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunResult':
        return cls(algorithm=parse_algorithm(data['algorithm']), seed=int(data['seed']),
                   best_error=float(data['best_error']), evals_used=int(data['evals_used']),
                   trajectory=[(int(c), float(e)) for c, e in data['trajectory']],
                   descriptor=InstanceDescriptor.from_line(data['descriptor']),
                   population_sizes=[int(n) for n in data.get('population_sizes', [])])


def _finish(bp: BudgetedProblem, algorithm: AlgorithmId, seed: int,
            population_sizes: Optional[List[int]] = None) -> RunResult:
    trajectory = bp.finalize()
    logger.debug(f"{algorithm.name} seed={seed} on {bp.instance.descriptor.to_line()}: "
                 f"best error {bp.best_error:.3e} after {bp.used_evals}/{bp.max_evals} evaluations")
    return RunResult(algorithm=algorithm, seed=int(seed), best_error=bp.best_error,
                     evals_used=bp.used_evals, trajectory=list(trajectory),
                     descriptor=bp.instance.descriptor, population_sizes=population_sizes or [])


# ---------------------------------------------------------------------------
# artificial bee colony

def _abc_fitness(values: np.ndarray) -> np.ndarray:
    fit = np.empty_like(values)
    positive = values >= 0
    fit[positive] = 1.0 / (1.0 + values[positive])
    fit[~positive] = 1.0 + np.abs(values[~positive])
    return fit


def _abc_candidates(rng: np.random.Generator, foods: np.ndarray, sources: np.ndarray,
                    lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """One neighbour per source, differing from it in a single random coordinate."""
    n, dim = len(sources), foods.shape[1]
    rows = np.arange(n)
    partners = rng.integers(0, len(foods) - 1, size=n)
    partners += partners >= sources
    dims = rng.integers(0, dim, size=n)
    phi = rng.uniform(-1.0, 1.0, size=n)

    candidates = foods[sources].copy()
    own = foods[sources, dims]
    candidates[rows, dims] = own + phi * (own - foods[partners, dims])
    moved = candidates[rows, dims]
    bad = (moved < lower[dims]) | (moved > upper[dims])
    if bad.any():
        candidates[rows[bad], dims[bad]] = rng.uniform(lower[dims[bad]], upper[dims[bad]])
    return candidates


def _abc_greedy(foods, values, trials, sources, candidates, candidate_values):
    for k, i in enumerate(sources):
        if candidate_values[k] < values[i]:
            foods[i] = candidates[k]
            values[i] = candidate_values[k]
            trials[i] = 0
        else:
            trials[i] += 1


def run_abc(bp: BudgetedProblem, seed: int, food_sources: int = ABC_FOOD_SOURCES) -> RunResult:
    """Canonical ABC: employed, onlooker and scout phases over ``food_sources`` sources.

    Each cycle sends one employed bee per source and as many onlookers,
    picked by fitness-proportional roulette. A source whose trial counter
    exceeds ``food_sources * dim`` is abandoned (at most one per cycle).
    """
    if bp.remaining < food_sources:
        raise BudgetError(f"ABC needs at least {food_sources} evaluations to place its food sources, "
                          f"budget has {bp.remaining}")
    rng = np.random.default_rng(seed)
    inst = bp.instance
    lower, upper = inst.lower, inst.upper
    limit = food_sources * inst.dim

    foods = rng.uniform(lower, upper, size=(food_sources, inst.dim))
    values = bp.evaluate(foods)
    trials = np.zeros(food_sources, dtype=int)
    cycle = 0

    while bp.remaining > 0:
        sources = np.arange(min(food_sources, bp.remaining))
        candidates = _abc_candidates(rng, foods, sources, lower, upper)
        _abc_greedy(foods, values, trials, sources, candidates, bp.evaluate(candidates))
        if bp.remaining == 0:
            break

        fitness = _abc_fitness(values)
        sources = rng.choice(food_sources, size=min(food_sources, bp.remaining), p=fitness / fitness.sum())
        candidates = _abc_candidates(rng, foods, sources, lower, upper)
        _abc_greedy(foods, values, trials, sources, candidates, bp.evaluate(candidates))

        exhausted = int(np.argmax(trials))
        if trials[exhausted] > limit and bp.remaining > 0:
            foods[exhausted] = rng.uniform(lower, upper)
            values[exhausted] = bp.evaluate(foods[exhausted][None, :])[0]
            trials[exhausted] = 0
        cycle += 1
        if cycle % 100 == 0:
            logger.debug(f"ABC cycle {cycle}: best error {bp.best_error:.3e}, {bp.remaining} evaluations left")

    return _finish(bp, AlgorithmId.ABC, seed)


# ---------------------------------------------------------------------------
# CMA-ES

class CMAES:
    """(mu/mu_w, lambda)-CMA-ES state with an ask/tell interface."""

    def __init__(self, mean: np.ndarray, sigma: float, popsize: int = CMAES_POPSIZE,
                 sigma_cap: float = float('inf')):
        n = len(mean)
        self.dim = n
        self.lam = int(popsize)
        self.mu = self.lam // 2
        weights = np.log(self.lam / 2 + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = weights / weights.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 2 * self.mueff / self.lam + 0.3 + self.cs

        self.mean = np.array(mean, dtype=float)
        self.sigma = float(sigma)
        self.initial_sigma = float(sigma)
        self.sigma_cap = sigma_cap
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.evaluations = 0
        self.generation = 0
        self._decompose()

    def _decompose(self):
        self.C = (self.C + self.C.T) / 2.0
        if not np.all(np.isfinite(self.C)):
            logger.warning(f"CMA-ES covariance became non-finite at generation {self.generation}; resetting")
            self.C, self.pc, self.ps = np.eye(self.dim), np.zeros(self.dim), np.zeros(self.dim)
        eigenvalues, self.B = np.linalg.eigh(self.C)
        top = eigenvalues.max()
        if not top > 0:
            logger.warning(f"CMA-ES covariance lost positive definiteness at generation {self.generation}; resetting")
            self.C = np.eye(self.dim)
            eigenvalues, self.B = np.ones(self.dim), np.eye(self.dim)
            top = 1.0
        floor = top / CMAES_MAX_CONDITION
        if eigenvalues.min() < floor:
            eigenvalues = np.maximum(eigenvalues, floor)
            self.C = (self.B * eigenvalues) @ self.B.T
            self.C = (self.C + self.C.T) / 2.0
        self.eigenvalues = eigenvalues
        self.invsqrt = (self.B / np.sqrt(eigenvalues)) @ self.B.T

    def ask(self, rng: np.random.Generator, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
        """Sample lambda offspring; infeasible ones are resampled, then clamped."""
        scale = self.B * np.sqrt(self.eigenvalues)

        def draw(count):
            return self.mean + self.sigma * rng.standard_normal((count, self.dim)) @ scale.T

        offspring = draw(self.lam)
        for _ in range(CMAES_MAX_RESAMPLES):
            infeasible = np.any((offspring < lower) | (offspring > upper), axis=1)
            if not infeasible.any():
                break
            offspring[infeasible] = draw(int(infeasible.sum()))
        return np.clip(offspring, lower, upper)

    def tell(self, offspring: np.ndarray, values: np.ndarray):
        n = self.dim
        self.evaluations += len(values)
        self.generation += 1
        order = np.argsort(values, kind='stable')
        selected = offspring[order[:self.mu]]
        old_mean = self.mean
        self.mean = self.weights @ selected

        y = (self.mean - old_mean) / self.sigma
        self.ps = (1 - self.cs) * self.ps + np.sqrt(self.cs * (2 - self.cs) * self.mueff) * (self.invsqrt @ y)
        ps_norm2 = float(np.sum(self.ps ** 2))
        hsig = float(ps_norm2 / n / (1 - (1 - self.cs) ** (2 * self.evaluations / self.lam)) < 2 + 4.0 / (n + 1))
        self.pc = (1 - self.cc) * self.pc + np.sqrt(self.cc * (2 - self.cc) * self.mueff) * hsig * y

        steps = (selected - old_mean) / self.sigma
        c1a = self.c1 * (1 - (1 - hsig ** 2) * self.cc * (2 - self.cc))
        self.C = ((1 - c1a - self.cmu * self.weights.sum()) * self.C
                  + self.c1 * np.outer(self.pc, self.pc)
                  + self.cmu * (steps.T * self.weights) @ steps)

        self.sigma *= np.exp(min(1.0, self.cs / self.damps * (ps_norm2 / n - 1) / 2))
        if not np.isfinite(self.sigma):
            logger.warning(f"CMA-ES step size diverged at generation {self.generation}; resetting")
            self.sigma = self.initial_sigma
        self.sigma = float(np.clip(self.sigma, 1e-20, self.sigma_cap))
        self._decompose()


def run_cmaes(bp: BudgetedProblem, seed: int, popsize: int = CMAES_POPSIZE,
              on_generation: Optional[Callable[[CMAES], None]] = None) -> RunResult:
    """Restart-free CMA-ES from a uniform random mean with sigma = 3."""
    if bp.remaining < popsize:
        raise BudgetError(f"CMA-ES needs a budget of at least lambda={popsize}, got {bp.remaining}")
    rng = np.random.default_rng(seed)
    inst = bp.instance
    lower, upper = inst.lower, inst.upper
    span = float(np.max(upper - lower))
    es = CMAES(rng.uniform(lower, upper), CMAES_INITIAL_SIGMA, popsize=popsize, sigma_cap=1e3 * span)

    while bp.remaining > 0:
        offspring = es.ask(rng, lower, upper)
        if bp.remaining < es.lam:
            # last, partial generation: no update follows
            bp.evaluate(offspring[:bp.remaining])
            break
        es.tell(offspring, bp.evaluate(offspring))
        if on_generation:
            on_generation(es)
        if es.generation % 100 == 0:
            logger.debug(f"CMA-ES generation {es.generation}: sigma {es.sigma:.3e}, "
                         f"best error {bp.best_error:.3e}")

    return _finish(bp, AlgorithmId.CMAES, seed)


# ---------------------------------------------------------------------------
# L-SHADE

_TERMINAL = -1.0


def _lehmer_mean(values: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(weights * values ** 2) / np.sum(weights * values))


def run_lshade(bp: BudgetedProblem, seed: int, init_size: int = LSHADE_INIT_SIZE,
               min_size: int = LSHADE_MIN_SIZE, memory_size: int = LSHADE_MEMORY_SIZE,
               p_best: float = LSHADE_P_BEST, archive_rate: float = LSHADE_ARCHIVE_RATE) -> RunResult:
    """Success-history DE with current-to-pbest/1, an external archive and
    linear population size reduction from ``init_size`` to ``min_size``."""
    max_nfe = bp.remaining
    if max_nfe < init_size:
        raise BudgetError(f"L-SHADE needs a budget of at least N_init={init_size}, got {max_nfe}")
    rng = np.random.default_rng(seed)
    inst = bp.instance
    lower, upper, dim = inst.lower, inst.upper, inst.dim
    start = bp.used_evals

    pop = rng.uniform(lower, upper, size=(init_size, dim))
    fit = bp.evaluate(pop)
    memory_cr = np.full(memory_size, 0.5)
    memory_f = np.full(memory_size, 0.5)
    slot = 0
    archive = np.empty((0, dim))
    sizes = [init_size]

    while bp.remaining > 0:
        n = len(pop)
        idx = np.arange(n)
        r = rng.integers(0, memory_size, size=n)
        mu_cr = memory_cr[r]
        cr = np.clip(rng.normal(mu_cr, 0.1), 0.0, 1.0)
        cr[mu_cr == _TERMINAL] = 0.0
        f = memory_f[r] + 0.1 * rng.standard_cauchy(n)
        while np.any(f <= 0):
            redo = f <= 0
            f[redo] = memory_f[r[redo]] + 0.1 * rng.standard_cauchy(int(redo.sum()))
        f = np.minimum(f, 1.0)

        count = max(2, int(round(p_best * n)))
        top = np.argsort(fit, kind='stable')[:count]
        pbest = top[rng.integers(0, count, size=n)]
        r1 = rng.integers(0, n - 1, size=n)
        r1 += r1 >= idx
        union = np.vstack([pop, archive])
        r2 = rng.integers(0, len(union), size=n)
        clash = (r2 == idx) | (r2 == r1)
        while clash.any():
            r2[clash] = rng.integers(0, len(union), size=int(clash.sum()))
            clash = (r2 == idx) | (r2 == r1)

        fc = f[:, None]
        mutant = pop + fc * (pop[pbest] - pop) + fc * (pop[r1] - union[r2])
        cross = rng.random((n, dim)) < cr[:, None]
        cross[idx, rng.integers(0, dim, size=n)] = True
        trial = np.where(cross, mutant, pop)
        trial = np.where(trial < lower, (lower + pop) / 2.0, trial)
        trial = np.where(trial > upper, (upper + pop) / 2.0, trial)

        m = min(n, bp.remaining)
        trial_fit = bp.evaluate(trial[:m])
        improved = np.flatnonzero(trial_fit < fit[:m])
        accepted = np.flatnonzero(trial_fit <= fit[:m])
        if len(improved):
            archive = np.vstack([archive, pop[improved]])
            delta = fit[improved] - trial_fit[improved]
            weights = delta / delta.sum()
            s_cr, s_f = cr[improved], f[improved]
            if memory_cr[slot] == _TERMINAL or s_cr.max() == 0:
                memory_cr[slot] = _TERMINAL
            else:
                memory_cr[slot] = _lehmer_mean(s_cr, weights)
            memory_f[slot] = _lehmer_mean(s_f, weights)
            slot = (slot + 1) % memory_size
        pop[accepted] = trial[accepted]
        fit[accepted] = trial_fit[accepted]

        nfe = bp.used_evals - start
        target = max(min_size, int(round((min_size - init_size) / max_nfe * nfe + init_size)))
        if target < n:
            keep = np.argsort(fit, kind='stable')[:target]
            pop, fit = pop[keep], fit[keep]
        cap = int(round(archive_rate * len(pop)))
        if len(archive) > cap:
            archive = archive[np.sort(rng.choice(len(archive), size=cap, replace=False))]
        sizes.append(len(pop))

    logger.debug(f"L-SHADE population {init_size} -> {sizes[-1]} over {len(sizes) - 1} generations")
    return _finish(bp, AlgorithmId.LSHADE, seed, population_sizes=sizes)


# ---------------------------------------------------------------------------
# dispatch

_RUNNERS = {
    AlgorithmId.ABC: run_abc,
    AlgorithmId.CMAES: run_cmaes,
    AlgorithmId.LSHADE: run_lshade,
}


def run_algorithm(algorithm, bp: BudgetedProblem, seed: int) -> RunResult:
    return _RUNNERS[parse_algorithm(algorithm)](bp, seed)


def solve(algorithm, instance: ProblemInstance, budget: int, seed: int) -> RunResult:
    """Run one algorithm on a fresh budget over ``instance``."""
    return run_algorithm(algorithm, BudgetedProblem(instance, budget), seed)
