import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from errors import (DimensionMismatchError, FileFormatError,
                    InvalidDimensionError, UnknownClassError)

logger = logging.getLogger(__name__)

DEFAULT_SUITE_SIZE = 12
DEFAULT_BOUNDS = (-5.0, 5.0)
OPTIMUM_BOX_FRACTION = 0.8
FOPT_RANGE = (-100.0, 100.0)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed derived from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)
    return int(state[0]) & 0x7FFF_FFFF_FFFF_FFFF


def _conditioning(dim: int, base: float) -> np.ndarray:
    return base ** np.linspace(0.0, 1.0, dim)


def _rest(z: np.ndarray) -> np.ndarray:
    return z[:, 1:] if z.shape[1] > 1 else np.zeros((z.shape[0], 0))


# Base formulas take Z with one row per candidate, already shifted and
# rotated (Z = R(x - x_opt)), and return g(Z) with g(0) = 0 as global minimum.

def _sphere(z, inst):
    return np.sum(z ** 2, axis=1)


def _ellipsoid(z, inst):
    return np.sum(_conditioning(z.shape[1], 1e6) * z ** 2, axis=1)


def _rastrigin(z, inst):
    return np.sum(z ** 2 + 10.0 * (1.0 - np.cos(2.0 * np.pi * z)), axis=1)


def _rosenbrock(z, inst):
    u = z + 1.0
    if z.shape[1] == 1:
        return (u[:, 0] - 1.0) ** 2
    head, tail = u[:, :-1], u[:, 1:]
    return np.sum(100.0 * (head ** 2 - tail) ** 2 + (head - 1.0) ** 2, axis=1)


def _ackley(z, inst):
    rms = np.sqrt(np.mean(z ** 2, axis=1))
    cos_mean = np.mean(np.cos(2.0 * np.pi * z), axis=1)
    return 20.0 * (1.0 - np.exp(-0.2 * rms)) + (np.exp(1.0) - np.exp(cos_mean))


def _griewank(z, inst):
    w = 20.0 * z
    idx = np.sqrt(np.arange(1, z.shape[1] + 1, dtype=float))
    return 1.0 + np.sum(w ** 2, axis=1) / 4000.0 - np.prod(np.cos(w / idx), axis=1)


def _schwefel(z, inst):
    # Schwefel problem 1.2 (double sum)
    return np.sum(np.cumsum(z, axis=1) ** 2, axis=1)


_WEIERSTRASS_K = np.arange(12, dtype=float)
_WEIERSTRASS_A = 0.5 ** _WEIERSTRASS_K
_WEIERSTRASS_2PI_B = 2.0 * np.pi * 3.0 ** _WEIERSTRASS_K


def _weierstrass(z, inst):
    terms = _WEIERSTRASS_A * np.cos(_WEIERSTRASS_2PI_B * (z[:, :, None] + 0.5))
    reference = np.sum(_WEIERSTRASS_A * np.cos(_WEIERSTRASS_2PI_B * 0.5))
    return np.sum(np.sum(terms, axis=2) - reference, axis=1)


def _schaffer_f7(z, inst):
    if z.shape[1] == 1:
        s = np.abs(z)
    else:
        s = np.sqrt(z[:, :-1] ** 2 + z[:, 1:] ** 2)
    root = np.sqrt(s)
    return np.mean(root + root * np.sin(50.0 * s ** 0.2) ** 2, axis=1) ** 2


def _different_powers(z, inst):
    dim = z.shape[1]
    exponents = 2.0 + 4.0 * np.linspace(0.0, 1.0, dim) if dim > 1 else np.array([2.0])
    return np.sqrt(np.sum(np.abs(z) ** exponents, axis=1))


def _linear_slope(z, inst):
    x_opt = inst.x_opt
    x = z + x_opt
    # coordinates beyond the optimum corner count as the corner itself
    x = np.where(x * x_opt > x_opt * x_opt, x_opt, x)
    scales = inst.params['slope_scales']
    return np.sum(x * scales, axis=1) + np.sum(np.abs(scales) * np.abs(x_opt))


def _gallagher(z, inst):
    peaks = inst.params['peak_locations']
    heights = inst.params['peak_heights']
    scales = inst.params['peak_scales']
    diff = z[:, None, :] - peaks[None, :, :]
    exponent = -0.5 / z.shape[1] * np.sum(scales[None, :, :] * diff ** 2, axis=2)
    best_peak = np.max(heights[None, :] * np.exp(exponent), axis=1)
    return (10.0 - best_peak) ** 2


def _attractive_sector(z, inst):
    s = np.where(z > 0, 100.0, 1.0)
    return np.sum((s * z) ** 2, axis=1) ** 0.9


def _step_ellipsoid(z, inst):
    rounded = np.where(np.abs(z) > 0.5, np.floor(0.5 + z), np.floor(0.5 + 10.0 * z) / 10.0)
    weighted = np.sum(_conditioning(z.shape[1], 100.0) * rounded ** 2, axis=1)
    return 0.1 * np.maximum(np.abs(z[:, 0]) / 1e4, weighted)


def _discus(z, inst):
    return 1e6 * z[:, 0] ** 2 + np.sum(_rest(z) ** 2, axis=1)


def _bent_cigar(z, inst):
    return z[:, 0] ** 2 + 1e6 * np.sum(_rest(z) ** 2, axis=1)


def _sharp_ridge(z, inst):
    return z[:, 0] ** 2 + 100.0 * np.sqrt(np.sum(_rest(z) ** 2, axis=1))


def _levy(z, inst):
    w = 1.0 + z / 4.0
    first = np.sin(np.pi * w[:, 0]) ** 2
    head = w[:, :-1]
    middle = np.sum((head - 1.0) ** 2 * (1.0 + 10.0 * np.sin(np.pi * head + 1.0) ** 2), axis=1)
    last = (w[:, -1] - 1.0) ** 2 * (1.0 + np.sin(2.0 * np.pi * w[:, -1]) ** 2)
    return first + middle + last


def _zakharov(z, inst):
    weights = 0.5 * np.arange(1, z.shape[1] + 1, dtype=float)
    linear = np.sum(z * weights, axis=1)
    return np.sum(z ** 2, axis=1) + linear ** 2 + linear ** 4


def _salomon(z, inst):
    r = np.sqrt(np.sum(z ** 2, axis=1))
    return 1.0 - np.cos(2.0 * np.pi * r) + 0.1 * r


_KATSUURA_POW2 = 2.0 ** np.arange(1, 33)


def _katsuura(z, inst):
    dim = z.shape[1]
    scaled = z[:, :, None] * _KATSUURA_POW2
    inner = np.sum(np.abs(scaled - np.round(scaled)) / _KATSUURA_POW2, axis=2)
    factors = (1.0 + np.arange(1, dim + 1) * inner) ** (10.0 / dim ** 1.2)
    return 10.0 / dim ** 2 * (np.prod(factors, axis=1) - 1.0)


def _schwefel_222(z, inst):
    a = np.abs(z)
    return np.sum(a, axis=1) + np.prod(a, axis=1)


def _slope_params(rng: np.random.Generator, dim: int, x_opt: np.ndarray) -> Dict[str, Any]:
    return {'slope_scales': -np.sign(x_opt) * _conditioning(dim, 10.0)}


def _gallagher_params(rng: np.random.Generator, dim: int, x_opt: np.ndarray,
                      peaks: int = 101) -> Dict[str, Any]:
    locations = rng.uniform(-5.0, 5.0, size=(peaks, dim))
    locations[0] = 0.0
    heights = np.concatenate([[10.0], np.linspace(1.1, 9.1, peaks - 1)])
    conditions = np.concatenate([[1000.0 ** 0.5], 1000.0 ** rng.permutation(np.linspace(0.0, 1.0, peaks - 1))])
    exponents = np.linspace(-0.5, 0.5, dim)
    scales = np.vstack([c ** rng.permutation(exponents) for c in conditions])
    return {'peak_locations': locations, 'peak_heights': heights, 'peak_scales': scales}


@dataclass(frozen=True)
class FunctionClass:
    id: int
    name: str
    base: Callable[[np.ndarray, 'ProblemInstance'], np.ndarray] = field(repr=False)
    separable: bool = False
    rotation_invariant: bool = False
    corner_optimum: bool = False
    make_params: Optional[Callable[..., Dict[str, Any]]] = field(default=None, repr=False)


_SUITE: List[FunctionClass] = [
    FunctionClass(1, 'Sphere', _sphere, separable=True, rotation_invariant=True),
    FunctionClass(2, 'Ellipsoid', _ellipsoid, separable=True),
    FunctionClass(3, 'Rastrigin', _rastrigin, separable=True),
    FunctionClass(4, 'Rosenbrock', _rosenbrock),
    FunctionClass(5, 'Ackley', _ackley),
    FunctionClass(6, 'Griewank', _griewank),
    FunctionClass(7, 'Schwefel', _schwefel),
    FunctionClass(8, 'Weierstrass', _weierstrass),
    FunctionClass(9, 'SchafferF7', _schaffer_f7),
    FunctionClass(10, 'DifferentPowers', _different_powers),
    FunctionClass(11, 'LinearSlope', _linear_slope, separable=True, corner_optimum=True,
                  make_params=_slope_params),
    FunctionClass(12, 'Gallagher', _gallagher, make_params=_gallagher_params),
    FunctionClass(13, 'AttractiveSector', _attractive_sector),
    FunctionClass(14, 'StepEllipsoid', _step_ellipsoid),
    FunctionClass(15, 'RotatedEllipsoid', _ellipsoid),
    FunctionClass(16, 'Discus', _discus),
    FunctionClass(17, 'BentCigar', _bent_cigar),
    FunctionClass(18, 'SharpRidge', _sharp_ridge),
    FunctionClass(19, 'RotatedRastrigin', _rastrigin),
    FunctionClass(20, 'Levy', _levy),
    FunctionClass(21, 'Zakharov', _zakharov),
    FunctionClass(22, 'Salomon', _salomon, rotation_invariant=True),
    FunctionClass(23, 'Katsuura', _katsuura),
    FunctionClass(24, 'Schwefel222', _schwefel_222),
]
_BY_ID = {fc.id: fc for fc in _SUITE}


def suite_list(count: Optional[int] = None) -> List[FunctionClass]:
    """Ordered function classes with ids 1..count (default 12, at most 24)."""
    count = DEFAULT_SUITE_SIZE if count is None else count
    if not 1 <= count <= len(_SUITE):
        raise UnknownClassError(f"Suite size must be in 1..{len(_SUITE)}, got {count}")
    return list(_SUITE[:count])


def get_class(class_id: int) -> FunctionClass:
    try:
        return _BY_ID[int(class_id)]
    except (KeyError, TypeError, ValueError):
        raise UnknownClassError(f"Unknown function class id: {class_id}")


def random_rotation(dim: int, seed: int) -> np.ndarray:
    """Seeded orthogonal matrix: QR of a Gaussian matrix with sign-corrected diagonal."""
    if dim < 1:
        raise InvalidDimensionError(f"Rotation dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass(frozen=True)
class InstanceDescriptor:
    class_id: int
    dim: int
    seed: int

    def to_line(self) -> str:
        return f"{self.class_id} {self.dim} {self.seed}"

    @classmethod
    def from_line(cls, line: str) -> 'InstanceDescriptor':
        parts = line.split()
        if len(parts) != 3:
            raise FileFormatError(f"Instance descriptor needs 'class_id dim seed', got {line!r}")
        try:
            return cls(int(parts[0]), int(parts[1]), int(parts[2]))
        except ValueError:
            raise FileFormatError(f"Instance descriptor fields must be integers: {line!r}")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    function_class: FunctionClass
    dim: int
    seed: int
    x_opt: np.ndarray
    rotation: np.ndarray
    f_opt: float
    lower: np.ndarray
    upper: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def class_id(self) -> int:
        return self.function_class.id

    @property
    def descriptor(self) -> InstanceDescriptor:
        return InstanceDescriptor(self.class_id, self.dim, self.seed)

    def transform(self, x: np.ndarray) -> np.ndarray:
        shifted = x - self.x_opt
        if self.function_class.separable:
            return shifted
        # explicit per-row reduction keeps every row's result independent of batch size
        return np.sum(shifted[:, None, :] * self.rotation[None, :, :], axis=2)

    def __repr__(self):
        return (f"ProblemInstance({self.function_class.name}, dim={self.dim}, "
                f"seed={self.seed}, f_opt={self.f_opt:.6g})")


@dataclass(frozen=True)
class Fitness:
    value: float
    error: float


def make_instance(class_id: int, dim: int, seed: int,
                  bounds: Tuple[float, float] = DEFAULT_BOUNDS) -> ProblemInstance:
    fc = get_class(class_id)
    if dim < 1:
        raise InvalidDimensionError(f"Problem dimension must be >= 1, got {dim}")
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo < hi:
        raise InvalidDimensionError(f"Bounds must satisfy lower < upper, got {bounds}")

    rng = np.random.default_rng(derive_seed(fc.id, dim, seed))
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    if fc.corner_optimum:
        signs = np.where(rng.uniform(-1.0, 1.0, dim) >= 0, 1.0, -1.0)
        x_opt = center + half * signs
    else:
        x_opt = rng.uniform(center - OPTIMUM_BOX_FRACTION * half, center + OPTIMUM_BOX_FRACTION * half, dim)
    f_opt = float(rng.uniform(*FOPT_RANGE))
    rotation = np.eye(dim) if fc.separable else random_rotation(dim, derive_seed(fc.id, dim, seed, 1))
    params = fc.make_params(rng, dim, x_opt) if fc.make_params else {}

    for array in [x_opt, rotation, *[v for v in params.values() if isinstance(v, np.ndarray)]]:
        array.setflags(write=False)
    lower, upper = np.full(dim, lo), np.full(dim, hi)
    lower.setflags(write=False)
    upper.setflags(write=False)
    logger.debug(f"Instance {fc.name} D={dim} seed={seed}: f_opt={f_opt:.4f}")
    return ProblemInstance(fc, dim, int(seed), x_opt, rotation, f_opt, lower, upper, params)


def instance_from_descriptor(descriptor: InstanceDescriptor) -> ProblemInstance:
    return make_instance(descriptor.class_id, descriptor.dim, descriptor.seed)


def evaluate_batch(inst: ProblemInstance, x: np.ndarray) -> np.ndarray:
    """Objective values for every row of x (no clamping, no budget accounting)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != inst.dim:
        raise DimensionMismatchError(
            f"Expected candidates of shape (n, {inst.dim}), got {x.shape}")
    z = inst.transform(x)
    return inst.function_class.base(z, inst) + inst.f_opt


def evaluate(inst: ProblemInstance, x) -> Fitness:
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.dim,):
        raise DimensionMismatchError(f"Expected a {inst.dim}-vector, got shape {x.shape}")
    value = float(evaluate_batch(inst, x[None, :])[0])
    return Fitness(value=value, error=max(value - inst.f_opt, 0.0))
