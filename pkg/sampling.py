import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from database import atomic_write_bytes
from errors import (DimensionMismatchError, FileFormatError, MissingInputError,
                    NonFiniteFitnessError, SampleSizeError, ShapeError)
from problems import DEFAULT_BOUNDS, InstanceDescriptor, ProblemInstance, evaluate_batch

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b'LSIM'
IMAGE_VERSION = 1
_IMAGE_HEADER = struct.Struct('<4sHH')

SAMPLE_MODES = ('grid', 'random')


def perfect_square_side(n: int) -> int:
    side = math.isqrt(n) if n >= 0 else -1
    if side < 0 or side * side != n:
        raise SampleSizeError(f"N={n} is not a perfect square")
    return side


def default_mode(dim: int) -> str:
    """Grid for 2-D problems (a true raster), uniform-random otherwise."""
    return 'grid' if dim == 2 else 'random'


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    coords: np.ndarray
    mode: str
    seed: int
    bounds: Tuple[float, float]

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def side(self) -> int:
        return perfect_square_side(self.n)

    def digest(self) -> str:
        """Content hash recorded in manifests to prove all images share these coordinates."""
        h = hashlib.sha256()
        h.update(struct.pack('<QQ', *self.coords.shape))
        h.update(np.ascontiguousarray(self.coords, dtype='<f8').tobytes())
        return h.hexdigest()[:16]


def make_sample_matrix(n: int, dim: int, bounds: Tuple[float, float] = DEFAULT_BOUNDS,
                       mode: Optional[str] = None, seed: int = 0) -> SampleMatrix:
    side = perfect_square_side(n)
    if side < 2:
        raise SampleSizeError(f"N={n} gives an image side below 2")
    if dim < 1:
        raise DimensionMismatchError(f"Sample dimension must be >= 1, got {dim}")
    mode = mode or default_mode(dim)
    lo, hi = float(bounds[0]), float(bounds[1])

    if mode == 'grid':
        k = round(n ** (1.0 / dim))
        if k ** dim != n:
            raise SampleSizeError(f"Grid sampling needs N = k^D; N={n} is not a power {dim} of an integer")
        axis = np.linspace(lo, hi, k)
        mesh = np.meshgrid(*([axis] * dim), indexing='ij')
        coords = np.stack([m.ravel() for m in mesh], axis=1)
    elif mode == 'random':
        rng = np.random.default_rng(seed)
        coords = rng.uniform(lo, hi, size=(n, dim))
    else:
        raise SampleSizeError(f"Unknown sampling mode {mode!r}; expected one of {SAMPLE_MODES}")

    coords.setflags(write=False)
    logger.debug(f"Built {mode} sample matrix N={n} D={dim} seed={seed}")
    return SampleMatrix(coords=coords, mode=mode, seed=int(seed), bounds=(lo, hi))


@dataclass(frozen=True, eq=False)
class FitnessVector:
    values: np.ndarray
    descriptor: InstanceDescriptor


def fitness_vector(inst: ProblemInstance, sm: SampleMatrix) -> FitnessVector:
    if sm.dim != inst.dim:
        raise DimensionMismatchError(
            f"Sample matrix has D={sm.dim} but instance {inst.descriptor.to_line()} has D={inst.dim}")
    return FitnessVector(values=evaluate_batch(inst, sm.coords), descriptor=inst.descriptor)


def normalize(values) -> np.ndarray:
    """Min-max normalization to [0, 1]; a constant vector maps to all zeros."""
    v = np.asarray(getattr(values, 'values', values), dtype=float)
    if v.size == 0:
        raise ShapeError("Cannot normalize an empty fitness vector")
    if not np.all(np.isfinite(v)):
        raise NonFiniteFitnessError(
            f"Fitness vector contains {np.count_nonzero(~np.isfinite(v))} non-finite values")
    low, high = v.min(), v.max()
    if high == low:
        return np.zeros_like(v)
    return (v - low) / (high - low)


@dataclass(frozen=True, eq=False)
class LandscapeImage:
    pixels: np.ndarray

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def to_image(v) -> LandscapeImage:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ShapeError(f"Expected a flat normalized vector, got shape {v.shape}")
    side = perfect_square_side(v.size)
    return LandscapeImage(pixels=v.reshape(side, side).copy())


def _bilinear_axis(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-centre alignment: dst pixel i samples src coordinate (i + 0.5) * src/dst - 0.5
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def resize_image(img: LandscapeImage, target_side: int) -> LandscapeImage:
    if target_side < 2 or img.side < 2:
        raise ShapeError(f"Image sides must be >= 2 (source {img.side}, target {target_side})")
    if target_side == img.side:
        return LandscapeImage(pixels=img.pixels.copy())
    r0, r1, rw = _bilinear_axis(img.side, target_side)
    c0, c1, cw = _bilinear_axis(img.side, target_side)
    p = img.pixels
    top = p[r0][:, c0] * (1.0 - cw) + p[r0][:, c1] * cw
    bottom = p[r1][:, c0] * (1.0 - cw) + p[r1][:, c1] * cw
    out = top * (1.0 - rw)[:, None] + bottom * rw[:, None]
    return LandscapeImage(pixels=np.clip(out, 0.0, 1.0))


def build_image(inst: ProblemInstance, sm: SampleMatrix) -> LandscapeImage:
    """Sample, normalize and reshape one instance into its landscape image."""
    return to_image(normalize(fitness_vector(inst, sm)))


def encode_image(img: LandscapeImage) -> bytes:
    header = _IMAGE_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, img.side)
    return header + np.ascontiguousarray(img.pixels, dtype='<f4').tobytes()


def decode_image(blob: bytes, source: str = '<bytes>') -> LandscapeImage:
    if len(blob) < _IMAGE_HEADER.size:
        raise FileFormatError(f"{source}: truncated image header")
    magic, version, side = _IMAGE_HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise FileFormatError(f"{source}: bad magic {magic!r}, expected {IMAGE_MAGIC!r}")
    if version != IMAGE_VERSION:
        raise FileFormatError(f"{source}: unsupported image version {version}")
    payload = blob[_IMAGE_HEADER.size:]
    if len(payload) != 4 * side * side:
        raise FileFormatError(f"{source}: expected {4 * side * side} pixel bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype='<f4').astype(float).reshape(side, side)
    return LandscapeImage(pixels=pixels)


def save_image(img: LandscapeImage, path: str) -> None:
    atomic_write_bytes(path, encode_image(img))


def load_image(path: str) -> LandscapeImage:
    try:
        with open(path, 'rb') as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise MissingInputError(f"Image file not found: {path}")
    return decode_image(blob, source=path)


def save_sample_matrix(sm: SampleMatrix, path: str) -> None:
    buffer = io.BytesIO()
    np.savez(buffer, coords=sm.coords, mode=np.array(sm.mode), seed=np.array(sm.seed),
             bounds=np.array(sm.bounds))
    atomic_write_bytes(path, buffer.getvalue())


def load_sample_matrix(path: str) -> SampleMatrix:
    try:
        with np.load(path, allow_pickle=False) as data:
            coords = data['coords'].copy()
            coords.setflags(write=False)
            lo, hi = data['bounds'].tolist()
            return SampleMatrix(coords=coords, mode=str(data['mode']), seed=int(data['seed']),
                                bounds=(float(lo), float(hi)))
    except FileNotFoundError:
        raise MissingInputError(f"Sample matrix file not found: {path}")
    except (KeyError, ValueError, OSError) as e:
        raise FileFormatError(f"{path}: not a sample matrix archive ({e})")
