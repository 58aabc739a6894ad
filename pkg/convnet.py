"""From-scratch numpy convolutional network for landscape images.

Tensors are batch-first ``(batch, height, width, channels)``. Every layer
exposes ``forward(x) -> (out, cache)`` and ``backward(dout, cache) ->
(dx, grads)`` so a network holds no per-call state and inference on a
trained network can be shared between callers.
"""

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from database import atomic_write_bytes, atomic_write_text
from errors import ConfigError, EmptySplitError, FileFormatError, MissingInputError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'LSNN'
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct('<4sHBI')

PRECISIONS = {4: np.float32, 8: np.float64}

VGG_GROUPS = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
VGG_FC_SIZES = [4096, 1000, 200]
VARIANT_GROUPS = {'a': 5, 'b': 4}
VARIANT_INPUT_SIDE = {'a': 100, 'b': 45}


# ---------------------------------------------------------------------------
# primitive operations

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """3x3 convolution, stride 1, zero same-padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (batch, h, w, c) input, got shape {x.shape}")
    if w.shape[:2] != (3, 3) or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[3]} channels, "
                         f"kernel expects {w.shape[2]} (kernel shape {w.shape})")
    batch, height, width, c_in = x.shape
    c_out = w.shape[3]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * height * width, 9 * c_in)
    w2 = w.reshape(9 * c_in, c_out)
    out = (cols @ w2 + b).reshape(batch, height, width, c_out)
    return out, (x.shape, cols, w2)


def conv2d_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    (batch, height, width, c_in), cols, w2 = cache
    c_out = w2.shape[1]
    dout2 = dout.reshape(-1, c_out)
    dw = (cols.T @ dout2).reshape(3, 3, c_in, c_out)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w2.T).reshape(batch, height, width, 3, 3, c_in)
    dpadded = np.zeros((batch, height + 2, width + 2, c_in), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dpadded[:, i:i + height, j:j + width, :] += dcols[:, :, :, i, j, :]
    return dpadded[:, 1:-1, 1:-1, :], dw, db


def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return dout * mask


def maxpool2(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """2x2 max pooling, stride 2, floor mode; ties go to the first window index."""
    batch, height, width, channels = x.shape
    if height < 2 or width < 2:
        raise ShapeError(f"maxpool2 needs spatial sides >= 2, got {height}x{width}")
    h2, w2 = height // 2, width // 2
    windows = (x[:, :2 * h2, :2 * w2, :]
               .reshape(batch, h2, 2, w2, 2, channels)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(batch, h2, w2, channels, 4))
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    shape, idx = cache
    batch, height, width, channels = shape
    h2, w2 = idx.shape[1], idx.shape[2]
    dwindows = np.zeros(idx.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwindows, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :2 * h2, :2 * w2, :] = (dwindows
                                  .reshape(batch, h2, w2, channels, 2, 2)
                                  .transpose(0, 1, 4, 2, 5, 3)
                                  .reshape(batch, 2 * h2, 2 * w2, channels))
    return dx


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected shape mismatch: input {x.shape}, weights {w.shape}")
    return x @ w + b, x


def fully_connected_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets, reduction: str = 'mean'):
    """Categorical cross-entropy -log p(target) and its gradient w.r.t. the logits."""
    single = logits.ndim == 1
    logits2 = logits[None, :] if single else logits
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    batch, classes = logits2.shape
    if classes < 2:
        raise ShapeError(f"Need at least 2 classes, got {classes}")
    if targets.shape != (batch,):
        raise ShapeError(f"Expected {batch} targets, got shape {targets.shape}")
    if np.any((targets < 0) | (targets >= classes)):
        raise ShapeError(f"Target out of range 0..{classes - 1}: {targets.tolist()}")

    shifted = logits2 - logits2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    losses = log_norm - shifted[rows, targets]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, targets] -= 1.0
    if reduction == 'mean':
        loss, grad = losses.mean(), grad / batch
    elif reduction == 'sum':
        loss = losses.sum()
    else:
        raise ValueError(f"Unknown reduction {reduction!r}")
    return float(loss), (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# layers

class Layer:
    params: Dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def kink_state(self, cache) -> Optional[np.ndarray]:
        return None

    def describe(self) -> str:
        return type(self).__name__


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.params = {'W': np.zeros((3, 3, in_channels, out_channels)), 'b': np.zeros(out_channels)}

    def forward(self, x):
        return conv2d(x, self.params['W'], self.params['b'])

    def backward(self, dout, cache):
        dx, dw, db = conv2d_backward(dout, cache)
        return dx, {'W': dw, 'b': db}

    def describe(self):
        return f"conv3-{self.out_channels}"


class ReLU(Layer):
    def __init__(self):
        self.params = {}

    def forward(self, x):
        return relu(x)

    def backward(self, dout, cache):
        return relu_backward(dout, cache), {}

    def kink_state(self, cache):
        return cache

    def describe(self):
        return "relu"


class MaxPool2(Layer):
    def __init__(self):
        self.params = {}

    def forward(self, x):
        return maxpool2(x)

    def backward(self, dout, cache):
        return maxpool2_backward(dout, cache), {}

    def kink_state(self, cache):
        return cache[1]

    def describe(self):
        return "max2"


class Flatten(Layer):
    def __init__(self):
        self.params = {}

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}

    def describe(self):
        return "flatten"


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.params = {'W': np.zeros((n_in, n_out)), 'b': np.zeros(n_out)}

    def forward(self, x):
        return fully_connected(x, self.params['W'], self.params['b'])

    def backward(self, dout, cache):
        dx, dw, db = fully_connected_backward(dout, cache, self.params['W'])
        return dx, {'W': dw, 'b': db}

    def describe(self):
        return f"fc-{self.n_out}"


# ---------------------------------------------------------------------------
# architecture

def parse_width_scale(value) -> Fraction:
    try:
        scale = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"width_scale must be a rational like 1/8, got {value!r}")
    if not 0 < scale <= 1:
        raise ConfigError(f"width_scale must lie in (0, 1], got {scale}")
    return scale


@dataclass
class ArchitectureConfig:
    variant: str = 'a'
    input_side: Optional[int] = None
    num_classes: int = 24
    width_scale: Fraction = Fraction(1)
    groups: Optional[List[Tuple[int, int]]] = None
    fc_sizes: Optional[List[int]] = None

    def __post_init__(self):
        if self.variant not in VARIANT_GROUPS:
            raise ConfigError(f"Unknown architecture variant {self.variant!r}; expected 'a' or 'b'")
        self.width_scale = parse_width_scale(self.width_scale)
        if self.input_side is None:
            self.input_side = VARIANT_INPUT_SIDE[self.variant]
        if self.groups is None:
            self.groups = list(VGG_GROUPS[:VARIANT_GROUPS[self.variant]])
        self.groups = [(int(n), int(c)) for n, c in self.groups]
        if self.fc_sizes is None:
            self.fc_sizes = list(VGG_FC_SIZES)
        self.fc_sizes = [int(s) for s in self.fc_sizes]
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        self.spatial_chain()

    def scaled(self, width: int) -> int:
        # round half up, never below one unit
        return max(1, int(Fraction(width) * self.width_scale + Fraction(1, 2)))

    def conv_channels(self) -> List[List[int]]:
        return [[self.scaled(c)] * n for n, c in self.groups]

    def fc_widths(self) -> List[int]:
        return [self.scaled(s) for s in self.fc_sizes]

    def spatial_chain(self) -> List[int]:
        chain = [int(self.input_side)]
        for _ in self.groups:
            chain.append(chain[-1] // 2)
        if chain[-1] < 1:
            raise ConfigError(f"Input side {self.input_side} collapses to 0 after "
                              f"{len(self.groups)} pooling groups (chain {chain})")
        return chain

    @property
    def flatten_size(self) -> int:
        return self.spatial_chain()[-1] ** 2 * self.conv_channels()[-1][-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'variant': self.variant,
            'input_side': self.input_side,
            'num_classes': self.num_classes,
            'width_scale': str(self.width_scale),
            'groups': [list(g) for g in self.groups],
            'fc_sizes': list(self.fc_sizes),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ArchitectureConfig':
        return cls(variant=data['variant'], input_side=data['input_side'],
                   num_classes=data['num_classes'], width_scale=Fraction(data['width_scale']),
                   groups=[tuple(g) for g in data['groups']], fc_sizes=data['fc_sizes'])


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 60
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_policy: str = 'best-validation-accuracy'
    chunk_size: int = 20


class Network:
    def __init__(self, layers: Sequence[Layer], config: Optional[ArchitectureConfig] = None,
                 dtype=np.float64):
        self.layers = list(layers)
        self.config = config
        self.dtype = np.dtype(dtype)

    @property
    def precision(self) -> int:
        return self.dtype.itemsize

    def parameters(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters in checkpoint order: layer by layer, weights before bias."""
        named = []
        for i, layer in enumerate(self.layers):
            for key in ('W', 'b'):
                if key in layer.params:
                    named.append((f"{i}.{key}", layer.params[key]))
        return named

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def copy_parameters(self) -> Dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.parameters()}

    def load_parameters(self, values: Dict[str, np.ndarray]):
        for name, p in self.parameters():
            p[...] = values[name]

    def clone(self) -> 'Network':
        twin = build_network(self.config, dtype=self.dtype) if self.config else None
        if twin is None:
            raise ConfigError("Only networks built from an ArchitectureConfig can be cloned")
        twin.load_parameters(self.copy_parameters())
        return twin

    def _prepare(self, images) -> np.ndarray:
        x = np.asarray(getattr(images, 'pixels', images), dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, :, :]
        if x.ndim == 3:
            x = x[..., None]
        if self.config is not None and x.shape[1:3] != (self.config.input_side, self.config.input_side):
            raise ShapeError(f"Network expects {self.config.input_side}x{self.config.input_side} images, "
                             f"got {x.shape[1]}x{x.shape[2]}")
        return x

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Any]]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dlogits: np.ndarray, caches: List[Any]) -> Dict[str, np.ndarray]:
        grads = {}
        dout = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            dout, layer_grads = self.layers[i].backward(dout, caches[i])
            for key, g in layer_grads.items():
                grads[f"{i}.{key}"] = g
        return grads

    def loss_and_grads(self, images, labels, reduction: str = 'sum'):
        logits, caches = self.forward(self._prepare(images))
        loss, dlogits = softmax_cross_entropy(logits, labels, reduction=reduction)
        return loss, self.backward(dlogits, caches)

    def loss_and_signature(self, images, labels) -> Tuple[float, str]:
        """Loss plus a digest of every ReLU mask and pooling argmax (kink detection)."""
        logits, caches = self.forward(self._prepare(images))
        loss, _ = softmax_cross_entropy(logits, labels, reduction='sum')
        h = hashlib.sha1()
        for layer, cache in zip(self.layers, caches):
            state = layer.kink_state(cache)
            if state is not None:
                h.update(np.ascontiguousarray(state).tobytes())
        return loss, h.hexdigest()

    def predict_proba(self, images, chunk_size: int = 64) -> np.ndarray:
        x = self._prepare(images)
        out = []
        for start in range(0, x.shape[0], chunk_size):
            logits, _ = self.forward(x[start:start + chunk_size])
            out.append(softmax(logits.astype(np.float64)))
        probs = np.concatenate(out, axis=0)
        single = np.asarray(getattr(images, 'pixels', images)).ndim == 2
        return probs[0] if single else probs

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=-1)

    def summary(self) -> List[str]:
        return [layer.describe() for layer in self.layers]


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_network(config: ArchitectureConfig, seed: int = 0, dtype=np.float64) -> Network:
    """Table-driven VGG stack: conv groups, fc layers, softmax output."""
    config.spatial_chain()
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    channels = 1
    for group in config.conv_channels():
        for out_channels in group:
            conv = Conv2D(channels, out_channels)
            conv.params['W'] = _he_normal(rng, conv.params['W'].shape, 9 * channels)
            layers += [conv, ReLU()]
            channels = out_channels
        layers.append(MaxPool2())
    layers.append(Flatten())

    width = config.flatten_size
    for size in config.fc_widths():
        dense = Dense(width, size)
        dense.params['W'] = _he_normal(rng, dense.params['W'].shape, width)
        layers += [dense, ReLU()]
        width = size
    # classifier layer has no ReLU after it: Glorot-normal keeps the initial softmax near uniform
    head = Dense(width, config.num_classes)
    head.params['W'] = rng.standard_normal(head.params['W'].shape) * np.sqrt(2.0 / (width + config.num_classes))
    layers.append(head)

    for layer in layers:
        for key in layer.params:
            layer.params[key] = np.ascontiguousarray(layer.params[key], dtype=dtype)
    net = Network(layers, config=config, dtype=dtype)
    logger.debug(f"Layer stack: {' '.join(net.summary())}")
    logger.info(f"Built variant ({config.variant}) network: input {config.input_side}, "
                f"chain {config.spatial_chain()}, {net.num_parameters()} parameters")
    return net


def forward(net: Network, image) -> np.ndarray:
    """Class probabilities for one image (or a batch of images)."""
    return net.predict_proba(image)


# ---------------------------------------------------------------------------
# training

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: Network) -> 'AdamState':
        return cls(m={n: np.zeros_like(p) for n, p in net.parameters()},
                   v={n: np.zeros_like(p) for n, p in net.parameters()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              t: int, config: TrainConfig) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place."""
    if t < 1:
        raise ValueError(f"Adam step counter must start at 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)
    return params


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels))) if len(labels) else 0.0


def _batch_gradients(net: Network, images: np.ndarray, labels: np.ndarray, chunk_size: int):
    # fixed chunk order keeps the accumulated sums reproducible
    total_loss = 0.0
    total = None
    for start in range(0, len(labels), chunk_size):
        loss, grads = net.loss_and_grads(images[start:start + chunk_size],
                                         labels[start:start + chunk_size], reduction='sum')
        total_loss += loss
        if total is None:
            total = grads
        else:
            for key, g in grads.items():
                total[key] += g
    return total_loss, total


def train(net: Network, train_set: ImageSet, val_set: ImageSet, config: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[Network, List[EpochRecord]]:
    """Adam training; returns the checkpoint with the best validation accuracy (earliest on ties)."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplitError(f"Training needs non-empty splits (train={len(train_set)}, val={len(val_set)})")

    rng = np.random.default_rng(config.seed)
    state = AdamState.for_network(net)
    params = dict(net.parameters())
    step = 0
    best_accuracy, best_epoch, best_params = -1.0, 0, net.copy_parameters()
    history: List[EpochRecord] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = _batch_gradients(net, train_set.images[idx], train_set.labels[idx],
                                           config.chunk_size)
            for g in grads.values():
                g /= len(idx)
            step += 1
            adam_step(params, grads, state, step, config)
            epoch_loss += loss

        val_accuracy = accuracy(net.predict(val_set.images), val_set.labels)
        record = EpochRecord(epoch, epoch_loss / len(train_set), val_accuracy)
        history.append(record)
        if val_accuracy > best_accuracy:
            best_accuracy, best_epoch, best_params = val_accuracy, epoch, net.copy_parameters()
        logger.info(f"Epoch {epoch}/{config.epochs}: train loss {record.train_loss:.5f}, "
                    f"val accuracy {val_accuracy:.4f}")
        if on_epoch:
            on_epoch(record)

    logger.info(f"Best validation accuracy {best_accuracy:.4f} at epoch {best_epoch}")
    best = net.clone() if net.config else net
    best.load_parameters(best_params)
    return best, history


def write_history_csv(history: List[EpochRecord], path: str):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['epoch', 'train_loss', 'val_acc'])
    for record in history:
        writer.writerow([record.epoch, repr(record.train_loss), repr(record.val_accuracy)])
    atomic_write_text(path, buffer.getvalue())


# ---------------------------------------------------------------------------
# checkpoints

def encode_checkpoint(net: Network) -> bytes:
    if net.config is None:
        raise ConfigError("Only networks built from an ArchitectureConfig can be checkpointed")
    config_blob = json.dumps(net.config.to_dict(), sort_keys=True).encode('utf-8')
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.precision, len(config_blob))
    little = net.dtype.newbyteorder('<')
    blob = b''.join(np.ascontiguousarray(p, dtype=little).tobytes() for _, p in net.parameters())
    return header + config_blob + blob


def decode_checkpoint(blob: bytes, source: str = '<bytes>') -> Network:
    if len(blob) < _CHECKPOINT_HEADER.size:
        raise FileFormatError(f"{source}: truncated checkpoint header")
    magic, version, precision, config_len = _CHECKPOINT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{source}: checkpoint version {version} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    if precision not in PRECISIONS:
        raise FileFormatError(f"{source}: unknown parameter precision {precision}")
    offset = _CHECKPOINT_HEADER.size
    try:
        config = ArchitectureConfig.from_dict(json.loads(blob[offset:offset + config_len].decode('utf-8')))
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise FileFormatError(f"{source}: unreadable architecture block ({e})")
    offset += config_len

    net = build_network(config, dtype=PRECISIONS[precision])
    little = net.dtype.newbyteorder('<')
    expected = net.num_parameters() * precision
    if len(blob) - offset != expected:
        raise FileFormatError(f"{source}: parameter blob has {len(blob) - offset} bytes, expected {expected}")
    for _, p in net.parameters():
        nbytes = p.size * precision
        p[...] = np.frombuffer(blob, dtype=little, count=p.size, offset=offset).reshape(p.shape)
        offset += nbytes
    return net


def save_checkpoint(net: Network, path: str):
    atomic_write_bytes(path, encode_checkpoint(net))


def load_checkpoint(path: str) -> Network:
    try:
        with open(path, 'rb') as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise MissingInputError(f"Checkpoint not found: {path}")
    return decode_checkpoint(blob, source=path)


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst_parameter: str
    passed: bool


def grad_check(net: Network, images, labels, tolerance: float = 1e-4, num_params: int = 1000,
               h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Central-difference check of analytic gradients on randomly chosen parameters.

    Parameters whose +h and -h passes flip a ReLU mask or a pooling argmax sit
    on a kink of the loss; they are counted in ``skipped`` and left out of the
    maximum.
    """
    if net.dtype != np.float64:
        raise ConfigError("Gradient checks need 8-byte precision")
    _, grads = net.loss_and_grads(images, labels, reduction='sum')
    named = net.parameters()
    sizes = np.array([p.size for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(num_params, int(offsets[-1])), replace=False)

    worst, worst_name, checked, skipped = 0.0, '', 0, 0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side='right') - 1)
        name, p = named[which]
        index = np.unravel_index(int(flat - offsets[which]), p.shape)
        original = p[index]
        p[index] = original + h
        loss_plus, sig_plus = net.loss_and_signature(images, labels)
        p[index] = original - h
        loss_minus, sig_minus = net.loss_and_signature(images, labels)
        p[index] = original
        if sig_plus != sig_minus:
            skipped += 1
            continue
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        analytic = float(grads[name][index])
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        checked += 1
        if rel > worst:
            worst, worst_name = rel, f"{name}{list(index)}"

    report = GradCheckReport(worst, checked, skipped, worst_name, worst < tolerance)
    logger.info(f"Gradient check: max relative error {worst:.3e} over {checked} parameters "
                f"({skipped} skipped at kinks)")
    return report
