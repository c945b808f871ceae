"""Minimal 1-D convolutional network engine.

Supports exactly the layer set the detection models need: valid (unpadded)
1-D convolutions and fully connected layers, ReLU, softmax cross-entropy,
backprop, SGD with momentum, per-conv-layer freezing, memory-budget
accounting at 4 bytes per parameter, and a byte-exact binary model format.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rhythm import Label, SEGMENT_SAMPLES


class DimensionError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CacheError(ValueError):
    pass


class FormatError(ValueError):
    pass


class NumericError(ValueError):
    pass


class LayerKind(Enum):
    CONV1D = 0
    FC = 1


class Activation(Enum):
    NONE = 0
    RELU = 1


# Class-index convention for 2-way logits/probabilities everywhere.
NON_VTVF_INDEX = 0
VTVF_INDEX = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    activation: Activation
    # Conv1D: (in_channels, out_channels, kernel, stride); FC: (in, out, 0, 0)
    d0: int
    d1: int
    d2: int = 0
    d3: int = 0

    def __post_init__(self):
        if self.kind is LayerKind.CONV1D:
            if min(self.d0, self.d1, self.d2, self.d3) < 1:
                raise ConfigError(f"conv dims must all be >= 1, got {self}")
        else:
            if min(self.d0, self.d1) < 1:
                raise ConfigError(f"fc dims must be >= 1, got {self}")

    @classmethod
    def conv(cls, in_ch, out_ch, kernel, stride, relu=True):
        act = Activation.RELU if relu else Activation.NONE
        return cls(LayerKind.CONV1D, act, in_ch, out_ch, kernel, stride)

    @classmethod
    def fc(cls, n_in, n_out, relu=False):
        act = Activation.RELU if relu else Activation.NONE
        return cls(LayerKind.FC, act, n_in, n_out)

    def param_count(self):
        if self.kind is LayerKind.CONV1D:
            return self.d1 * self.d0 * self.d2 + self.d1
        return self.d1 * self.d0 + self.d1


@dataclass
class Layer:
    spec: LayerSpec
    w: np.ndarray
    b: np.ndarray


@dataclass
class Model:
    """An ordered stack of conv/FC layers with their parameters."""

    layers: list

    def param_count(self):
        return sum(l.w.size + l.b.size for l in self.layers)

    @property
    def dtype(self):
        return self.layers[0].w.dtype

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.spec.kind is LayerKind.CONV1D]

    def copy(self):
        return Model([Layer(l.spec, l.w.copy(), l.b.copy()) for l in self.layers])

    def astype(self, dtype):
        return Model(
            [Layer(l.spec, l.w.astype(dtype), l.b.astype(dtype)) for l in self.layers]
        )

    def specs(self):
        return [l.spec for l in self.layers]


def models_identical(a: Model, b: Model) -> bool:
    """Bitwise parameter equality (same specs, same bytes)."""
    if a.specs() != b.specs():
        return False
    return all(
        la.w.tobytes() == lb.w.tobytes() and la.b.tobytes() == lb.b.tobytes()
        for la, lb in zip(a.layers, b.layers)
    )


@dataclass(frozen=True)
class FreezeMask:
    """Per-conv-layer trainability flags: True fine-tunes, False freezes."""

    bits: tuple

    N_CONV = 5

    def __post_init__(self):
        bits = tuple(bool(b) for b in self.bits)
        if len(bits) != self.N_CONV:
            raise ConfigError(f"freeze mask needs exactly {self.N_CONV} bits")
        object.__setattr__(self, "bits", bits)

    def to_index(self) -> int:
        # Layer-1 bit is least significant.
        return sum(1 << i for i, bit in enumerate(self.bits) if bit)

    @classmethod
    def from_index(cls, index: int) -> "FreezeMask":
        if not 0 <= index < 2**cls.N_CONV:
            raise ConfigError(f"mask index out of range: {index}")
        return cls(tuple(bool(index >> i & 1) for i in range(cls.N_CONV)))

    @classmethod
    def all_finetune(cls):
        return cls((True,) * cls.N_CONV)

    @classmethod
    def all_frozen(cls):
        return cls((False,) * cls.N_CONV)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    momentum: float = 0.9
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


def init_model(specs, seed, dtype=np.float32) -> Model:
    """Seeded symmetric init: weights uniform in +-sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed)]))
    layers = []
    for spec in specs:
        if spec.kind is LayerKind.CONV1D:
            in_ch, out_ch, k = spec.d0, spec.d1, spec.d2
            fan_in, fan_out = in_ch * k, out_ch * k
            shape = (out_ch, in_ch, k)
            n_b = out_ch
        else:
            fan_in, fan_out = spec.d0, spec.d1
            shape = (spec.d1, spec.d0)
            n_b = spec.d1
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        layers.append(Layer(spec, w, np.zeros(n_b, dtype=dtype)))
    return Model(layers)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def conv_out_len(length, kernel, stride):
    if length < kernel:
        return 0
    return (length - kernel) // stride + 1


def _conv_forward(x, w, b, stride):
    # x: (B, C, L), w: (O, C, K) -> z: (B, O, Lout)
    B = x.shape[0]
    O, C, K = w.shape
    cols = sliding_window_view(x, K, axis=2)[:, :, ::stride, :]
    p = cols.transpose(0, 2, 1, 3).reshape(B, -1, C * K)
    z = p @ w.reshape(O, C * K).T + b
    return z.transpose(0, 2, 1)


def _conv_backward(x, w, stride, dz):
    B, C, L = x.shape
    O, _, K = w.shape
    lout = dz.shape[2]
    dzt = dz.transpose(0, 2, 1)
    cols = sliding_window_view(x, K, axis=2)[:, :, ::stride, :]
    p = cols.transpose(0, 2, 1, 3).reshape(B, lout, C * K)
    dw = (dzt.reshape(-1, O).T @ p.reshape(-1, C * K)).reshape(w.shape)
    db = dz.sum(axis=(0, 2))
    dcols = (dzt @ w.reshape(O, C * K)).reshape(B, lout, C, K).transpose(0, 2, 1, 3)
    dx = np.zeros((B, C, L), dtype=dz.dtype)
    for k in range(K):
        dx[:, :, k : k + stride * lout : stride] += dcols[:, :, :, k]
    return dw, db, dx


def prepare_input(model: Model, x2d: np.ndarray) -> np.ndarray:
    """Shape a (B, features) batch for the model's first layer."""
    first = model.layers[0].spec
    if first.kind is LayerKind.CONV1D:
        if x2d.shape[1] % first.d0 != 0:
            raise DimensionError(
                f"layer 0 (Conv1D): input of {x2d.shape[1]} values does not split "
                f"into {first.d0} channel(s)"
            )
        return x2d.reshape(x2d.shape[0], first.d0, -1)
    return x2d


def forward_batch(model: Model, x: np.ndarray):
    """Run a batch through the stack; returns (logits, cache).

    Cache entry i holds the layer's input, pre-activation, and
    post-activation arrays, as needed by backward and by activation hooks.
    """
    h = np.asarray(x, dtype=model.dtype)
    cache = []
    for i, layer in enumerate(model.layers):
        spec = layer.spec
        if spec.kind is LayerKind.CONV1D:
            if h.ndim != 3 or h.shape[1] != spec.d0:
                raise DimensionError(
                    f"layer {i} (Conv1D): expected (B, {spec.d0}, L) input, got {h.shape}"
                )
            if conv_out_len(h.shape[2], spec.d2, spec.d3) < 1:
                raise DimensionError(
                    f"layer {i} (Conv1D): input length {h.shape[2]} shorter than "
                    f"kernel {spec.d2}"
                )
            z = _conv_forward(h, layer.w, layer.b, spec.d3)
        else:
            if h.ndim == 3:
                h = h.reshape(h.shape[0], -1)
            if h.shape[1] != spec.d0:
                raise DimensionError(
                    f"layer {i} (FC): expected {spec.d0} features, got {h.shape[1]}"
                )
            z = h @ layer.w.T + layer.b
        a = np.maximum(z, 0) if spec.activation is Activation.RELU else z
        cache.append((h, z, a))
        h = a
    return h, cache


def forward(model: Model, x: np.ndarray):
    """Single-sample forward pass; returns (logits vector, cache)."""
    x = np.asarray(x, dtype=model.dtype).reshape(1, -1)
    logits, cache = forward_batch(model, prepare_input(model, x))
    return logits[0], cache


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Outputs are clamped a hair inside (0, 1) so the open-interval contract
    survives float rounding even for saturated logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax requires finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.clip(p, 1e-12, 1.0 - 1e-12)


def cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over a batch; returns (loss, dloss/dlogits)."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), y].mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, (d / n).astype(logits.dtype)


def _check_cache(model, cache):
    if len(cache) != len(model.layers):
        raise CacheError("cache does not match this model's layer count")
    for i, (layer, (h, z, _)) in enumerate(zip(model.layers, cache)):
        spec = layer.spec
        expect = spec.d1
        if z.shape[1 if spec.kind is LayerKind.FC else 1] != expect:
            raise CacheError(f"layer {i}: cached shapes do not match the model")


def backward(model: Model, cache, dlogits, freeze: FreezeMask | None = None,
             extra_output_grads: dict | None = None):
    """Backprop a gradient at the network output through every layer.

    Returns one (dw, db) pair per layer. Frozen conv layers receive zero
    parameter gradients but still pass gradients through. Entries of
    `extra_output_grads` map layer index to a gradient added at that layer's
    post-activation output (used for activation-matching penalties).
    """
    _check_cache(model, cache)
    conv_idx = model.conv_indices()
    if freeze is not None and len(conv_idx) != len(freeze.bits):
        raise ConfigError(
            f"freeze mask has {len(freeze.bits)} bits but model has "
            f"{len(conv_idx)} conv layers"
        )
    frozen = set()
    if freeze is not None:
        frozen = {li for li, bit in zip(conv_idx, freeze.bits) if not bit}

    grads = [None] * len(model.layers)
    d = np.asarray(dlogits, dtype=model.dtype)
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        h, z, _ = cache[i]
        if extra_output_grads and i in extra_output_grads:
            d = d + np.asarray(extra_output_grads[i], dtype=d.dtype)
        if layer.spec.activation is Activation.RELU:
            d = d * (z > 0)
        if layer.spec.kind is LayerKind.CONV1D:
            dw, db, dx = _conv_backward(h, layer.w, layer.spec.d3, d)
        else:
            dw = d.T @ h
            db = d.sum(axis=0)
            dx = d @ layer.w
            if i > 0 and cache[i - 1][2].ndim == 3:
                dx = dx.reshape(cache[i - 1][2].shape)
        if i in frozen:
            dw = np.zeros_like(dw)
            db = np.zeros_like(db)
        grads[i] = (dw, db)
        d = dx
    return grads


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    velocity: list

    @classmethod
    def for_model(cls, model: Model):
        return cls([(np.zeros_like(l.w), np.zeros_like(l.b)) for l in model.layers])


def sgd_update(model: Model, grads, state: SgdState, cfg: TrainConfig,
               freeze: FreezeMask | None = None):
    """In-place momentum step: v <- m*v + g; theta <- theta - lr*v.

    Frozen conv layers are skipped entirely (parameters and velocity
    untouched); FC layers always update.
    """
    conv_idx = model.conv_indices()
    frozen = set()
    if freeze is not None:
        frozen = {li for li, bit in zip(conv_idx, freeze.bits) if not bit}
    for i, (layer, (dw, db)) in enumerate(zip(model.layers, grads)):
        if i in frozen:
            continue
        vw, vb = state.velocity[i]
        vw *= cfg.momentum
        vw += dw
        vb *= cfg.momentum
        vb += db
        layer.w -= cfg.learning_rate * vw
        layer.b -= cfg.learning_rate * vb


@dataclass
class TrainResult:
    model: Model
    epoch_losses: list


def dataset_to_arrays(dataset):
    """Stack labeled segments into (X, y) arrays; y uses the class-index convention."""
    xs, ys = [], []
    for item in dataset:
        seg, label = item if isinstance(item, tuple) else (item, item.label)
        if label is None:
            raise DataError("dataset contains an unlabeled segment")
        xs.append(np.asarray(seg.samples, dtype=np.float32))
        ys.append(VTVF_INDEX if label is Label.VTVF else NON_VTVF_INDEX)
    if not xs:
        raise DataError("dataset is empty")
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def _epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), epoch]))


def train_supervised(model: Model, dataset, cfg: TrainConfig,
                     freeze: FreezeMask | None = None) -> TrainResult:
    """Train on labeled segments with shuffled mini-batches.

    Deterministic for a fixed config seed: the shuffle order is reseeded per
    epoch from (seed, epoch). Returns a new model; the input is not mutated.
    """
    x2d, y = dataset_to_arrays(dataset)
    model = model.copy()
    x = prepare_input(model, x2d.astype(model.dtype))
    state = SgdState.for_model(model)
    losses = []
    n = len(y)
    for epoch in range(cfg.epochs):
        order = _epoch_rng(cfg.seed, epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            logits, cache = forward_batch(model, x[idx])
            loss, dlogits = cross_entropy(logits, y[idx])
            grads = backward(model, cache, dlogits, freeze)
            sgd_update(model, grads, state, cfg, freeze)
            total += loss * len(idx)
        losses.append(total / n)
    return TrainResult(model, losses)


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------


def memory_budget(model: Model, input_len: int = SEGMENT_SAMPLES):
    """Exact storage arithmetic: (param_bytes, scratch_bytes).

    param_bytes assumes 4-byte parameters. scratch_bytes is the ping-pong
    buffer peak: 4 bytes times the largest (input + output) activation pair
    across layer boundaries, for the given input length.
    """
    param_bytes = 4 * model.param_count()
    first = model.layers[0].spec
    if first.kind is LayerKind.CONV1D:
        ch, length = first.d0, input_len
        cur = ch * length
    else:
        ch, length = None, None
        cur = first.d0
    peak = 0
    for i, layer in enumerate(model.layers):
        spec = layer.spec
        if spec.kind is LayerKind.CONV1D:
            if ch is None or ch != spec.d0:
                raise DimensionError(f"layer {i} (Conv1D): channel mismatch in stack")
            length = conv_out_len(length, spec.d2, spec.d3)
            if length < 1:
                raise DimensionError(f"layer {i} (Conv1D): activation length vanishes")
            ch = spec.d1
            out = ch * length
        else:
            avail = cur if ch is None else ch * length
            if avail != spec.d0:
                raise DimensionError(
                    f"layer {i} (FC): expects {spec.d0} features, stack provides {avail}"
                )
            ch, length = None, None
            out = spec.d1
        peak = max(peak, cur + out)
        cur = out
    return param_bytes, 4 * peak


# ---------------------------------------------------------------------------
# Serialization: magic 'PVA1', little-endian, fixed per-layer header
# ---------------------------------------------------------------------------

_MAGIC = b"PVA1"
_LAYER_HEADER = struct.Struct("<BB4I")


def save_model(model: Model, path):
    """Write the binary model format; float32 parameters round-trip bit-exactly."""
    chunks = [_MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        spec = layer.spec
        chunks.append(
            _LAYER_HEADER.pack(
                spec.kind.value, spec.activation.value, spec.d0, spec.d1, spec.d2, spec.d3
            )
        )
        chunks.append(np.ascontiguousarray(layer.w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise FormatError(f"short read in {what}: file truncated")
    return buf[offset : offset + n], offset + n


def load_model(path) -> Model:
    """Read a model file; any corruption raises before a partial model escapes."""
    with open(path, "rb") as f:
        buf = f.read()
    head, off = _take(buf, 0, 4, "magic")
    if head != _MAGIC:
        raise FormatError(f"bad magic {head!r}")
    raw, off = _take(buf, off, 4, "layer count")
    (n_layers,) = struct.unpack("<I", raw)
    layers = []
    prev_spec = None
    for i in range(n_layers):
        raw, off = _take(buf, off, _LAYER_HEADER.size, f"layer {i} header")
        kind_v, act_v, d0, d1, d2, d3 = _LAYER_HEADER.unpack(raw)
        try:
            kind, act = LayerKind(kind_v), Activation(act_v)
        except ValueError:
            raise FormatError(f"layer {i}: unknown kind/activation tags") from None
        try:
            spec = LayerSpec(kind, act, d0, d1, d2, d3)
        except ConfigError as exc:
            raise FormatError(f"layer {i}: {exc}") from None
        if prev_spec is not None and not _stackable(prev_spec, spec):
            raise FormatError(f"layer {i}: shape inconsistent with layer {i - 1}")
        n_w = spec.param_count() - spec.d1
        raw, off = _take(buf, off, 4 * n_w, f"layer {i} weights")
        w = np.frombuffer(raw, dtype="<f4").copy()
        w = w.reshape((d1, d0, d2) if kind is LayerKind.CONV1D else (d1, d0))
        raw, off = _take(buf, off, 4 * spec.d1, f"layer {i} biases")
        b = np.frombuffer(raw, dtype="<f4").copy()
        layers.append(Layer(spec, w, b))
        prev_spec = spec
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last layer")
    if not layers:
        raise FormatError("model holds no layers")
    return Model(layers)


def _stackable(prev: LayerSpec, cur: LayerSpec) -> bool:
    if cur.kind is LayerKind.CONV1D:
        return prev.kind is LayerKind.CONV1D and prev.d1 == cur.d0
    if prev.kind is LayerKind.FC:
        return prev.d1 == cur.d0
    return cur.d0 % prev.d1 == 0  # flattened conv output: ch * length
