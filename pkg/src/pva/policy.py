"""Candidate-selection policy: a small residual conv net emitting five
sigmoid outputs interpreted as independent Bernoulli parameters over the
freeze/fine-tune bits, trained with the score-function (REINFORCE) gradient
of a correctness reward.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import tinynn
from .rhythm import Label, SEGMENT_SAMPLES
from .tinynn import (
    Activation,
    DataError,
    DimensionError,
    LayerSpec,
    Model,
    NON_VTVF_INDEX,
    SgdState,
    TrainConfig,
    VTVF_INDEX,
    _conv_backward,
    _conv_forward,
)

N_ACTION_BITS = 5
N_BLOCKS = 4
# Blocks whose output is decimated by 2 (parameterless) before the next stage.
DECIMATE_AFTER = (1, 3)
_X_CLAMP = 1e-6


def build_policy_arch():
    """Stem conv, four 8-channel residual blocks, three FC layers.

    Each block holds two stride-1 convs with a ReLU between them; the block
    input, center-cropped by the kernel shrinkage, is added back onto the
    second conv's output. Blocks 2 and 4 are followed by a stride-2
    decimation. For 250-sample inputs the flattened trunk is 8 x 25 = 200.
    """
    specs = [LayerSpec.conv(1, 8, 7, 2)]
    for _ in range(N_BLOCKS):
        specs.append(LayerSpec.conv(8, 8, 3, 1))
        specs.append(LayerSpec.conv(8, 8, 3, 1, relu=False))
    specs += [
        LayerSpec.fc(200, 32, relu=True),
        LayerSpec.fc(32, 16, relu=True),
        LayerSpec.fc(16, N_ACTION_BITS),
    ]
    return specs


@dataclass(frozen=True)
class PolicyNet:
    """Parameters of the policy; the block/skip topology is fixed."""

    model: Model

    def __post_init__(self):
        specs = self.model.specs()
        if [s.kind for s in specs] != [s.kind for s in build_policy_arch()]:
            raise tinynn.ConfigError("layer stack does not match the policy topology")


def init_policy(seed, dtype=np.float32) -> PolicyNet:
    return PolicyNet(tinynn.init_model(build_policy_arch(), seed, dtype))


@dataclass(frozen=True)
class PolicyTrainConfig:
    beta: float = 1.0
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1e-4, batch_size=4, epochs=50)
    )

    def __post_init__(self):
        if self.beta <= 0:
            raise tinynn.ConfigError("beta must be > 0")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _policy_forward_batch(pnet: PolicyNet, x):
    """Forward the trunk; returns (sigmoid outputs (B, 5), cache)."""
    layers = pnet.model.layers
    cache = {"x": x}
    z0 = _conv_forward(x, layers[0].w, layers[0].b, layers[0].spec.d3)
    h = np.maximum(z0, 0)
    cache["stem_z"] = z0
    blocks = []
    for bi in range(N_BLOCKS):
        c1, c2 = layers[1 + 2 * bi], layers[2 + 2 * bi]
        z1 = _conv_forward(h, c1.w, c1.b, 1)
        a1 = np.maximum(z1, 0)
        z2 = _conv_forward(a1, c2.w, c2.b, 1)
        out = z2 + h[:, :, 2:-2]
        blocks.append({"h": h, "z1": z1, "a1": a1})
        h = out[:, :, ::2] if bi in DECIMATE_AFTER else out
    cache["blocks"] = blocks
    flat = h.reshape(h.shape[0], -1)
    cache["trunk_shape"] = h.shape
    fcs = []
    a = flat
    for layer in layers[-3:]:
        z = a @ layer.w.T + layer.b
        fcs.append({"in": a, "z": z})
        a = np.maximum(z, 0) if layer.spec.activation is Activation.RELU else z
    cache["fcs"] = fcs
    return _sigmoid(a), cache


def _policy_backward(pnet: PolicyNet, cache, d_final_z):
    """Gradient of a loss w.r.t. every parameter, given dL/d(final FC output)."""
    layers = pnet.model.layers
    grads = [None] * len(layers)
    d = d_final_z
    for k in (2, 1, 0):
        layer = layers[-3 + k]
        entry = cache["fcs"][k]
        if layer.spec.activation is Activation.RELU:
            d = d * (entry["z"] > 0)
        grads[len(layers) - 3 + k] = (d.T @ entry["in"], d.sum(axis=0))
        d = d @ layer.w
    d = d.reshape(cache["trunk_shape"])
    for bi in reversed(range(N_BLOCKS)):
        entry = cache["blocks"][bi]
        h, z1, a1 = entry["h"], entry["z1"], entry["a1"]
        if bi in DECIMATE_AFTER:
            full = np.zeros((d.shape[0], d.shape[1], h.shape[2] - 4), dtype=d.dtype)
            full[:, :, ::2] = d
            d = full
        c1, c2 = layers[1 + 2 * bi], layers[2 + 2 * bi]
        dw2, db2, da1 = _conv_backward(a1, c2.w, 1, d)
        grads[2 + 2 * bi] = (dw2, db2)
        dz1 = da1 * (z1 > 0)
        dw1, db1, dh = _conv_backward(h, c1.w, 1, dz1)
        grads[1 + 2 * bi] = (dw1, db1)
        dh[:, :, 2:-2] += d
        d = dh
    dz0 = d * (cache["stem_z"] > 0)
    dw0, db0, _ = _conv_backward(cache["x"], layers[0].w, layers[0].spec.d3, dz0)
    grads[0] = (dw0, db0)
    return grads


def _segments_to_input(pnet, segments):
    x = np.stack([np.asarray(s.samples, dtype=np.float32) for s in segments])
    if x.shape[1] != SEGMENT_SAMPLES:
        raise DimensionError(f"policy expects {SEGMENT_SAMPLES}-sample segments")
    return x.reshape(len(segments), 1, -1).astype(pnet.model.dtype)


def policy_forward(pnet: PolicyNet, segment) -> np.ndarray:
    """Sigmoid output vector in [0, 1]^5 for one segment."""
    x, _ = _policy_forward_batch(pnet, _segments_to_input(pnet, [segment]))
    return x[0]


def action_prob(x, a) -> float:
    """Probability of action bits a under independent Bernoulli parameters x."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a)
    return float(np.prod(np.where(a.astype(bool), x, 1.0 - x)))


def sample_action(x, rng) -> tuple:
    """Independent per-component Bernoulli draw."""
    return tuple(bool(v) for v in rng.random(len(x)) < np.asarray(x))


def action_to_index(a) -> int:
    a = tuple(bool(v) for v in a)
    if len(a) != N_ACTION_BITS:
        raise tinynn.ConfigError(f"action needs {N_ACTION_BITS} bits")
    return sum(1 << i for i, bit in enumerate(a) if bit)


def index_to_action(index: int) -> tuple:
    if not 0 <= index < 2**N_ACTION_BITS:
        raise tinynn.ConfigError(f"action index out of range: {index}")
    return tuple(bool(index >> i & 1) for i in range(N_ACTION_BITS))


def log_action_prob_grads(pnet: PolicyNet, segment, a):
    """log pi(a|segment) and its gradient w.r.t. every policy parameter."""
    x, cache = _policy_forward_batch(pnet, _segments_to_input(pnet, [segment]))
    xc = np.clip(x, _X_CLAMP, 1.0 - _X_CLAMP)
    a_arr = np.asarray(a, dtype=np.float64).reshape(1, -1)
    chosen = xc * a_arr + (1.0 - xc) * (1.0 - a_arr)
    logpi = float(np.log(chosen).sum())
    dlogpi_dx = (2.0 * a_arr - 1.0) / chosen
    d_final_z = (dlogpi_dx * x * (1.0 - x)).astype(pnet.model.dtype)
    return logpi, _policy_backward(pnet, cache, d_final_z)


def _pool_predictions(pool, x2d, indices):
    """Class index predicted for each segment by its selected candidate."""
    klass = np.empty(len(indices), dtype=np.int64)
    for index in np.unique(indices):
        sel = np.flatnonzero(indices == index)
        model = pool[int(index)]
        logits, _ = tinynn.forward_batch(
            model, tinynn.prepare_input(model, x2d[sel])
        )
        probs = tinynn.softmax_probs(logits)
        klass[sel] = np.where(probs[:, VTVF_INDEX] >= probs[:, NON_VTVF_INDEX],
                              VTVF_INDEX, NON_VTVF_INDEX)
    return klass


def reinforce_step(pnet: PolicyNet, segments, pool, cfg: PolicyTrainConfig,
                   rng, state: SgdState | None = None) -> PolicyNet:
    """One sampled policy-gradient update over a labeled segment batch.

    For each segment: sample action bits from the policy, run the selected
    candidate, reward +beta on a correct call and -beta otherwise, and ascend
    the reward-weighted log-probability (batch mean).
    """
    segments = list(segments)
    y = []
    for s in segments:
        if s.label is None:
            raise DataError("policy training requires labeled segments")
        y.append(VTVF_INDEX if s.label is Label.VTVF else NON_VTVF_INDEX)
    y = np.asarray(y)

    xin = _segments_to_input(pnet, segments)
    x, cache = _policy_forward_batch(pnet, xin)
    actions = np.asarray([sample_action(row, rng) for row in x], dtype=np.float64)
    indices = np.array([action_to_index(a) for a in actions])

    x2d = xin.reshape(len(segments), -1)
    predicted = _pool_predictions(pool, x2d, indices)
    rewards = np.where(predicted == y, cfg.beta, -cfg.beta)

    xc = np.clip(x, _X_CLAMP, 1.0 - _X_CLAMP)
    chosen = xc * actions + (1.0 - xc) * (1.0 - actions)
    dlogpi_dx = (2.0 * actions - 1.0) / chosen
    # Minimize the negated expected reward: dL/dx = -R * dlogpi/dx / B.
    dl_dx = -(rewards[:, None] * dlogpi_dx) / len(segments)
    d_final_z = (dl_dx * x * (1.0 - x)).astype(pnet.model.dtype)

    grads = _policy_backward(pnet, cache, d_final_z)
    if state is None:
        state = SgdState.for_model(pnet.model)
    tinynn.sgd_update(pnet.model, grads, state, cfg.train)
    return pnet


@dataclass
class PolicyTrainResult:
    pnet: PolicyNet
    epoch_rewards: list


def train_policy(pnet: PolicyNet, pool, segments,
                 cfg: PolicyTrainConfig | None = None) -> PolicyTrainResult:
    """REINFORCE over shuffled batches of labeled target-domain segments."""
    cfg = cfg or PolicyTrainConfig()
    segments = list(segments)
    if not segments:
        raise DataError("policy training set is empty")
    pnet = PolicyNet(pnet.model.copy())
    state = SgdState.for_model(pnet.model)
    history = []
    n = len(segments)
    for epoch in range(cfg.train.epochs):
        order = tinynn._epoch_rng(cfg.train.seed, epoch).permutation(n)
        action_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[int(cfg.train.seed), epoch, 2])
        )
        for lo in range(0, n, cfg.train.batch_size):
            batch = [segments[i] for i in order[lo : lo + cfg.train.batch_size]]
            reinforce_step(pnet, batch, pool, cfg, action_rng, state)
        # Mean deterministic-selection reward after the epoch, for monitoring.
        sel = select_candidates(pnet, segments)
        x2d = np.stack([s.samples for s in segments]).astype(np.float32)
        y = np.asarray(
            [VTVF_INDEX if s.label is Label.VTVF else NON_VTVF_INDEX for s in segments]
        )
        predicted = _pool_predictions(pool, x2d, sel)
        epoch_reward = float(np.mean(np.where(predicted == y, cfg.beta, -cfg.beta)))
        history.append(epoch_reward)
    return PolicyTrainResult(pnet, history)


def select_candidate(pnet: PolicyNet, segment) -> int:
    """Deterministic selection: bit i fine-tunes iff x_i >= 0.5."""
    x = policy_forward(pnet, segment)
    return action_to_index(tuple(x >= 0.5))


def select_candidates(pnet: PolicyNet, segments) -> np.ndarray:
    x, _ = _policy_forward_batch(pnet, _segments_to_input(pnet, segments))
    return np.array([action_to_index(tuple(row >= 0.5)) for row in x])


# ---------------------------------------------------------------------------
# Serialization: model file plus a manifest naming the output contract
# ---------------------------------------------------------------------------


def save_policy(pnet: PolicyNet, path, manifest_path=None):
    tinynn.save_model(pnet.model, path)
    manifest_path = manifest_path or f"{path}.manifest.json"
    manifest = {
        "format": "PVA1",
        "output": "sigmoid",
        "output_bits": N_ACTION_BITS,
        "blocks": N_BLOCKS,
        "decimate_after_blocks": [b + 1 for b in DECIMATE_AFTER],
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_policy(path) -> PolicyNet:
    return PolicyNet(tinynn.load_model(path))
