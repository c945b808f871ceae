"""Kernel two-sample distance (MMD) and domain adaptation of the detector
from labeled source segments to unlabeled target segments.

Adaptation minimizes source cross-entropy plus a weighted MMD between source
and target activations of every fully connected layer, for one of the 32
freeze/fine-tune conv masks. Running all masks yields the candidate pool.
"""

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tinynn
from .tinynn import (
    DataError,
    DimensionError,
    FreezeMask,
    LayerKind,
    Model,
    SgdState,
    TrainConfig,
)

POOL_SIZE = 32


@dataclass(frozen=True)
class MmdConfig:
    kernel: str = "rbf"
    bandwidth: float | str = "median"  # numeric sigma, or median heuristic
    estimator: str = "biased"

    def __post_init__(self):
        if self.kernel != "rbf":
            raise tinynn.ConfigError("only the Gaussian RBF kernel is supported")
        if self.estimator != "biased":
            raise tinynn.ConfigError("only the biased V-statistic is supported")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise tinynn.ConfigError(f"unknown bandwidth {self.bandwidth!r}")
        elif self.bandwidth <= 0:
            raise tinynn.ConfigError("numeric bandwidth must be > 0")


@dataclass(frozen=True)
class AdaptConfig:
    lambda_mmd: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    mmd: MmdConfig = field(default_factory=MmdConfig)

    def __post_init__(self):
        if not np.isfinite(self.lambda_mmd) or self.lambda_mmd < 0:
            raise tinynn.ConfigError("lambda_mmd must be finite and >= 0")


def _sq_dists(a, b):
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def _as_points(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DataError(f"{name} must be a non-empty (n, d) array")
    return x


def _bandwidth(x, y, cfg: MmdConfig) -> float:
    if not isinstance(cfg.bandwidth, str):
        return float(cfg.bandwidth)
    z = np.vstack([x, y])
    d = np.sqrt(_sq_dists(z, z))
    upper = d[np.triu_indices(len(z), k=1)]
    sigma = float(np.median(upper)) if len(upper) else 0.0
    return sigma if sigma > 0 else 1.0


def mmd2(x, y, cfg: MmdConfig | None = None) -> float:
    """Biased squared-MMD estimate between two point sets."""
    value, _, _ = mmd2_and_grads(x, y, cfg)
    return value


def mmd2_and_grads(x, y, cfg: MmdConfig | None = None):
    """Squared MMD plus its gradients with respect to both point sets.

    The bandwidth is treated as a constant of the batch (no gradient flows
    through the median heuristic).
    """
    cfg = cfg or MmdConfig()
    x = _as_points(x, "X")
    y = _as_points(y, "Y")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(
            f"point sets disagree on dimension: {x.shape[1]} vs {y.shape[1]}"
        )
    sigma = _bandwidth(x, y, cfg)
    inv = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-_sq_dists(x, x) * inv)
    kyy = np.exp(-_sq_dists(y, y) * inv)
    kxy = np.exp(-_sq_dists(x, y) * inv)
    n, m = len(x), len(y)
    value = float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())

    s2 = 1.0 / (sigma * sigma)
    dx = (
        -(2.0 / (n * n)) * s2 * (kxx.sum(axis=1)[:, None] * x - kxx @ x)
        + (2.0 / (n * m)) * s2 * (kxy.sum(axis=1)[:, None] * x - kxy @ y)
    )
    dy = (
        -(2.0 / (m * m)) * s2 * (kyy.sum(axis=1)[:, None] * y - kyy @ y)
        + (2.0 / (n * m)) * s2 * (kxy.sum(axis=0)[:, None] * y - kxy.T @ x)
    )
    return value, dx, dy


def fc_layer_indices(model: Model):
    return [i for i, l in enumerate(model.layers) if l.spec.kind is LayerKind.FC]


def fc_activations(model: Model, x2d: np.ndarray):
    """Post-activation outputs of every FC layer for a batch of segments."""
    _, cache = tinynn.forward_batch(model, tinynn.prepare_input(model, x2d))
    return {i: cache[i][2] for i in fc_layer_indices(model)}


def _segment_matrix(segments, name):
    if not len(segments):
        raise DataError(f"{name} segment set is empty")
    return np.stack([np.asarray(s.samples, dtype=np.float32) for s in segments])


def adapt_with_mask(base: Model, source, target, mask: FreezeMask,
                    cfg: AdaptConfig | None = None) -> Model:
    """Adapt the base detector toward the target domain under one conv mask.

    Source segments must be labeled; target segments are used unlabeled. The
    objective per batch is CE(source) + lambda * sum over FC layers of the
    activation MMD between the source and target batches. Target batches
    cycle when the target set is smaller than the source set.
    """
    cfg = cfg or AdaptConfig()
    xs2d, ys = tinynn.dataset_to_arrays(source)
    xt2d = _segment_matrix(target, "target")

    model = base.copy()
    xs = tinynn.prepare_input(model, xs2d.astype(model.dtype))
    xt = tinynn.prepare_input(model, xt2d.astype(model.dtype))
    fc_idx = fc_layer_indices(model)
    state = SgdState.for_model(model)
    ns, nt = len(xs), len(xt)
    bs = cfg.train.batch_size

    for epoch in range(cfg.train.epochs):
        order = tinynn._epoch_rng(cfg.train.seed, epoch).permutation(ns)
        tgt_order = np.random.default_rng(
            np.random.SeedSequence(entropy=[int(cfg.train.seed), epoch, 1])
        ).permutation(nt)
        tptr = 0
        for lo in range(0, ns, bs):
            idx_s = order[lo : lo + bs]
            idx_t = tgt_order.take(np.arange(tptr, tptr + len(idx_s)), mode="wrap")
            tptr = (tptr + len(idx_s)) % nt

            logits, cache_s = tinynn.forward_batch(model, xs[idx_s])
            _, cache_t = tinynn.forward_batch(model, xt[idx_t])
            _, dlogits = tinynn.cross_entropy(logits, ys[idx_s])

            extra_s, extra_t = {}, {}
            if cfg.lambda_mmd > 0:
                for i in fc_idx:
                    _, gs, gt = mmd2_and_grads(cache_s[i][2], cache_t[i][2], cfg.mmd)
                    extra_s[i] = cfg.lambda_mmd * gs
                    extra_t[i] = cfg.lambda_mmd * gt

            grads_s = tinynn.backward(model, cache_s, dlogits, mask, extra_s)
            total = grads_s
            if extra_t:
                zero_out = np.zeros_like(logits[: len(idx_t)])
                grads_t = tinynn.backward(model, cache_t, zero_out, mask, extra_t)
                total = [
                    (gw1 + gw2, gb1 + gb2)
                    for (gw1, gb1), (gw2, gb2) in zip(grads_s, grads_t)
                ]
            tinynn.sgd_update(model, total, state, cfg.train, mask)
    return model


@dataclass(frozen=True)
class CandidatePool:
    """The 32 adapted detectors, indexed by conv-mask integer."""

    models: tuple

    def __post_init__(self):
        if len(self.models) != POOL_SIZE:
            raise tinynn.ConfigError(f"pool must hold exactly {POOL_SIZE} models")
        object.__setattr__(self, "models", tuple(self.models))

    def __getitem__(self, index: int) -> Model:
        return self.models[index]

    def __len__(self):
        return POOL_SIZE

    def get(self, mask: FreezeMask) -> Model:
        return self.models[mask.to_index()]


def build_pool(base: Model, source, target, cfg: AdaptConfig | None = None) -> CandidatePool:
    """Adapt one candidate per freeze/fine-tune mask, all from the same base.

    Candidate seeds derive from the run seed plus the mask index, so the 32
    adaptations are independent and the whole pool is reproducible.
    """
    cfg = cfg or AdaptConfig()
    models = []
    for index in range(POOL_SIZE):
        mask = FreezeMask.from_index(index)
        sub = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=cfg.train.seed + index)
        )
        models.append(adapt_with_mask(base, source, target, mask, sub))
    return CandidatePool(tuple(models))


def frozen_layers_match_base(pool: CandidatePool, base: Model) -> bool:
    """Every frozen conv layer of every candidate is bit-identical to the base."""
    conv_idx = base.conv_indices()
    for index, model in enumerate(pool.models):
        mask = FreezeMask.from_index(index)
        for li, bit in zip(conv_idx, mask.bits):
            if bit:
                continue
            if model.layers[li].w.tobytes() != base.layers[li].w.tobytes():
                return False
            if model.layers[li].b.tobytes() != base.layers[li].b.tobytes():
                return False
    return True


# ---------------------------------------------------------------------------
# Pool directory layout: cand_<00..31>.pva1 plus manifest.csv
# ---------------------------------------------------------------------------


def candidate_filename(index: int) -> str:
    return f"cand_{index:02d}.pva1"


def evaluate_candidate(model: Model, source, target, cfg: AdaptConfig | None = None):
    """Final objective pieces for the manifest: (source CE, summed FC MMD)."""
    cfg = cfg or AdaptConfig()
    xs2d, ys = tinynn.dataset_to_arrays(source)
    xt2d = _segment_matrix(target, "target")
    n_eval = 256
    logits, _ = tinynn.forward_batch(
        model, tinynn.prepare_input(model, xs2d.astype(model.dtype))
    )
    ce, _ = tinynn.cross_entropy(logits, ys)
    acts_s = fc_activations(model, xs2d[:n_eval])
    acts_t = fc_activations(model, xt2d[:n_eval])
    total_mmd = sum(mmd2(acts_s[i], acts_t[i], cfg.mmd) for i in acts_s)
    return float(ce), float(total_mmd)


def save_pool(pool: CandidatePool, dirpath, manifest_rows=None):
    """Write candidate files and manifest.csv into a pool directory."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for index, model in enumerate(pool.models):
        tinynn.save_model(model, dirpath / candidate_filename(index))
    with open(dirpath / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "mask_bits", "param_bytes", "final_ce", "final_mmd"])
        for index, model in enumerate(pool.models):
            bits = "".join(
                "1" if b else "0" for b in FreezeMask.from_index(index).bits
            )
            ce, mmd_val = ("", "")
            if manifest_rows is not None:
                ce, mmd_val = (f"{manifest_rows[index][0]:.6f}",
                               f"{manifest_rows[index][1]:.6f}")
            writer.writerow([index, bits, 4 * model.param_count(), ce, mmd_val])


def load_pool(dirpath) -> CandidatePool:
    dirpath = Path(dirpath)
    models = tuple(
        tinynn.load_model(dirpath / candidate_filename(i)) for i in range(POOL_SIZE)
    )
    return CandidatePool(models)
