"""Feature-importance transfer attacks on top of a momentum iterative backbone.

Feature variants first aggregate the gradient of the true-class log
probability at a feature tap over ``ensemble_n`` randomly transformed copies
of the clean image, normalise it to unit Frobenius norm, and then minimise ``sum(delta * f_k(x_adv))`` with
signed momentum steps inside the L-inf ball. ``MIM_CE`` skips the weight
matrix and ascends the cross-entropy directly.

Every public function has a batched twin (``*_batch``) that the evaluation
harness uses; the single-image versions are thin wrappers around them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from featherstorm import models
from featherstorm import tensor as T
from featherstorm.data import DatasetHandle, ImageTensor, RandomStream
from featherstorm.frequency import hf_corner_noise
from featherstorm.transforms import blockmix_probe, pixel_drop, safer_probe, selfmix_probe

VARIANTS = ("MIM_CE", "FIA", "SAFER", "SAFER_BLOCKMIX_ONLY", "SAFER_SELFMIX_ONLY", "HF_NOISE")
PROBE_ROWS = 240


class DegenerateGradientError(ArithmeticError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    steps: int = 10
    alpha: float = 1.6 / 255
    momentum_decay: float = 1.0
    ensemble_n: int = 30
    n_b: int = 5
    keep_p: float = 0.9
    mix_mu: float = 0.4
    beta_range: tuple = (-math.pi / 4, math.pi / 4)
    tau: int = 16
    hf_sigma: float | None = None
    p_d: float = 0.3
    tap: str | None = None
    variant: str = "SAFER"

    def __post_init__(self):
        object.__setattr__(self, "beta_range", tuple(float(b) for b in self.beta_range))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not self.epsilon > 0 or not self.alpha > 0:
            raise ValueError("epsilon and alpha must be positive")
        if self.steps < 1 or self.ensemble_n < 1:
            raise ValueError("steps and ensemble_n must be at least 1")
        for name in ("keep_p", "mix_mu", "p_d"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}={getattr(self, name)} outside [0, 1]")
        lo, hi = self.beta_range
        if not -math.pi <= lo <= hi <= math.pi:
            raise ValueError(f"beta_range {self.beta_range} must be ordered within [-pi, pi]")

    def replace(self, **kw) -> "AttackConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_range"] = list(self.beta_range)
        return d

    def digest(self) -> str:
        return config_digest([self])


def config_digest(cfgs) -> str:
    blob = json.dumps([c.to_dict() for c in cfgs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class WeightMatrix:
    delta: np.ndarray
    tap: str
    copies_used: int


@dataclass
class AdversarialResult:
    x_adv: ImageTensor
    original_id: int
    queries: int
    linf: float
    # worst L-inf distance and pixel range seen over all iterates
    iterate_linf: float = 0.0
    iterate_range: tuple = field(default=(0.0, 1.0))


def tap_for(model: models.ModelCheckpoint, cfg: AttackConfig) -> str:
    return cfg.tap or model.spec.default_tap


# -- weight matrix ---------------------------------------------------------

def make_probe(x: ImageTensor, data: DatasetHandle, cfg: AttackConfig, rng: RandomStream) -> np.ndarray:
    v = cfg.variant
    if v == "SAFER":
        return safer_probe(x, data, cfg, rng)
    if v == "SAFER_BLOCKMIX_ONLY":
        return blockmix_probe(x, data, cfg, rng)
    if v == "SAFER_SELFMIX_ONLY":
        return selfmix_probe(x, data, cfg, rng)
    if v == "FIA":
        return pixel_drop(x, cfg.p_d, rng).pixels
    if v == "HF_NOISE":
        return hf_corner_noise(x, cfg.tau, cfg.hf_sigma, rng)
    raise ValueError(f"variant {v!r} has no probe transform")


def feature_gradients(model: models.ModelCheckpoint, probes: np.ndarray, labels, tap: str) -> np.ndarray:
    """Per-row gradient of the true-class log-probability (negated cross-entropy) w.r.t. the tap.

    Positive entries mark features that support the true class; descending
    ``sum(delta * f)`` suppresses them.
    """
    idx = model.spec.tap_index(tap)
    out = []
    for i in range(0, len(probes), PROBE_ROWS):
        f_val = models.apply_layers(model, T.leaf(probes[i:i + PROBE_ROWS]), 0, idx).value
        f = T.leaf(f_val, requires_grad=True, name="tap")
        loss = T.softmax_cross_entropy(models.apply_layers(model, f, idx), labels[i:i + PROBE_ROWS], "sum")
        T.backward(loss)
        out.append(-T.grad_at(f))
    return np.concatenate(out)


def aggregate_weight_matrix_batch(model, images, data, cfg, rngs) -> list:
    tap = tap_for(model, cfg)
    n = cfg.ensemble_n
    probes = np.stack([make_probe(x, data, cfg, rng) for x, rng in zip(images, rngs) for _ in range(n)])
    labels = np.repeat([x.label for x in images], n)
    grads = feature_gradients(model, probes, labels, tap)
    grads = grads.reshape((len(images), n) + grads.shape[1:])
    out = []
    for x, g in zip(images, grads):
        delta = g[0].copy()
        for k in range(1, n):
            delta += g[k]
        norm = math.sqrt(float(np.sum(delta * delta)))
        if norm == 0.0 or not math.isfinite(norm):
            raise DegenerateGradientError(f"image {x.id}: aggregated feature gradient has norm {norm}")
        out.append(WeightMatrix(delta / norm, tap, n))
    return out


def aggregate_weight_matrix(model, x: ImageTensor, data: DatasetHandle, cfg: AttackConfig,
                            rng: RandomStream) -> WeightMatrix:
    return aggregate_weight_matrix_batch(model, [x], data, cfg, [rng])[0]


# -- objectives ----------------------------------------------------------------

def feature_loss(model, x_adv, wm) -> T.Node:
    """Scalar node ``sum(delta * f_k(x_adv))``; batches stack their deltas on axis 0."""
    deltas = wm if isinstance(wm, np.ndarray) else np.asarray(wm.delta)
    tap = wm.tap if isinstance(wm, WeightMatrix) else None
    x_arr = np.asarray(x_adv.pixels if isinstance(x_adv, ImageTensor) else x_adv, dtype=np.float64)
    single = x_arr.ndim == 3
    x_leaf = T.leaf(x_arr[None] if single else x_arr, requires_grad=True, name="input")
    f = models.apply_layers(model, x_leaf, 0, model.spec.tap_index(tap or model.spec.default_tap))
    d = deltas[None] if single else deltas
    if d.shape != f.value.shape:
        raise T.ShapeError(f"feature_loss: weight matrix {deltas.shape} does not match tap activation "
                           f"{f.value.shape[1:] if single else f.value.shape}")
    return T.total(T.mul(T.leaf(d), f))


def _input_grad_fn(model, loss_kind, labels, deltas, tap):
    def grad(x):
        x_leaf = T.leaf(x, requires_grad=True, name="input")
        if loss_kind == "cross_entropy":
            loss = T.softmax_cross_entropy(models.apply_layers(model, x_leaf), labels, "sum")
        else:
            f = models.apply_layers(model, x_leaf, 0, model.spec.tap_index(tap))
            loss = T.total(T.mul(T.leaf(deltas), f))
        T.backward(loss)
        return T.grad_at(x_leaf)

    return grad


# -- momentum iterative backbone ---------------------------------------------

def mim_iterate(x0: np.ndarray, grad_fn, cfg: AttackConfig, ascent: bool, on_iterate=None) -> np.ndarray:
    """Run ``cfg.steps`` signed momentum steps from ``x0`` (batch on axis 0).

    Each step L1-normalises the gradient per sample, folds it into the
    momentum buffer, steps by ``alpha * sign(g)`` (up for ascent, down for
    descent) and projects onto the epsilon box intersected with [0, 1].
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lo = np.maximum(x0 - cfg.epsilon, 0.0)
    hi = np.minimum(x0 + cfg.epsilon, 1.0)
    axes = tuple(range(1, x0.ndim))
    x = x0.copy()
    g = np.zeros_like(x0)
    direction = 1.0 if ascent else -1.0
    for t in range(cfg.steps):
        grad = grad_fn(x)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite input gradient at step {t}")
        l1 = np.abs(grad).sum(axis=axes, keepdims=True)
        normed = np.divide(grad, l1, out=np.zeros_like(grad), where=l1 > 0)
        g = cfg.momentum_decay * g + normed
        x = np.clip(x + direction * cfg.alpha * np.sign(g), lo, hi)
        if on_iterate is not None:
            on_iterate(t + 1, x)
    return x


class _IterateMonitor:
    def __init__(self, x0):
        self.x0 = x0
        self.linf = np.zeros(len(x0))
        self.lo = np.full(len(x0), np.inf)
        self.hi = np.full(len(x0), -np.inf)

    def __call__(self, t, x):
        axes = tuple(range(1, x.ndim))
        self.linf = np.maximum(self.linf, np.abs(x - self.x0).max(axis=axes))
        self.lo = np.minimum(self.lo, x.min(axis=axes))
        self.hi = np.maximum(self.hi, x.max(axis=axes))


def mim_attack_batch(model, images, loss_kind, cfg: AttackConfig, deltas=None, extra_queries=0) -> list:
    x0 = np.stack([img.pixels for img in images])
    labels = np.array([img.label for img in images], dtype=np.int64)
    tap = tap_for(model, cfg)
    if loss_kind != "cross_entropy":
        loss_kind = "feature"
        deltas = np.stack([wm.delta for wm in deltas])
    monitor = _IterateMonitor(x0)
    grad_fn = _input_grad_fn(model, loss_kind, labels, deltas, tap)
    x = mim_iterate(x0, grad_fn, cfg, ascent=loss_kind == "cross_entropy", on_iterate=monitor)
    results = []
    for i, img in enumerate(images):
        results.append(AdversarialResult(
            img.with_pixels(x[i]), img.id, cfg.steps + extra_queries,
            float(np.abs(x[i] - x0[i]).max()), float(monitor.linf[i]),
            (float(monitor.lo[i]), float(monitor.hi[i]))))
    return results


def mim_attack(model, x: ImageTensor, loss_kind, cfg: AttackConfig) -> AdversarialResult:
    """``loss_kind`` is ``"cross_entropy"`` or a :class:`WeightMatrix` for the feature objective."""
    if isinstance(loss_kind, WeightMatrix):
        if loss_kind.tap != tap_for(model, cfg):
            cfg = cfg.replace(tap=loss_kind.tap)
        return mim_attack_batch(model, [x], "feature", cfg, [loss_kind])[0]
    if loss_kind != "cross_entropy":
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return mim_attack_batch(model, [x], "cross_entropy", cfg)[0]


# -- variants ------------------------------------------------------------------

def run_variant_batch(model, images, data, cfg: AttackConfig, rngs) -> list:
    if cfg.variant == "MIM_CE":
        return mim_attack_batch(model, images, "cross_entropy", cfg)
    wms = aggregate_weight_matrix_batch(model, images, data, cfg, rngs)
    return mim_attack_batch(model, images, "feature", cfg, wms, extra_queries=cfg.ensemble_n)


def run_variant(model, x: ImageTensor, data: DatasetHandle, cfg: AttackConfig, rng: RandomStream) -> AdversarialResult:
    return run_variant_batch(model, [x], data, cfg, [rng])[0]
