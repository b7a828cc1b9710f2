"""Small CNN classifiers, their training loop and the FSTM checkpoint format.

A model is a :class:`ModelSpec` (layer list plus named feature taps) and a
list of per-layer parameter arrays. Tap ``k`` names the activation after the
first ``k`` layers, so tap index 0 is the input image itself.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from featherstorm import tensor as T
from featherstorm.data import DatasetHandle, ImageTensor, RandomStream

MAGIC = b"FSTM"
FORMAT_VERSION = 1
PARAM_LAYERS = ("conv", "dense")


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelSpec:
    name: str
    layers: list
    feature_taps: dict
    input_shape: tuple
    num_classes: int
    default_tap: str | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        self.feature_taps = {str(k): int(v) for k, v in self.feature_taps.items()}
        if self.default_tap is None and self.feature_taps:
            self.default_tap = sorted(self.feature_taps)[0]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": self.layers,
            "feature_taps": self.feature_taps,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "default_tap": self.default_tap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], d["layers"], d["feature_taps"], d["input_shape"],
                   d["num_classes"], d.get("default_tap"))

    def shapes(self) -> list:
        """Activation shape (without batch axis) after each prefix of layers."""
        return layer_shapes(self)

    def tap_index(self, tap: str) -> int:
        if tap not in self.feature_taps:
            raise KeyError(f"model {self.name!r} has no feature tap {tap!r}; "
                           f"known: {sorted(self.feature_taps)}")
        return self.feature_taps[tap]


def _padding(layer) -> int:
    pad = layer.get("padding", "valid")
    if pad == "same":
        return (layer["kernel"] - 1) // 2
    if pad == "valid":
        return 0
    return int(pad)


def layer_shapes(spec: ModelSpec) -> list:
    if not spec.layers:
        raise SpecError(f"model {spec.name!r}: spec has no layers")
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"model {spec.name!r}: input_shape must be H x W x C, got {spec.input_shape}")
    shape = spec.input_shape
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        kind = layer.get("type")
        where = f"model {spec.name!r} layer {i} ({kind}) on input {shape}"
        if kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"{where}: conv needs an H x W x C input")
            k, s, p = layer["kernel"], layer.get("stride", 1), _padding(layer)
            h, w = (shape[0] + 2 * p - k) // s + 1, (shape[1] + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise SpecError(f"{where}: kernel {k} does not fit")
            shape = (h, w, layer["filters"])
        elif kind == "relu":
            pass
        elif kind == "pool":
            if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                raise SpecError(f"{where}: 2x2 pooling needs H, W >= 2")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"{where}: dense needs a flat input (add a flatten layer)")
            shape = (layer["units"],)
        else:
            raise SpecError(f"{where}: unknown layer type")
        shapes.append(shape)
    if shape != (spec.num_classes,):
        raise SpecError(f"model {spec.name!r}: final shape {shape} is not ({spec.num_classes},) logits")
    for tap, idx in spec.feature_taps.items():
        if not 0 <= idx <= len(spec.layers):
            raise SpecError(f"model {spec.name!r}: tap {tap!r} points at missing layer output {idx}")
    return shapes


def param_shapes(spec: ModelSpec) -> list:
    """Per-layer list of parameter shapes (weight, bias) or ``[]``."""
    shapes = layer_shapes(spec)
    out = []
    for layer, shape_in in zip(spec.layers, shapes):
        if layer["type"] == "conv":
            k = layer["kernel"]
            out.append([(k, k, shape_in[2], layer["filters"]), (layer["filters"],)])
        elif layer["type"] == "dense":
            out.append([(shape_in[0], layer["units"]), (layer["units"],)])
        else:
            out.append([])
    return out


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    params: list
    train_meta: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.spec.name

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.spec, [[p.copy() for p in ps] for ps in self.params],
                               copy.deepcopy(self.train_meta))


def build(spec: ModelSpec, seed: int) -> ModelCheckpoint:
    """Fresh parameters: uniform fan-in (He) scaling for weights, zero biases."""
    rng = RandomStream(seed, 0x5EED)
    params = []
    for shapes in param_shapes(spec):
        if not shapes:
            params.append([])
            continue
        wshape, bshape = shapes
        fan_in = int(np.prod(wshape[:-1]))
        bound = math.sqrt(6.0 / fan_in)
        params.append([rng.uniform(-bound, bound, wshape), np.zeros(bshape)])
    return ModelCheckpoint(spec, params, {})


# -- forward graphs ----------------------------------------------------------

def apply_layers(ckpt: ModelCheckpoint, node: T.Node, start: int = 0, stop: int | None = None,
                 trace: list | None = None, param_leaves: list | None = None) -> T.Node:
    """Run layers ``start:stop`` on ``node``.

    Parameters enter as constant leaves unless ``param_leaves`` supplies
    per-layer nodes (training). ``trace`` collects every activation.
    """
    layers = ckpt.spec.layers
    stop = len(layers) if stop is None else stop
    for i in range(start, stop):
        layer = layers[i]
        kind = layer["type"]
        if kind in PARAM_LAYERS:
            if param_leaves is not None:
                w, b = param_leaves[i]
            else:
                w, b = (T.leaf(p, name=f"param{i}") for p in ckpt.params[i])
            if kind == "conv":
                node = T.conv2d(node, w, b, layer.get("stride", 1), _padding(layer))
            else:
                node = T.dense(node, w, b)
        elif kind == "relu":
            node = T.relu(node)
        elif kind == "pool":
            node = T.maxpool2d(node)
        elif kind == "flatten":
            node = T.flatten(node)
        if trace is not None:
            trace.append(node)
    return node


def _batch(ckpt, x) -> np.ndarray:
    x = np.asarray(x.pixels if isinstance(x, ImageTensor) else x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != ckpt.spec.input_shape:
        raise T.ShapeError(f"model {ckpt.name!r} expects input {ckpt.spec.input_shape}, got {x.shape[1:]}")
    return x


def logits_batch(ckpt: ModelCheckpoint, x) -> np.ndarray:
    return apply_layers(ckpt, T.leaf(_batch(ckpt, x))).value


def predict_batch(ckpt: ModelCheckpoint, x, chunk: int = 256) -> np.ndarray:
    x = _batch(ckpt, x)
    out = [logits_batch(ckpt, x[i:i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict(ckpt: ModelCheckpoint, image) -> tuple:
    """Return ``(label, logits)``; argmax ties resolve to the lowest class index."""
    logits = logits_batch(ckpt, image)[0]
    return int(np.argmax(logits)), logits


def features_at(ckpt: ModelCheckpoint, image, tap: str) -> T.Node:
    """Tap activation node with the whole graph attached.

    The input leaf requires a gradient, so a loss built downstream of the
    returned node (or of the logits reachable through ``node.model_output``)
    can be differentiated with respect to it.
    """
    return tap_graph(ckpt, image, tap)[1]


def tap_graph(ckpt: ModelCheckpoint, x, tap: str, input_grad: bool = True) -> tuple:
    """Build ``(input_leaf, tap_node, logits_node)`` for a batch or a single image."""
    idx = ckpt.spec.tap_index(tap)
    x_leaf = T.leaf(_batch(ckpt, x), requires_grad=input_grad, name="input")
    f = apply_layers(ckpt, x_leaf, 0, idx)
    logits = apply_layers(ckpt, f, idx)
    return x_leaf, f, logits


def accuracy(ckpt: ModelCheckpoint, data: DatasetHandle) -> float:
    return float(np.mean(predict_batch(ckpt, data.pixels()) == data.labels()))


# -- training ---------------------------------------------------------------

TRAIN_RECIPE = {"optimizer": "sgd", "momentum": 0.9, "batch_size": 32,
                "schedule": "cosine", "weight_decay": 5e-4, "max_shift": 3, "hflip": True}


def augment_batch(x: np.ndarray, rng: RandomStream, max_shift: int, hflip: bool) -> np.ndarray:
    """Random translation (edge padded) and optional horizontal flip, per image."""
    n, h, w = x.shape[:3]
    s = max_shift
    padded = np.pad(x, ((0, 0), (s, s), (s, s), (0, 0)), mode="edge")
    dy = rng.integers(0, 2 * s + 1, n)
    dx = rng.integers(0, 2 * s + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, ::-1] if hflip and flip[i] else crop
    return out


def train(ckpt: ModelCheckpoint, data: DatasetHandle, epochs: int, lr: float, seed: int,
          test: DatasetHandle | None = None, log=None, augment: bool = True) -> ModelCheckpoint:
    """Minibatch SGD with momentum 0.9 and a per-epoch cosine learning rate.

    With ``augment`` each batch is randomly shifted by up to ``max_shift``
    pixels and flipped left-right. Returns a new checkpoint; the input
    checkpoint is left untouched.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = data.labels()
    if labels.min() < 0 or labels.max() >= ckpt.spec.num_classes:
        raise ValueError(f"label out of range for {ckpt.spec.num_classes} classes")
    out = ckpt.copy()
    x_all = data.pixels()
    rng = RandomStream(seed, 0x7EA1)
    bs, mom, wd = TRAIN_RECIPE["batch_size"], TRAIN_RECIPE["momentum"], TRAIN_RECIPE["weight_decay"]
    velocity = [[np.zeros_like(p) for p in ps] for ps in out.params]
    for epoch in range(epochs):
        lr_e = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        order = rng.permutation(len(data))
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            leaves = [[T.leaf(p, requires_grad=True) for p in ps] for ps in out.params]
            xb = x_all[idx]
            if augment:
                xb = augment_batch(xb, rng, TRAIN_RECIPE["max_shift"], TRAIN_RECIPE["hflip"])
            logits = apply_layers(out, T.leaf(xb), param_leaves=leaves)
            loss = T.softmax_cross_entropy(logits, labels[idx], "mean")
            T.backward(loss)
            for ps, ls, vs in zip(out.params, leaves, velocity):
                for j, (p, lf) in enumerate(zip(ps, ls)):
                    g = lf.grad + wd * p
                    vs[j] = mom * vs[j] + g
                    ps[j] = p - lr_e * vs[j]
        if log is not None:
            log(f"{out.name}: epoch {epoch + 1}/{epochs} lr={lr_e:.4g}")
    meta = {"seed": int(seed), "epochs": int(epochs), "lr": float(lr), "recipe": TRAIN_RECIPE,
            "augment": bool(augment),
            "train_accuracy": accuracy(out, data) if epochs else None}
    if test is not None:
        meta["test_accuracy"] = accuracy(out, test)
    out.train_meta = meta
    return out


# -- checkpoint files ---------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def dumps(ckpt: ModelCheckpoint) -> bytes:
    header = _canonical({"spec": ckpt.spec.to_dict(), "train_meta": ckpt.train_meta})
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
    buf.write(header)
    for ps in ckpt.params:
        for p in ps:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> ModelCheckpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise CheckpointError("truncated checkpoint header")
    version, n = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    doc = json.loads(raw[10:10 + n].decode("ascii"))
    spec = ModelSpec.from_dict(doc["spec"])
    pos = 10 + n
    params = []
    for shapes in param_shapes(spec):
        ps = []
        for shape in shapes:
            count = int(np.prod(shape))
            if pos + 8 * count > len(raw):
                raise CheckpointError("truncated parameter data")
            ps.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape))
            pos += 8 * count
        params.append(ps)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after parameters")
    return ModelCheckpoint(spec, params, doc.get("train_meta", {}))


def save(ckpt: ModelCheckpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())


# -- the zoo ----------------------------------------------------------------

def _conv(filters, kernel=3, padding="same"):
    return {"type": "conv", "filters": filters, "kernel": kernel, "stride": 1, "padding": padding}


RELU, POOL, FLAT = {"type": "relu"}, {"type": "pool"}, {"type": "flatten"}


def zoo(input_shape=(32, 32, 3), num_classes: int = 10) -> dict:
    """Three architecturally distinct classifiers; ``m0`` is the default surrogate."""
    dense_out = {"type": "dense", "units": num_classes}
    specs = [
        ModelSpec("m0", [_conv(16), RELU, POOL, _conv(32), RELU, POOL, _conv(64), RELU, POOL,
                         FLAT, dense_out],
                  {"input": 0, "block1": 3, "block2": 6, "block3": 9}, input_shape, num_classes, "block2"),
        ModelSpec("m1", [_conv(12, 5), RELU, POOL, _conv(24, 5), RELU, POOL, FLAT,
                         {"type": "dense", "units": 64}, RELU, dense_out],
                  {"input": 0, "block1": 3, "block2": 6}, input_shape, num_classes, "block1"),
        ModelSpec("m2", [_conv(8), RELU, _conv(16), RELU, POOL, _conv(32), RELU, POOL,
                         _conv(32, 3, "valid"), RELU, POOL, FLAT, dense_out],
                  {"input": 0, "block1": 4, "block2": 7, "block3": 12}, input_shape, num_classes, "block2"),
    ]
    for s in specs:
        layer_shapes(s)
    return {s.name: s for s in specs}
