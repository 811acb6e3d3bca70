"""Small chain-structured classifiers with per-layer activation access.

The model splits at any named layer ``l`` into a prefix ``f_l`` (input to
flattened activation) and a head ``h_l`` (activation to logits).  Both
halves reuse the same forward code, so ``h_l(f_l(x))`` reproduces the full
forward pass exactly.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ShapeError, TrainingDivergedError, UnsupportedVersionError

KINDS = ("conv", "dense", "relu", "flatten")
CHECKPOINT_MAGIC = b"CAVM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    units: int = 0          # conv filters or dense width
    kernel: int = 0
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("conv", "dense") and self.units < 1:
            raise ValueError(f"layer {self.name!r} needs a positive unit count")
        if self.kind == "conv":
            if self.kernel < 1 or self.stride not in (1, 2) or self.padding not in ("same", "valid"):
                raise ValueError(f"layer {self.name!r}: unsupported conv geometry")

    @classmethod
    def conv(cls, name, filters, kernel=3, stride=1, padding="same"):
        return cls(name, "conv", filters, kernel, stride, padding)

    @classmethod
    def dense(cls, name, units):
        return cls(name, "dense", units)

    @classmethod
    def relu(cls, name):
        return cls(name, "relu")

    @classmethod
    def flatten(cls, name):
        return cls(name, "flatten")

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv", "dense")


def _output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if spec.kind == "conv":
        if len(shape) != 3:
            raise ShapeError(f"conv layer {spec.name!r} needs an HWC input, got {shape}")
        h, w, _ = shape
        if spec.padding == "same":
            oh, ow = -(-h // spec.stride), -(-w // spec.stride)
        else:
            oh, ow = (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"conv layer {spec.name!r}: kernel larger than input {shape}")
        return (oh, ow, spec.units)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"dense layer {spec.name!r} needs a flat input, got {shape}; add a flatten layer")
        return (spec.units,)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def _f32(a: np.ndarray) -> np.ndarray:
    # Weights are kept float32-representable so checkpoints round-trip exactly.
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0, momentum in [0, 1), weight_decay >= 0")


@dataclass(frozen=True, eq=False)
class LayeredModel:
    """A single-chain classifier.

    ``weights`` maps each parametric layer name to ``(kernel, bias)``.
    Treat instances as immutable: training returns a new model.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    weights: dict = field(repr=False)
    shapes: dict = field(init=False, repr=False)

    def __post_init__(self):
        names = [s.name for s in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        shapes, shape = {}, tuple(self.input_shape)
        for spec in self.layers:
            shape = _output_shape(spec, shape)
            shapes[spec.name] = shape
        if shape != (self.num_classes,):
            raise ShapeError(f"final layer yields {shape}, expected ({self.num_classes},) logits")
        for spec in self.layers:
            if spec.parametric and spec.name not in self.weights:
                raise ValueError(f"missing weights for layer {spec.name!r}")
        object.__setattr__(self, "shapes", shapes)

    @property
    def layer_names(self) -> list[str]:
        return [s.name for s in self.layers]

    def width(self, layer: str) -> int:
        """Flattened activation width ``m_l`` of a layer."""
        self._index(layer)
        return int(np.prod(self.shapes[layer]))

    def _index(self, layer: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == layer:
                return i
        raise KeyError(f"unknown layer {layer!r}; valid layers: {', '.join(self.layer_names)}")

    def _layer_shape_in(self, index: int) -> tuple[int, ...]:
        return tuple(self.input_shape) if index == 0 else self.shapes[self.layers[index - 1].name]

    # -- forward pieces ----------------------------------------------------

    def _run(self, x, start: int, stop: int, params=None):
        params = self.weights if params is None else params
        for spec in self.layers[start:stop]:
            if spec.kind == "conv":
                k, b = params[spec.name]
                x = ad.add(ad.conv2d(x, k, spec.stride, spec.padding), b)
            elif spec.kind == "dense":
                k, b = params[spec.name]
                x = ad.add(ad.matmul(x, k), b)
            elif spec.kind == "relu":
                x = ad.relu(x)
            else:
                x = ad.flatten(x)
        return x

    def _batch(self, x, shape) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == tuple(shape):
            return x[None], True
        if x.shape[1:] != tuple(shape):
            raise ShapeError(f"expected input of shape {tuple(shape)} or a batch of them, got {x.shape}")
        return x, False

    def logits(self, x) -> np.ndarray:
        xb, single = self._batch(x, self.input_shape)
        out = self._run(ad.Tensor(xb), 0, len(self.layers)).data
        return out[0] if single else out

    def predict_proba(self, x) -> np.ndarray:
        return ad.softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def activation_at(self, layer: str, x) -> np.ndarray:
        """Flattened activation ``f_l(x)`` (length ``m_l``, or ``(N, m_l)`` for a batch)."""
        i = self._index(layer)
        xb, single = self._batch(x, self.input_shape)
        a = self._run(ad.Tensor(xb), 0, i + 1).data.reshape(len(xb), -1)
        return a[0] if single else a

    def _head_input(self, layer: str, a):
        i = self._index(layer)
        m = self.width(layer)
        a = np.asarray(a, dtype=np.float64)
        single = a.ndim == 1
        ab = a[None] if single else a
        if ab.ndim != 2 or ab.shape[1] != m:
            raise ShapeError(f"activation for layer {layer!r} must have width {m}, got {a.shape}")
        return i, ab, single

    def logit_head(self, layer: str, a) -> np.ndarray:
        """Logits ``h_l(a)`` computed from a flattened layer-``l`` activation."""
        i, ab, single = self._head_input(layer, a)
        t = ad.Tensor(ab.reshape((len(ab),) + self.shapes[layer]))
        out = self._run(t, i + 1, len(self.layers)).data
        return out[0] if single else out

    def logit_grad_at(self, layer: str, k: int, a) -> np.ndarray:
        """Gradient of the class-``k`` logit with respect to the layer-``l`` activation."""
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class {k} out of range [0, {self.num_classes})")
        i, ab, single = self._head_input(layer, a)
        tape = ad.Tape()
        leaf = tape.watch(ab.reshape((len(ab),) + self.shapes[layer]))
        out = self._run(leaf, i + 1, len(self.layers))
        select = np.zeros(self.num_classes)
        select[k] = 1.0
        # Samples are independent, so the gradient of the batch sum is per-sample.
        (g,) = tape.gradient(ad.reduce_sum(ad.mul(out, select)), [leaf])
        g = g.data.reshape(len(ab), -1)
        return g[0] if single else g

    def input_gradient(self, x, k=None, labels=None) -> np.ndarray:
        """d(logit k)/dx, or d(cross-entropy against ``labels``)/dx when labels are given."""
        xb, single = self._batch(x, self.input_shape)
        tape = ad.Tape()
        leaf = tape.watch(xb)
        out = self._run(leaf, 0, len(self.layers))
        if labels is not None:
            labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(xb),))
            obj = ad.softmax_cross_entropy(out, labels, reduction="sum")
        else:
            if not 0 <= k < self.num_classes:
                raise ValueError(f"class {k} out of range [0, {self.num_classes})")
            select = np.zeros(self.num_classes)
            select[k] = 1.0
            obj = ad.reduce_sum(ad.mul(out, select))
        (g,) = tape.gradient(obj, [leaf])
        return g.data[0] if single else g.data

    def with_weights(self, weights) -> "LayeredModel":
        return replace(self, weights=weights)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for spec in self.layers:
            if spec.parametric:
                for arr in self.weights[spec.name]:
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_model(layers, input_shape, num_classes, seed=0) -> LayeredModel:
    """He-uniform kernels (limit sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    weights, shape = {}, tuple(input_shape)
    for spec in layers:
        if spec.kind == "conv":
            fan_in = spec.kernel * spec.kernel * shape[2]
            lim = np.sqrt(6.0 / fan_in)
            k = rng.uniform(-lim, lim, (spec.kernel, spec.kernel, shape[2], spec.units))
            weights[spec.name] = (_f32(k), np.zeros(spec.units))
        elif spec.kind == "dense":
            lim = np.sqrt(6.0 / shape[0])
            k = rng.uniform(-lim, lim, (shape[0], spec.units))
            weights[spec.name] = (_f32(k), np.zeros(spec.units))
        shape = _output_shape(spec, shape)
    return LayeredModel(tuple(layers), tuple(input_shape), num_classes, weights)


def reference_layers(num_classes: int, stride: int = 2) -> list[LayerSpec]:
    """conv(3x3,8) -> relu -> conv(3x3,16) -> relu -> flatten -> dense(64) -> relu -> dense(K)."""
    return [
        LayerSpec.conv("conv1", 8, 3, stride),
        LayerSpec.relu("relu1"),
        LayerSpec.conv("conv2", 16, 3, stride),
        LayerSpec.relu("relu2"),
        LayerSpec.flatten("flatten"),
        LayerSpec.dense("fc1", 64),
        LayerSpec.relu("relu3"),
        LayerSpec.dense("logits", num_classes),
    ]


def reference_model(input_shape=(32, 32, 3), num_classes=3, seed=0) -> LayeredModel:
    return init_model(reference_layers(num_classes), input_shape, num_classes, seed)


def train(model: LayeredModel, dataset, cfg: TrainConfig) -> tuple[LayeredModel, list[float]]:
    """Minibatch SGD with momentum on mean softmax cross-entropy.

    ``dataset`` needs ``inputs`` and ``labels`` attributes.  Returns the
    trained model and the mean loss of each epoch.
    """
    x = np.asarray(dataset.inputs, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if x.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"dataset inputs {x.shape[1:]} do not match model input {model.input_shape}")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")

    rng = np.random.default_rng(cfg.seed)
    params = {name: [w.copy() for w in pair] for name, pair in model.weights.items()}
    velocity = {name: [np.zeros_like(w) for w in pair] for name, pair in params.items()}
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = ad.Tape()
            taped = {name: tuple(tape.watch(w) for w in pair) for name, pair in params.items()}
            out = model._run(ad.Tensor(x[idx]), 0, len(model.layers), taped)
            loss = ad.softmax_cross_entropy(out, y[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            flat = [t for pair in taped.values() for t in pair]
            grads = iter(tape.gradient(loss, flat))
            for name, pair in params.items():
                for j, w in enumerate(pair):
                    g = next(grads).data + cfg.weight_decay * w
                    v = velocity[name][j]
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    w += v
            total += float(loss.data) * len(idx)
        losses.append(total / len(x))
        if not np.isfinite(losses[-1]):
            raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
    if cfg.epochs == 0:
        return model, losses
    with np.errstate(over="ignore"):
        weights = {name: (_f32(k), _f32(b)) for name, (k, b) in params.items()}
    if not all(np.isfinite(w).all() for pair in weights.values() for w in pair):
        raise TrainingDivergedError("weights overflowed float32 during training", epoch=cfg.epochs - 1)
    return model.with_weights(weights), losses


def accuracy(model: LayeredModel, inputs, labels, batch_size: int = 512) -> float:
    inputs = np.asarray(inputs)
    labels = np.asarray(labels)
    if len(inputs) == 0:
        return float("nan")
    preds = np.concatenate([model.predict(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)])
    return float(np.mean(preds == labels))


# -- checkpoint format --------------------------------------------------------
# "CAVM" | u16 version | u8 input rank | rank x u32 dims | u32 classes |
# u32 layer count | per layer: u8 kind tag, u16 name length, utf-8 name,
# u8 int count, i32 ints | TNSR blocks (kernel, bias) per parametric layer.

_KIND_TAG = {k: i for i, k in enumerate(KINDS)}
_PADDING = ("valid", "same")


def _layer_ints(spec: LayerSpec) -> tuple[int, ...]:
    if spec.kind == "conv":
        return (spec.units, spec.kernel, spec.stride, _PADDING.index(spec.padding))
    if spec.kind == "dense":
        return (spec.units,)
    return ()


def model_bytes(model: LayeredModel) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
    out.write(struct.pack("<B", len(model.input_shape)))
    out.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    out.write(struct.pack("<II", model.num_classes, len(model.layers)))
    for spec in model.layers:
        name = spec.name.encode("utf-8")
        ints = _layer_ints(spec)
        out.write(struct.pack("<BH", _KIND_TAG[spec.kind], len(name)) + name)
        out.write(struct.pack(f"<B{len(ints)}i", len(ints), *ints))
    for spec in model.layers:
        if spec.parametric:
            for arr in model.weights[spec.name]:
                out.write(ad.tnsr_bytes(arr))
    return out.getvalue()


def _unpack(fh, fmt):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def model_from_bytes(data: bytes) -> LayeredModel:
    fh = io.BytesIO(data)
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic: not a CAVM checkpoint")
    (version,) = _unpack(fh, "<H")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})")
    (rank,) = _unpack(fh, "<B")
    input_shape = _unpack(fh, f"<{rank}I")
    num_classes, count = _unpack(fh, "<II")
    layers = []
    for _ in range(count):
        tag, nlen = _unpack(fh, "<BH")
        if tag >= len(KINDS):
            raise FormatError(f"unknown layer kind tag {tag}")
        name = fh.read(nlen)
        if len(name) != nlen:
            raise FormatError("truncated checkpoint")
        (nints,) = _unpack(fh, "<B")
        ints = _unpack(fh, f"<{nints}i")
        kind = KINDS[tag]
        if kind == "conv":
            spec = LayerSpec.conv(name.decode("utf-8"), ints[0], ints[1], ints[2], _PADDING[ints[3]])
        elif kind == "dense":
            spec = LayerSpec.dense(name.decode("utf-8"), ints[0])
        else:
            spec = LayerSpec(name.decode("utf-8"), kind)
        layers.append(spec)
    weights = {}
    for spec in layers:
        if spec.parametric:
            weights[spec.name] = (ad.read_tnsr_stream(fh), ad.read_tnsr_stream(fh))
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint")
    model = LayeredModel(tuple(layers), tuple(input_shape), num_classes, weights)
    for spec in layers:
        if spec.parametric:
            k, b = weights[spec.name]
            shape_in = model._layer_shape_in(model._index(spec.name))
            fan_in = shape_in[-1] if spec.kind == "conv" else shape_in[0]
            expect = (spec.kernel, spec.kernel, fan_in, spec.units) if spec.kind == "conv" else (fan_in, spec.units)
            if k.shape != expect or b.shape != (spec.units,):
                raise FormatError(f"weight shapes for layer {spec.name!r} do not match the architecture")
    return model


def save_model(model: LayeredModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def load_model(path) -> LayeredModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
