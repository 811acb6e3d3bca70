"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is created per computation.  Tensors produced by
``tape.watch`` carry a reference to that tape, and every op applied to a
taped tensor appends one :class:`TapeNode`.  Tensors without a tape are
plain constants; ops on them just compute values.

    tape = Tape()
    x = tape.watch([1.0, 2.0, 3.0])
    y = reduce_sum(mul(x, x))
    (dx,) = tape.gradient(y, [x])      # -> [2, 4, 6]
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, GradientError, ShapeError

__all__ = [
    "Op", "Tensor", "Tape", "TapeNode",
    "add", "sub", "mul", "matmul", "conv2d", "relu", "softmax_cross_entropy",
    "reduce_sum", "flatten", "reshape", "softmax", "gradient",
    "write_tnsr", "read_tnsr", "tnsr_bytes", "tnsr_from_bytes",
]


class Op(enum.Enum):
    LEAF = "leaf"
    ADD = "add"
    MUL = "mul"
    MATMUL = "matmul"
    CONV2D = "conv2d"
    RELU = "relu"
    SOFTMAX_XENT = "softmax_cross_entropy"
    REDUCE_SUM = "reduce_sum"
    FLATTEN = "flatten"
    RESHAPE = "reshape"


class Tensor:
    """Immutable n-dimensional float64 array, optionally bound to a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, *, tape: "Tape | None" = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        taped = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{taped})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    op: Op
    inputs: tuple[int | None, ...]
    # Maps the output cotangent to one cotangent per input (None = no gradient).
    vjp: Callable[[np.ndarray], tuple] | None = field(default=None, repr=False)


class Tape:
    """Records ops applied to watched tensors, in creation order.

    Creation order is a topological order, so the backward sweep is a
    single reverse scan that touches each node at most once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Return a new leaf tensor holding ``value`` that records on this tape."""
        if isinstance(value, Tensor):
            value = value.data
        self.nodes.append(TapeNode(Op.LEAF, ()))
        return Tensor(value, tape=self, node=len(self.nodes) - 1)

    def _record(self, op, inputs, value, vjp) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(TapeNode(op, ids, vjp))
        return Tensor(value, tape=self, node=len(self.nodes) - 1)

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of the scalar ``output`` with respect to each of ``wrt``."""
        if output.tape is not self:
            raise GradientError("output was not recorded on this tape")
        if output.size != 1:
            raise GradientError(f"gradient needs a scalar output, got shape {output.shape}")
        wanted = {}
        for t in wrt:
            if not isinstance(t, Tensor) or t.tape is not self:
                raise GradientError("cannot differentiate with respect to a tensor detached from this tape")
            wanted[t.node] = None

        grads: dict[int, np.ndarray] = {output.node: np.ones(output.shape)}
        for idx in range(output.node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            if idx in wanted:
                wanted[idx] = g
            node = self.nodes[idx]
            if node.vjp is None:
                continue
            for inp, part in zip(node.inputs, node.vjp(g)):
                if inp is None or part is None:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + part
                else:
                    grads[inp] = part

        out = []
        for t in wrt:
            g = wanted[t.node]
            out.append(Tensor(np.zeros(t.shape) if g is None else g))
        return out


def gradient(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    if output.tape is None:
        raise GradientError("output was computed without a tape")
    return output.tape.gradient(output, wrt)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> "Tape | None":
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise GradientError("operands are recorded on different tapes")
    return next(iter(tapes.values()), None)


def _finish(op, inputs, value, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(op, inputs, value, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish(Op.ADD, (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish(Op.MUL, (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def matmul(a, b) -> Tensor:
    """Matrix product of a (n, k) and a (k, m) operand; 1-D operands are promoted."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def vjp(g):
        a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape)

    return _finish(Op.MATMUL, (a, b), ad @ bd, vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _finish(Op.RELU, (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def reduce_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    value = x.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(Op.REDUCE_SUM, (x,), value, vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _finish(Op.RESHAPE, (x,), value, lambda g: (g.reshape(old),))


def flatten(x) -> Tensor:
    """Collapse every axis after the leading batch axis, row-major."""
    x = _as_tensor(x)
    if x.data.ndim < 1:
        raise ShapeError("flatten: needs at least one (batch) axis")
    old = x.shape
    value = x.data.reshape(old[0], -1)
    return _finish(Op.FLATTEN, (x,), value, lambda g: (g.reshape(old),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Per-sample ``-log softmax(logits)[label]``, reduced by mean, sum or none."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    losses = logsum - z[np.arange(n), labels]
    probs = np.exp(z - logsum[:, None])
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    if reduction == "none":
        value, scale = losses, None
    elif reduction == "sum":
        value, scale = losses.sum(), 1.0
    elif reduction == "mean":
        value, scale = losses.mean(), 1.0 / max(n, 1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def vjp(g):
        if scale is None:
            return ((probs - onehot) * g[:, None],)
        return ((probs - onehot) * (g * scale),)

    return _finish(Op.SOFTMAX_XENT, (logits,), value, vjp)


def _same_padding(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation of NHWC input with an HWIO kernel.

    ``padding="same"`` pads so the output has ``ceil(size / stride)`` rows and
    columns, with any odd pixel of padding placed after the image.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[3] != kd.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} (NHWC) and kernel {kernel.shape} (HWIO) do not conform")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    n, h, w, c = xd.shape
    kh, kw, _, o = kd.shape
    if padding == "same":
        oh, pt, pb = _same_padding(h, kh, stride)
        ow, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ShapeError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :oh, :ow]  # (n, oh, ow, c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * c)
    kmat = kd.reshape(kh * kw * c, o)
    value = (cols @ kmat).reshape(n, oh, ow, o)

    def vjp(g):
        g2 = g.reshape(n * oh * ow, o)
        dk = (cols.T @ g2).reshape(kd.shape)
        dcols = (g2 @ kmat.T).reshape(n, oh, ow, kh, kw, c)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return dx, dk

    return _finish(Op.CONV2D, (x, kernel), value, vjp)


# -- TNSR binary format ------------------------------------------------------
# "TNSR", u32 rank, rank x u32 extents, row-major little-endian f32 payload.

_TNSR_MAGIC = b"TNSR"


def tnsr_bytes(array) -> bytes:
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype=np.float64)
    head = _TNSR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated TNSR data while reading {what}")
    return buf


def read_tnsr_stream(fh) -> np.ndarray:
    if _read_exact(fh, 4, "magic") != _TNSR_MAGIC:
        raise FormatError("bad magic: not a TNSR block")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def tnsr_from_bytes(data: bytes) -> np.ndarray:
    fh = io.BytesIO(data)
    arr = read_tnsr_stream(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after TNSR block")
    return arr


def write_tnsr(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(tnsr_bytes(array))


def read_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tnsr_from_bytes(fh.read())
