"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable: every op returns a fresh tensor and the backing
arrays are marked read-only. Gradients are recorded on a :class:`GradTape`
that is active for the current context::

    with GradTape() as tape:
        loss = cross_entropy(conv2d(x, w, b), labels)
    tape.backward(loss)       # accumulates into w.grad, b.grad

Outside a tape, ops run without bookkeeping.
"""

from __future__ import annotations

import contextvars
import math
from collections.abc import Callable, Sequence

import numpy as np

from .errors import ContractError, EmptyLossError, ShapeError

IGNORE_INDEX = 255

_ACTIVE_TAPE: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar(
    "tmanet_active_tape", default=None
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = _frozen(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = _frozen(np.ascontiguousarray(arr, dtype=np.float64))
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros(self.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.shape)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.shape:
            raise ShapeError(f"cannot assign {value.shape} to parameter {self.name} of shape {self.shape}")
        self.data = _frozen(value.copy())

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self.visit_log: list[int] = []
        self._token = None

    def __enter__(self) -> GradTape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def op_names(self) -> list[str]:
        return [r[0] for r in self.records]

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (ones by default) from ``output`` to every leaf.

        Records are replayed strictly in reverse execution order. Leaves that
        require grad receive the result by accumulation into ``.grad``.
        """
        if grad is None:
            grad = np.ones(output.shape)
        pending: dict[int, tuple[Tensor, np.ndarray]] = {id(output): (output, np.asarray(grad, dtype=np.float64))}
        self.visit_log = []
        for idx in range(len(self.records) - 1, -1, -1):
            _, out, inputs, backward_fn = self.records[idx]
            entry = pending.pop(id(out), None)
            if entry is None:
                continue
            self.visit_log.append(idx)
            for inp, g in zip(inputs, backward_fn(entry[1])):
                if g is None or not inp.requires_grad:
                    continue
                prev = pending.get(id(inp))
                pending[id(inp)] = (inp, g if prev is None else prev[1] + g)
        for tensor, g in pending.values():
            if tensor.grad is None:
                tensor.grad = np.array(g, dtype=np.float64)
            else:
                tensor.grad = tensor.grad + g


def _record(name: str, out_arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((name, out, tuple(inputs), backward_fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), backward)


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    C, H, W = x.shape
    Ho = conv_output_extent(H, k, stride, pad)
    Wo = conv_output_extent(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    # (C, Ho, Wo, k, k) -> (C*k*k, Ho*Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, Ho * Wo)
    return cols, Ho, Wo


def _col2im(gcols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    C, H, W = shape
    g = gcols.reshape(C, k, k, Ho, Wo)
    gxp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g[:, i, j]
    return gxp[:, pad : pad + H, pad : pad + W]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of a single C_in x H x W image."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and O×C×k×k kernel, got {x.shape} and {kernel.shape}")
    O, C, k, k2 = kernel.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d supports square 1x1 or 3x3 kernels, got {k}x{k2}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ContractError(f"conv2d padding must be nonnegative, got {pad}")
    if C != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    _, H, W = x.shape
    if conv_output_extent(H, k, stride, pad) < 1 or conv_output_extent(W, k, stride, pad) < 1:
        raise ShapeError(f"conv2d output extent nonpositive for input {x.shape}, k={k}, stride={stride}, pad={pad}")

    cols, Ho, Wo = _im2col(x.data, k, stride, pad)
    W2 = kernel.data.reshape(O, C * k * k)
    out = (W2 @ cols + bias.data[:, None]).reshape(O, Ho, Wo)
    in_shape = x.shape

    def backward(g):
        g2 = g.reshape(O, Ho * Wo)
        gx = _col2im(W2.T @ g2, in_shape, k, stride, pad, Ho, Wo) if x.requires_grad else None
        gw = (g2 @ cols.T).reshape(O, C, k, k)
        return gx, gw, g2.sum(axis=1)

    return _record("conv2d", out, (x, kernel, bias), backward)


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax of an N×M matrix with per-row max subtraction."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {logits.shape}")
    s = logits.data - logits.data.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.einsum("ij,ij->i", g, s)[:, None]
        out = g - dot
        out *= s
        return (out,)

    return _record("softmax_rows", s, (logits,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[0]

    def backward(g):
        return g[:ca], g[ca:]

    return _record("concat_channels", np.concatenate([a.data, b.data], axis=0), (a, b), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack shape mismatch: {shape} vs {t.shape}")

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record("stack", np.stack([t.data for t in tensors]), tuple(tensors), backward)


def reshape_permute(t: Tensor, new_shape: Sequence[int], axis_order: Sequence[int] | None = None) -> Tensor:
    """Transpose by ``axis_order`` and then reshape to ``new_shape``."""
    ndim = t.data.ndim
    order = tuple(range(ndim)) if axis_order is None else tuple(int(a) for a in axis_order)
    if sorted(order) != list(range(ndim)):
        raise ShapeError(f"axis order {order} is not a permutation of {ndim} axes")
    new_shape = tuple(int(d) for d in new_shape)
    if any(d <= 0 for d in new_shape) or math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} (permuted by {order}) to {new_shape}")
    permuted_shape = tuple(t.shape[a] for a in order)
    inverse = tuple(np.argsort(order))

    def backward(g):
        return (g.reshape(permuted_shape).transpose(inverse),)

    return _record("reshape_permute", t.data.transpose(order).reshape(new_shape), (t,), backward)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", t.data * mask, (t,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _record("add", a.data + b.data, (a, b), backward)


def scale(t: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _record("scale", t.data * factor, (t,), backward)


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum_all", np.array(t.data.sum()), (t,), backward)


def interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Linear interpolation weights (half-pixel centers, edge clamped)."""
    R = np.zeros((out_size, in_size))
    if out_size == in_size:
        np.fill_diagonal(R, 1.0)
        return R
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    rows = np.arange(out_size)
    np.add.at(R, (rows, i0), 1.0 - lam)
    np.add.at(R, (rows, i1), lam)
    return R


def upsample_bilinear(t: Tensor, H: int, W: int) -> Tensor:
    if t.data.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects C×h×w, got {t.shape}")
    if H <= 0 or W <= 0:
        raise ShapeError(f"upsample target must be positive, got {H}x{W}")
    _, h, w = t.shape
    Ry = interp_matrix(H, h)
    Rx = interp_matrix(W, w)

    def backward(g):
        return (Ry.T @ g @ Rx,)

    return _record("upsample_bilinear", Ry @ t.data @ Rx.T, (t,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over the class axis of C×H×W logits."""
    if logits.data.ndim != 3:
        raise ShapeError(f"cross_entropy expects C×H×W logits, got {logits.shape}")
    labels = np.asarray(labels)
    C = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"label map {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    if not valid.any():
        raise EmptyLossError("empty loss: every pixel carries the ignore label")
    lab = labels[valid].astype(np.int64)
    if lab.min() < 0 or lab.max() >= C:
        raise ContractError(f"labels must lie in [0, {C}) or equal {ignore_index}")

    x = logits.data[:, valid]  # (C, P)
    m = x.max(axis=0, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=0, keepdims=True))
    logp = x - lse
    cols = np.arange(lab.size)
    count = lab.size
    loss = -logp[lab, cols].sum() / count

    def backward(g):
        p = np.exp(logp)
        p[lab, cols] -= 1.0
        full = np.zeros(logits.shape)
        full[:, valid] = p * (float(np.asarray(g).reshape(-1)[0]) / count)
        return (full,)

    return _record("cross_entropy", np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check_errors(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = 200,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Per-input max relative error between tape and central-difference grads.

    ``sample`` limits the numeric side to that many random coordinates per
    input; without it, every input must have at most ``max_elements`` entries.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for t in inputs:
        if sample is None and max_elements is not None and t.size > max_elements:
            raise ContractError(f"grad_check input has {t.size} elements (limit {max_elements})")

    saved = [(t.requires_grad, t.grad) for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = np.zeros(t.shape)
        with GradTape() as tape:
            out = f(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        tape.backward(out)
        analytic = [t.grad.copy() for t in inputs]
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = g

    errors = []
    for t, ga in zip(inputs, analytic):
        base = t.data
        flat_idx = np.arange(t.size)
        if sample is not None and t.size > sample:
            flat_idx = np.sort(rng.choice(t.size, size=sample, replace=False))
        worst = 0.0
        try:
            for i in flat_idx:
                plus = base.copy().reshape(-1)
                plus[i] += eps
                t.data = _frozen(plus.reshape(t.shape))
                fp = f(*inputs).item()
                minus = base.copy().reshape(-1)
                minus[i] -= eps
                t.data = _frozen(minus.reshape(t.shape))
                fm = f(*inputs).item()
                numeric = (fp - fm) / (2 * eps)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        finally:
            t.data = base
        errors.append(worst)
    return errors


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, **kwargs) -> float:
    """Max relative error of tape gradients against central differences."""
    return max(grad_check_errors(f, inputs, eps=eps, **kwargs), default=0.0)
