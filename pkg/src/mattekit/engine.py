"""Minimal dense-tensor reverse-mode autodiff engine.

Implements exactly the operations the matting model and losses need:
convolution, relu/sigmoid, nearest upsampling, elementwise arithmetic,
channel concat/repeat, replication padding, cropping and reduction to a
scalar. Every op carries an analytic backward rule; ``finite_diff_check``
verifies any composition of them against central differences.

Values are float32 by default (determinism over last-bit accuracy); ops
inherit the dtype of their inputs so the gradient checker can re-run the
same rules in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Name of an op whose backward rule is deliberately mis-scaled, or None.
# Only for negative-control tests of the gradient checker.
_corrupted_op: str | None = None


class NonFiniteError(ArithmeticError):
    """A value that must be finite (loss, gradient) is NaN or infinite."""


class corrupted_backward:
    """Context manager that breaks one op's backward rule (tests only)."""

    def __init__(self, op_name: str):
        self.op_name = op_name

    def __enter__(self):
        global _corrupted_op
        _corrupted_op = self.op_name
        return self

    def __exit__(self, *exc):
        global _corrupted_op
        _corrupted_op = None
        return False


def _corruption(op_name: str) -> float:
    return 1.5 if _corrupted_op == op_name else 1.0


class Tensor:
    """Node in a reverse-mode computation graph.

    ``values`` holds the forward result, ``grad`` the accumulated gradient
    (same shape, allocated lazily). ``parents`` keeps the producing inputs
    alive so backward can walk the graph in reverse topological order.
    """

    __slots__ = ("values", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, values, requires_grad: bool = False, parents: tuple = (),
                 op: str = "leaf", backward_fn: Callable | None = None,
                 dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.op = op
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match value shape {self.values.shape}")
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """Named trainable tensor; names are unique within a model and stable
    across save/load."""

    tensor: Tensor
    name: str

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def constant(values, like: Tensor | None = None) -> Tensor:
    """Wrap an array as a non-differentiable leaf, matching ``like``'s dtype."""
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=False)


def _result(values, parents, op, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=requires, parents=tuple(parents),
                  op=op, backward_fn=backward_fn if requires else None)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.values + b.values, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(a.values - b.values, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(g * b.values)
        if b.requires_grad:
            b.accumulate_grad(g * a.values)

    return _result(a.values * b.values, (a, b), "mul", backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Dispatch form of add/sub/mul for callers configured by name."""
    try:
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """y = scale * x + shift with python scalars."""
    s = x.values.dtype.type(scale)
    c = x.values.dtype.type(shift)

    def backward(g, out):
        x.accumulate_grad(g * s)

    return _result(x.values * s + c, (x,), "affine", backward)


def absolute(x: Tensor) -> Tensor:
    """|x|; subgradient 0 at 0."""

    def backward(g, out):
        x.accumulate_grad(g * np.sign(x.values))

    return _result(np.abs(x.values), (x,), "abs", backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward(g, out):
        x.accumulate_grad(g * mask * _corruption("relu"))

    return _result(x.values * mask, (x,), "relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    # Stable two-branch form; clamp keeps the output strictly inside (0, 1)
    # even where float32 rounding would saturate it.
    v = x.values
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v)))).astype(v.dtype)
    one = v.dtype.type(1)
    np.clip(y, np.nextafter(v.dtype.type(0), one), np.nextafter(one, 0), out=y)

    def backward(g, out):
        x.accumulate_grad(g * y * (1.0 - y) * _corruption("sigmoid"))

    return _result(y, (x,), "sigmoid", backward)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_all(x: Tensor) -> Tensor:
    def backward(g, out):
        x.accumulate_grad(np.full_like(x.values, g.reshape(())[()]))

    return _result(np.asarray(x.values.sum(), dtype=x.dtype), (x,), "sum", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 4 or b.values.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: shapes {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:])

    return _result(np.concatenate([a.values, b.values], axis=1), (a, b),
                   "concat_channels", backward)


def repeat_channels(x: Tensor, n: int) -> Tensor:
    """Tile a 1-channel NCHW tensor to n channels; backward sums the copies."""
    if x.values.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"repeat_channels expects N1HW input, got {x.shape}")

    def backward(g, out):
        x.accumulate_grad(g.sum(axis=1, keepdims=True))

    return _result(np.repeat(x.values, n, axis=1), (x,), "repeat_channels", backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    if x.values.ndim != 4:
        raise ValueError("upsample2x expects an NCHW tensor")
    n, c, h, w = x.shape

    def backward(g, out):
        x.accumulate_grad(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    up = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)
    return _result(up, (x,), "upsample2x", backward)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window; backward zero-pads."""
    if x.values.ndim != 4:
        raise ValueError("crop2d expects an NCHW tensor")
    n, c, h, w = x.shape
    if height > h or width > w:
        raise ValueError(f"crop2d: target ({height},{width}) exceeds input ({h},{w})")

    def backward(g, out):
        full = np.zeros_like(x.values)
        full[:, :, :height, :width] = g
        x.accumulate_grad(full)

    return _result(np.ascontiguousarray(x.values[:, :, :height, :width]),
                   (x,), "crop2d", backward)


def replication_pad2d(x: Tensor, pad: int) -> Tensor:
    """Edge-replicate padding on both spatial axes."""
    if x.values.ndim != 4:
        raise ValueError("replication_pad2d expects an NCHW tensor")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    p = pad

    def backward(g, out):
        # Fold padded rows into their source row, then columns likewise.
        rows = np.empty((n, c, h, w + 2 * p), dtype=g.dtype)
        rows[:, :, 0] = g[:, :, :p + 1].sum(axis=2)
        if h > 1:
            rows[:, :, 1:h - 1] = g[:, :, p + 1:p + h - 1]
            rows[:, :, h - 1] = g[:, :, p + h - 1:].sum(axis=2)
        else:
            rows[:, :, 0] += g[:, :, p + 1:].sum(axis=2)
        cols = np.empty((n, c, h, w), dtype=g.dtype)
        cols[:, :, :, 0] = rows[:, :, :, :p + 1].sum(axis=3)
        if w > 1:
            cols[:, :, :, 1:w - 1] = rows[:, :, :, p + 1:p + w - 1]
            cols[:, :, :, w - 1] = rows[:, :, :, p + w - 1:].sum(axis=3)
        else:
            cols[:, :, :, 0] += rows[:, :, :, p + 1:].sum(axis=3)
        x.accumulate_grad(cols)

    padded = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    return _result(padded, (x,), "replication_pad2d", backward)


# ---------------------------------------------------------------------------
# convolution

def _im2col(padded: np.ndarray, k: int, stride: int, hout: int, wout: int) -> np.ndarray:
    n, cin = padded.shape[:2]
    s0, s1, s2, s3 = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, cin, k, k, hout, wout),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, cin * k * k, hout * wout)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation (no kernel flip), zero padding.

    x: (N, Cin, H, W), weight: (Cout, Cin, k, k), bias: (Cout,) or None.
    """
    if x.values.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got rank {x.values.ndim}")
    if weight.values.ndim != 4:
        raise ValueError(f"conv2d weight must be (Cout,Cin,k,k), got rank {weight.values.ndim}")
    n, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} must be ({cout},)")
    if stride < 1:
        raise ValueError("stride must be a positive int")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(
            f"conv2d: padded spatial size ({h + 2 * padding},{w + 2 * padding}) "
            f"smaller than kernel {k}")

    hout = (h + 2 * padding - k) // stride + 1
    wout = (w + 2 * padding - k) // stride + 1
    if padding:
        padded = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.values
    cols = _im2col(padded, k, stride, hout, wout)          # (N, Cin*k*k, L)
    wmat = weight.values.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)                            # (N, Cout, L)
    if bias is not None:
        out += bias.values[None, :, None]
    out = out.reshape(n, cout, hout, wout)

    def backward(g, out_t):
        gmat = g.reshape(n, cout, hout * wout)
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)                # (N, Cin*k*k, L)
            gcols = gcols.reshape(n, cin, k, k, hout, wout)
            gpad = np.zeros_like(padded)
            hs, ws = stride * hout, stride * wout
            for ki in range(k):
                for kj in range(k):
                    gpad[:, :, ki:ki + hs:stride, kj:kj + ws:stride] += gcols[:, :, ki, kj]
            if padding:
                gpad = gpad[:, :, padding:padding + h, padding:padding + w]
            x.accumulate_grad(gpad)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, "conv2d", backward)


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from root.

    The graph is acyclic; each node is visited exactly once in reverse
    topological order, so gradients across multiple uses accumulate
    additively.
    """
    if root.values.size != 1:
        raise ValueError(f"backward root must be a scalar, shape is {root.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    root.accumulate_grad(np.ones_like(root.values))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


def kink_margin(root: Tensor) -> float:
    """Distance of a computation from the nearest relu/abs kink.

    Central differences are only valid on smooth functions, so probe steps
    must stay well below this margin or the perturbation flips a kink and
    fakes a gradient. Abs inputs that are exactly 0 are excluded: they come
    from frozen comparisons (e.g. known pixels under the copy rule) and
    cannot move with the parameters.
    """
    seen: set[int] = set()
    stack = [root]
    margin = np.inf
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu":
            margin = min(margin, float(np.abs(node.parents[0].values).min()))
        elif node.op == "abs":
            moving = np.abs(node.parents[0].values)
            moving = moving[moving > 0]
            if moving.size:
                margin = min(margin, float(moving.min()))
        stack.extend(node.parents)
    return margin


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self):
        lines = [f"{'parameter':30s} {'max rel err':>12s}"]
        for e in self.entries:
            lines.append(f"{e.name:30s} {e.max_rel_err:12.3e}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"(max {self.max_rel_err:.3e}, tol {self.tolerance:.1e})")
        return "\n".join(lines)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                      step: float = 1e-3, tolerance: float = 1e-3,
                      rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` rebuilds its graph from the live parameter tensors on every call.
    The check temporarily promotes the parameter leaves to float64: the
    backward rules under test are the same code, but float32 evaluation of
    f(p+h)-f(p-h) is dominated by rounding noise at usable step sizes.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    saved = [p.tensor.values for p in params]
    try:
        for p in params:
            p.tensor.values = p.tensor.values.astype(np.float64)
            p.tensor.zero_grad()
        loss = f()
        if not np.isfinite(loss.values).all():
            raise NonFiniteError("loss is non-finite at the unperturbed point")
        backward(loss)
        analytic = [np.zeros_like(p.tensor.values) if p.tensor.grad is None
                    else p.tensor.grad.copy() for p in params]

        report = GradCheckReport(tolerance=tolerance)
        for p, ana in zip(params, analytic):
            flat = p.tensor.values.reshape(-1)
            worst = (0.0, (0,), 0.0, 0.0)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = f().item()
                flat[i] = orig - step
                lo = f().item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NonFiniteError(
                        f"non-finite loss perturbing {p.name}[{i}] by ±{step}")
                num = (hi - lo) / (2.0 * step)
                a = ana.reshape(-1)[i]
                rel = abs(a - num) / max(abs(a), abs(num), rel_floor)
                if rel > worst[0]:
                    worst = (rel, np.unravel_index(i, p.tensor.values.shape), a, num)
            report.entries.append(GradCheckEntry(p.name, worst[0], worst[1],
                                                 worst[2], worst[3]))
        return report
    finally:
        for p, v in zip(params, saved):
            p.tensor.values = v
            p.tensor.zero_grad()
