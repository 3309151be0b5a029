"""Dense-tensor math with reverse-mode differentiation.

A ``Tape`` records every operation applied to tensors attached to it, in
execution order (which is automatically topological). ``backward`` walks the
record once in reverse and accumulates vector-Jacobian products, yielding
gradients with respect to every marked leaf: model parameters during
training, inputs during attacks.

Scope is deliberately narrow: float32 (default) or float64 arrays, no
broadcasting beyond bias-add, stride-1 valid-padding convolution, no
higher-order derivatives. A tape is single-writer; tensors without a tape
attachment are plain immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "activation",
    "conv2d",
    "flatten",
    "sum_all",
    "sqrt",
    "cross_entropy",
    "backward",
    "gradient_check",
]

DEFAULT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """An immutable dense array, optionally recorded on a tape.

    ``tape``/``node`` identify where on a tape this value was produced;
    both are None for plain constants.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None, tape: Optional["Tape"] = None,
                 node: Optional[int] = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        taped = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{taped})"


@dataclass
class _Node:
    op: str
    parents: tuple  # ids of taped parents only
    value: np.ndarray  # cached forward value
    vjp: Optional[Callable]  # grad_out -> tuple of parent grads
    leaf: bool = False


class Tape:
    """Ordered operation record. Single-writer: never share one across threads."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data, dtype=None) -> Tensor:
        """Attach ``data`` as a differentiation leaf (parameter or input)."""
        t = Tensor(data, dtype=dtype)
        node = _Node(op="leaf", parents=(), value=t.data, vjp=None, leaf=True)
        self.nodes.append(node)
        return Tensor(t.data, tape=self, node=len(self.nodes) - 1)

    def _record(self, op: str, value: np.ndarray, parents: tuple,
                vjp: Callable) -> Tensor:
        self.nodes.append(_Node(op=op, parents=parents, value=value, vjp=vjp))
        return Tensor(value, tape=self, node=len(self.nodes) - 1)

    def __len__(self):
        return len(self.nodes)


def _lift(x: ArrayLike, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _common_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands live on different tapes")
    return tape


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor],
          vjps: Sequence[Optional[Callable]]) -> Tensor:
    """Record the op against the taped subset of ``inputs``.

    ``vjps[i]`` maps the output gradient to the gradient of ``inputs[i]``;
    entries for untaped inputs are ignored.
    """
    tape = _common_tape(*inputs)
    if tape is None:
        return Tensor(value)
    parents, used = [], []
    for t, fn in zip(inputs, vjps):
        if t.tape is tape and fn is not None:
            parents.append(t.node)
            used.append(fn)

    def vjp(g, fns=tuple(used)):
        return tuple(fn(g) for fn in fns)

    return tape._record(op, value, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product [m,n] @ [n,p]."""
    a = _lift(a, DEFAULT_DTYPE)
    b = _lift(b, a.dtype)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    value = a.data @ b.data
    ad, bd = a.data, b.data
    return _emit("matmul", value, (a, b),
                 (lambda g: g @ bd.T, lambda g: ad.T @ g))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum; also [m,n] + [n] bias broadcast over rows."""
    a = _lift(a, DEFAULT_DTYPE)
    b = _lift(b, a.dtype)
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b),
                     (lambda g: g, lambda g: g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit("bias_add", a.data + b.data, (a, b),
                     (lambda g: g, lambda g: g.sum(axis=0)))
    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise difference of same-shape tensors."""
    a = _lift(a, DEFAULT_DTYPE)
    b = _lift(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes incompatible: {a.shape} - {b.shape}")
    return _emit("sub", a.data - b.data, (a, b),
                 (lambda g: g, lambda g: -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product of same-shape tensors, or tensor * python scalar."""
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        a = _lift(a, DEFAULT_DTYPE)
        s = float(b)
        return _emit("scale", a.data * np.asarray(s, dtype=a.dtype), (a,),
                     (lambda g: g * s,))
    a = _lift(a, DEFAULT_DTYPE)
    b = _lift(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 (lambda g: g * bd, lambda g: g * ad))


def relu(x: ArrayLike) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    x = _lift(x, DEFAULT_DTYPE)
    value = np.maximum(x.data, 0)
    mask = x.data > 0
    return _emit("relu", value, (x,), (lambda g: g * mask,))


def sigmoid(x: ArrayLike) -> Tensor:
    """1 / (1 + exp(-x)), computed overflow-free on both tails."""
    x = _lift(x, DEFAULT_DTYPE)
    v = x.data
    value = np.empty_like(v)
    pos = v >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    value[~pos] = ev / (1.0 + ev)
    return _emit("sigmoid", value, (x,),
                 (lambda g: g * value * (1.0 - value),))


def activation(x: ArrayLike, kind: str) -> Tensor:
    """Elementwise activation, kind in {"relu", "sigmoid"}."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValidationError(f"unknown activation kind: {kind!r}")


def conv2d(x: ArrayLike, kernels: ArrayLike) -> Tensor:
    """Valid-padding stride-1 cross-correlation.

    ``x`` is [C,H,W] or [N,C,H,W]; ``kernels`` is [F,C,kh,kw]. Output has
    spatial dims (H-kh+1, W-kw+1).
    """
    x = _lift(x, DEFAULT_DTYPE)
    k = _lift(kernels, x.dtype)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] x [F,C,kh,kw], got {x.shape} x {k.shape}")
    n, c, h, w = xd.shape
    f, ck, kh, kw = k.data.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {k.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d kernel {k.shape} larger than input {x.shape}")
    # windows: [N, C, H', W', kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    value = np.einsum("nchwij,fcij->nfhw", win, k.data)
    kd = k.data

    def vjp_x(g):
        g4 = g[None] if squeeze else g
        dx = np.zeros_like(xd)
        hp, wp = h - kh + 1, w - kw + 1
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + hp, j:j + wp] += np.einsum(
                    "nfhw,fc->nchw", g4, kd[:, :, i, j])
        return dx[0] if squeeze else dx

    def vjp_k(g):
        g4 = g[None] if squeeze else g
        return np.einsum("nchwij,nfhw->fcij", win, g4)

    out = _emit("conv2d", value[0] if squeeze else value, (x, k), (vjp_x, vjp_k))
    return out


def flatten(x: ArrayLike) -> Tensor:
    """[N, ...] -> [N, prod(rest)], row-major."""
    x = _lift(x, DEFAULT_DTYPE)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got shape {x.shape}")
    n = x.shape[0]
    shape = x.shape
    value = x.data.reshape(n, -1)
    return _emit("flatten", value, (x,), (lambda g: g.reshape(shape),))


def sum_all(x: ArrayLike) -> Tensor:
    """Sum of all elements, as a scalar."""
    x = _lift(x, DEFAULT_DTYPE)
    shape = x.shape
    value = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", value, (x,),
                 (lambda g: np.broadcast_to(g, shape).astype(g.dtype, copy=False),))


def sqrt(x: ArrayLike) -> Tensor:
    """Elementwise square root with subgradient 0 at 0."""
    x = _lift(x, DEFAULT_DTYPE)
    if np.any(x.data < 0):
        raise ValidationError("sqrt of negative value")
    value = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(value > 0, value, 1.0)
        return np.where(value > 0, 0.5 * g / safe, 0.0).astype(g.dtype, copy=False)

    return _emit("sqrt", value, (x,), (vjp,))


def cross_entropy(logits: ArrayLike, y: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [n,k] logits against integer labels."""
    logits = _lift(logits, DEFAULT_DTYPE)
    y = np.asarray(y)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n,k] logits, got {logits.shape}")
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= k:
        raise ValidationError("cross_entropy label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    ll = z[np.arange(n), y] - np.log(ez.sum(axis=1))
    value = np.asarray(-ll.mean(), dtype=logits.dtype)

    def vjp(g):
        grad = softmax.copy()
        grad[np.arange(n), y] -= 1.0
        return (grad * (g / n)).astype(logits.dtype, copy=False)

    return _emit("cross_entropy", value, (logits,), (vjp,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to every leaf on ``tape``.

    Returns {leaf node id: gradient array}; leaves the output does not
    depend on get zeros.
    """
    if output.tape is not tape or output.node is None:
        raise ContractError("output was not produced on this tape")
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[output.node] = np.ones_like(output.data)
    for nid in range(output.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if grads[pid] is None:
                grads[pid] = np.zeros_like(tape.nodes[pid].value)
            grads[pid] = grads[pid] + pg
    out = {}
    for nid, node in enumerate(tape.nodes):
        if node.leaf:
            out[nid] = grads[nid] if grads[nid] is not None else np.zeros_like(node.value)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    failure: Optional[str] = None

    def __bool__(self):
        return self.passed


def gradient_check(f: Callable[[Tensor], Tensor], point, tol: float = 1e-4,
                   step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    Runs in float64. The relative error of each component uses a scale floor
    of 1: |a - n| / max(1, |a|, |n|).
    """
    point = np.asarray(point, dtype=np.float64)
    empty = np.zeros_like(point)
    tape = Tape()
    x = tape.leaf(point)
    try:
        out = f(x)
    except Exception as exc:  # diagnostic failure, not a crash
        return GradCheckReport(False, np.inf, empty, empty,
                               failure=f"evaluation raised: {exc}")
    if out.data.size != 1:
        return GradCheckReport(False, np.inf, empty, empty,
                               failure=f"f returned non-scalar shape {out.shape}")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, np.inf, empty, empty,
                               failure="non-finite forward value")
    analytic = backward(tape, out)[x.node]

    def eval_at(p):
        v = f(Tensor(p, dtype=np.float64)).data
        if not np.isfinite(v).all():
            raise FloatingPointError("non-finite intermediate")
        return float(v.reshape(-1)[0])

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_at(point)
            flat[i] = orig - step
            lo = eval_at(point)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
    except FloatingPointError as exc:
        return GradCheckReport(False, np.inf, analytic, numeric, failure=str(exc))
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel <= tol, max_rel, analytic, numeric)
