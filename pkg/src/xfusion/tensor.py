"""Dense float64 tensors with a recorded op graph and reverse-mode gradients.

Every model operation in this package is composed from the primitives below.
Tensors carry arbitrary leading batch dimensions; token/feature axes are the
trailing two. All arithmetic is 64-bit, and every operation checks its result
for NaN/Inf so numerical blow-ups surface with the op name instead of
propagating silently.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParameterStore",
    "ShapeError",
    "NonFiniteError",
    "NonDeterministicError",
    "no_grad",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "concat",
    "mean",
    "tsum",
    "relu",
    "linear",
    "layer_norm",
    "softmax",
    "log_softmax",
    "pick_class",
    "adaptive_avg_pool",
    "reshape",
    "swap_axes",
    "dropout",
    "multi_head_attention",
    "backward",
    "finite_diff_gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced or received NaN/Inf values."""


class NonDeterministicError(RuntimeError):
    """A function expected to be deterministic returned differing values."""


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient and graph-recording hooks."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor literal contains non-finite values")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _result(arr: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = arr
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _sum_to_suffix(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over leading axes so it matches a suffix shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if b.shape != a.shape and b.shape != a.shape[a.ndim - b.ndim :]:
        raise ShapeError(f"{op}: shape {b.shape} is neither equal to nor a trailing suffix of {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be a trailing-suffix shape (bias add)."""
    _check_suffix(a, b, "add")
    return _result(
        a.values + b.values,
        "add",
        (a, b),
        lambda g: (g, _sum_to_suffix(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    return _result(
        a.values - b.values,
        "sub",
        (a, b),
        lambda g: (g, -_sum_to_suffix(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a tensor of equal/suffix shape or a python scalar."""
    if isinstance(b, (int, float)):
        c = float(b)
        return _result(a.values * c, "mul", (a,), lambda g: (g * c,))
    _check_suffix(a, b, "mul")
    return _result(
        a.values * b.values,
        "mul",
        (a, b),
        lambda g: (g * b.values, _sum_to_suffix(g * a.values, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes.

    Supported: 2-D weights broadcast across any leading dims of `a`, or
    stacks with identical leading dims. Anything else is a shape error.
    """
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 1-D @ 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim == 1 and b.ndim == 2:
        out = a.values @ b.values
        return _result(
            out,
            "matmul",
            (a, b),
            lambda g: (g @ b.values.T, np.outer(a.values, g)),
        )
    if b.ndim == 2:
        out = a.values @ b.values

        def grad_fn(g):
            ga = g @ b.values.T
            gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return (ga, gb)

        return _result(out, "matmul", (a, b), grad_fn)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {a.shape} @ {b.shape}")
    out = a.values @ b.values
    return _result(
        out,
        "matmul",
        (a, b),
        lambda g: (g @ np.swapaxes(b.values, -1, -2), np.swapaxes(a.values, -1, -2) @ g),
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; all other axes must match exactly."""
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    ax = axis if axis >= 0 else len(ref) + axis
    for s in shapes[1:]:
        other = list(s)
        if len(other) != len(ref) or other[:ax] != ref[:ax] or other[ax + 1 :] != ref[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {shapes[0]} and {s} along axis {axis}")
    out = np.concatenate([t.values for t in tensors], axis=ax)
    sizes = [s[ax] for s in shapes]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(out, "concat", tuple(tensors), grad_fn)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.values.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, "sum", (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.values.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(out, "mean", (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w + b applied along the trailing axis."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize over the trailing axis, then scale and shift.

    Uses the population variance. `eps` may be zero; a constant row then
    divides by zero and raises the non-finite error.
    """
    if eps < 0:
        raise ValueError(f"layer_norm: eps must be nonnegative, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = xhat * gamma.values + beta.values

    def grad_fn(g):
        gy = g * gamma.values
        gxhat_mean = gy.mean(axis=-1, keepdims=True)
        gxhat_xhat_mean = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = (gy - gxhat_mean - xhat * gxhat_xhat_mean) * inv
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _result(out, "layer_norm", (x, gamma, beta), grad_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis` (max subtracted before exponentiation)."""
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError("softmax received non-finite input")
    ax = axis % x.ndim
    shifted = x.values - x.values.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        return ((g - (g * y).sum(axis=ax, keepdims=True)) * y,)

    return _result(y, "softmax", (x,), grad_fn)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError("log_softmax received non-finite input")
    ax = axis % x.ndim
    shifted = x.values - x.values.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def grad_fn(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _result(out, "log_softmax", (x,), grad_fn)


def pick_class(x: Tensor, labels: np.ndarray) -> Tensor:
    """Select one entry along the trailing axis per leading index."""
    labels = np.asarray(labels)
    if labels.shape != x.shape[:-1]:
        raise ShapeError(f"pick_class: labels shape {labels.shape} does not match leading shape of {x.shape}")
    c = x.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"pick_class: label out of range [0, {c})")
    idx = labels[..., None]
    out = np.take_along_axis(x.values, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _result(out, "pick_class", (x,), grad_fn)


def _pool_bins(length_in: int, length_out: int) -> list[tuple[int, int]]:
    return [
        (int(np.floor(j * length_in / length_out)), int(np.ceil((j + 1) * length_in / length_out)))
        for j in range(length_out)
    ]


def adaptive_avg_pool(x: Tensor, target_len: int) -> Tensor:
    """Average rows of the token axis (second-to-last) into `target_len` bins.

    Bin j spans input rows [floor(j*L/T), ceil((j+1)*L/T)). Identity when
    target_len equals the input length; upsampling is not supported.
    """
    if x.ndim < 2:
        raise ShapeError(f"adaptive_avg_pool: input must be at least 2-D, got {x.shape}")
    length_in = x.shape[-2]
    if not 1 <= target_len <= length_in:
        raise ShapeError(f"adaptive_avg_pool: target length {target_len} outside [1, {length_in}]")
    if target_len == length_in:
        return _result(x.values.copy(), "adaptive_avg_pool", (x,), lambda g: (g,))
    bins = _pool_bins(length_in, target_len)
    out = np.stack([x.values[..., s:e, :].mean(axis=-2) for s, e in bins], axis=-2)

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        for j, (s, e) in enumerate(bins):
            gx[..., s:e, :] += g[..., j : j + 1, :] / (e - s)
        return (gx,)

    return _result(out, "adaptive_avg_pool", (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.values.reshape(shape)
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def swap_axes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.values, a, b)
    return _result(out, "swap_axes", (x,), lambda g: (np.swapaxes(g, a, b),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.values * mask, "dropout", (x,), lambda g: (g * mask,))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    scale: float,
    out_proj: Tensor,
) -> Tensor:
    """Scaled dot-product attention over `heads` feature slices.

    Per head h over its width-d/heads slice: softmax(Q_h K_h^T * scale) V_h.
    Head outputs are re-concatenated and passed through `out_proj` (d x d).
    """
    d = q.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ShapeError(f"multi_head_attention: feature dim {d} not divisible by {heads} heads")
    if scale <= 0:
        raise ValueError(f"multi_head_attention: scale must be positive, got {scale}")
    if k.shape != v.shape or k.shape[-1] != d:
        raise ShapeError(f"multi_head_attention: K {k.shape} and V {v.shape} must match with feature dim {d}")
    if out_proj.shape != (d, d):
        raise ShapeError(f"multi_head_attention: output projection must be ({d}, {d}), got {out_proj.shape}")
    dh = d // heads
    lq, lk = q.shape[-2], k.shape[-2]
    lead = q.shape[:-2]

    def split(t: Tensor, length: int) -> Tensor:
        return swap_axes(reshape(t, (*lead, length, heads, dh)), -3, -2)

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    logits = mul(matmul(qh, swap_axes(kh, -1, -2)), scale)
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, vh)
    merged = reshape(swap_axes(ctx, -3, -2), (*lead, lq, d))
    return matmul(merged, out_proj)


def backward(loss: Tensor, params: "ParameterStore | None" = None) -> None:
    """Backpropagate from a scalar loss, accumulating into leaf `.grad`s.

    Repeated calls accumulate; zeroing is explicit. When `params` is given,
    parameters unreachable from the loss end up with zero gradients.
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.requires_grad:
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.values)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteError(f"backward through '{node._op}' produced non-finite gradients")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        params.ensure_grads()


class ParameterStore:
    """Named map of trainable tensors with deterministic (sorted) iteration."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def ensure_grads(self) -> None:
        for _, t in self.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.values)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, t in self.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter '{name}': stored shape {arr.shape} != expected {t.shape}")
            t.values = arr.copy()


def finite_diff_gradcheck(
    f: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    eps: float = 1e-6,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Compare backward() gradients against central finite differences.

    Returns the max over checked coordinates of
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    Large parameters can be spot-checked by sampling `max_coords_per_param`
    coordinates per tensor (seeded, deterministic); by default every
    coordinate is checked.
    """
    if eps <= 0:
        raise ValueError(f"gradcheck: eps must be positive, got {eps}")
    with no_grad():
        base_a = f(params).item()
        base_b = f(params).item()
    if base_a != base_b:
        raise NonDeterministicError("gradcheck: two evaluations at the same parameters differ")
    params.zero_grad()
    loss = f(params)
    backward(loss, params)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.values.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords: Iterable[int] = range(n)
        else:
            coords = sorted(rng.choice(n, size=max_coords_per_param, replace=False))
        aflat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f(params).item()
            flat[i] = orig - eps
            with no_grad():
                fm = f(params).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
