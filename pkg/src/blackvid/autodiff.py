"""Dense tensors with reverse-mode gradients, and the probability-space
primitives every training loss is assembled from.

The tape is deliberately small: matmul, broadcast add/sub/mul, scalar scale,
ReLU, row softmax, eps-clamped log, reductions, row gather/concat.  Each
primitive records a closure on the active tape; ``Tape.backward`` replays the
records in reverse execution order (a valid reverse topological order, since
records are appended as ops execute).  Values created under ``no_grad`` or
outside any tape are never recorded.

Dtype follows the data: models train in float32; tests may build float64
models to compare against extended-precision finite differences.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import RngState

EPS = 1e-8

_TAPE_STACK: list = []  # innermost active tape (or None for a no_grad block)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense array plus an accumulated gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values that blocks gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive ops with their cached forward values.

    Single-threaded: one tape per training step, entered as a context manager.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients onto every tensor
        the loss depends on.  Tensors not on the tape keep grad=None (zero)."""
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                # grads are never mutated in place, so sharing views is safe
                inp.grad = gi if inp.grad is None else inp.grad + gi


class no_grad:
    """Context manager suspending tape recording (evaluation mode)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _make(out_data, inputs, backward_fn) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = _active_tape()
    if tape is not None and req:
        tape._records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul got incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), backward)


def _broadcast_op(a, b, fwd, da_fn, db_fn, name):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{name} got incompatible shapes {a.shape} and {b.shape}") from None
    ashape, bshape = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(da_fn(g, ad, bd), ashape),
            _unbroadcast(db_fn(g, ad, bd), bshape),
        )

    return _make(out, (a, b), backward)


def add(a, b) -> Tensor:
    return _broadcast_op(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _broadcast_op(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _broadcast_op(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)  # python float: numpy weak promotion preserves the array dtype

    def backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0), (x,), backward)


def softmax(z) -> Tensor:
    """Row softmax over the last axis; shift-invariant by construction."""
    z = as_tensor(z)
    if z.data.size == 0 or z.shape[-1] == 0:
        raise DimensionError(f"softmax needs a nonempty input, got shape {z.shape}")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (z,), backward)


def clamped_log(x) -> Tensor:
    """log(max(x, EPS)); gradient is zero on the clamped region."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, np.asarray(EPS, dtype=x.dtype))
    mask = x.data > EPS

    def backward(g):
        return (np.where(mask, g / clamped, 0),)

    return _make(np.log(clamped), (x,), backward)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _make(x.data.sum(axis=axis), (x,), backward)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    if n == 0:
        raise DimensionError("mean of an empty axis")

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape) / n,)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _make(x.data.mean(axis=axis), (x,), backward)


def block_sum(x, count: int) -> Tensor:
    """Sum `count` equal row-blocks: (count*B, D) -> (B, D)."""
    x = as_tensor(x)
    rows = x.shape[0]
    if count < 1 or rows % count != 0:
        raise DimensionError(f"block_sum: {rows} rows not divisible into {count} blocks")
    b = rows // count
    out = x.data.reshape(count, b, *x.shape[1:]).sum(axis=0)

    def backward(g):
        return (np.tile(g, (count,) + (1,) * (g.ndim - 1)),)

    return _make(out, (x,), backward)


def take_rows(x, idx) -> Tensor:
    """Gather rows by index; backward scatter-adds (handles repeats)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx], (x,), backward)


def vconcat(parts) -> Tensor:
    """Stack tensors along axis 0."""
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


# ---------------------------------------------------------------------------
# probability-space composites


def _mix_multipliers(lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canonical (lam, 1-lam) pair, bitwise-stable under lam <-> 1-lam.

    1-x is exact in IEEE only for x >= 0.5, so the complement is always taken
    from the larger of the pair; both calls of a swapped mixup then use the
    identical multiplier set.
    """
    big = np.maximum(lam, 1.0 - lam)
    small = 1.0 - big  # exact: big >= 0.5
    take_big = lam >= 0.5
    return np.where(take_big, big, small), np.where(take_big, small, big)


def mixup(a, b, lam) -> Tensor:
    """lam*a + (1-lam)*b elementwise; lam may be a scalar or a per-row column.

    Exactly symmetric: mixup(a, b, lam) == mixup(b, a, 1-lam) bitwise.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mixup got mismatched shapes {a.shape} and {b.shape}")
    mult_a, mult_b = _mix_multipliers(np.asarray(lam, dtype=np.float64))
    if mult_a.ndim == 0:
        return add(scale(a, float(mult_a)), scale(b, float(mult_b)))
    return add(mul(a, Tensor(mult_a.astype(a.dtype))), mul(b, Tensor(mult_b.astype(b.dtype))))


def entropy(p, axis=-1) -> Tensor:
    """Shannon entropy in nats along `axis`; 0*log(0) treated as 0."""
    p = as_tensor(p)
    return scale(tsum(mul(p, clamped_log(p)), axis=axis), -1.0)


def kl_div(p, q, axis=-1) -> Tensor:
    """Kullback-Leibler divergence D(p || q) in nats along `axis`.

    q is clamped at EPS before the log, so hard zeros in q stay finite.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div got mismatched shapes {p.shape} and {q.shape}")
    return tsum(mul(p, sub(clamped_log(p), clamped_log(q))), axis=axis)


def cross_entropy_soft(target, pred, axis=-1) -> Tensor:
    """Soft-target cross-entropy -sum(target * log pred) in nats."""
    target, pred = as_tensor(target), as_tensor(pred)
    if target.shape != pred.shape:
        raise DimensionError(
            f"cross_entropy_soft got mismatched shapes {target.shape} and {pred.shape}"
        )
    return scale(tsum(mul(target, clamped_log(pred)), axis=axis), -1.0)


def is_prob_vector(p: np.ndarray, tol: float = 1e-5) -> bool:
    p = np.asarray(p)
    return (
        p.ndim >= 1
        and p.shape[-1] >= 2
        and bool(np.all(p >= -1e-7))
        and bool(np.all(p <= 1 + 1e-7))
        and bool(np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))
    )


# ---------------------------------------------------------------------------
# layers and optimization


class Linear:
    """y = x @ w + b with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""

    def __init__(self, in_dim: int, out_dim: int, rng: RngState, dtype=np.float32):
        bound = 1.0 / math.sqrt(in_dim)
        self.w = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)).astype(dtype), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, (out_dim,)).astype(dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: RngState, dtype=np.float32):
        if len(dims) < 2:
            raise ConfigError(f"MLP needs at least in/out dims, got {dims}")
        self.dims = list(dims)
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype) for i in range(len(dims) - 1)]

    def __call__(self, x) -> Tensor:
        return mlp_forward(x, self)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


def mlp_forward(x, mlp: MLP) -> Tensor:
    """Run an MLP on a vector or a batch of row vectors."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = Tensor(x.data.reshape(1, -1), requires_grad=x.requires_grad)
    if x.data.ndim != 2 or x.shape[1] != mlp.dims[0]:
        raise DimensionError(
            f"mlp_forward: input shape {x.shape} does not match layer stack {mlp.dims}"
        )
    h = x
    for i, layer in enumerate(mlp.layers):
        h = layer(h)
        if i < len(mlp.layers) - 1:
            h = relu(h)
    if squeeze:
        out = Tensor(h.data.reshape(-1), requires_grad=h.requires_grad)
        tape = _active_tape()
        if tape is not None and h.requires_grad:
            tape._records.append((out, (h,), lambda g: (g.reshape(1, -1),)))
        return out
    return h


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(factor, dtype=p.grad.dtype)
    return norm


class SGD:
    """Plain SGD with momentum; learning rate is mutable for schedules."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        zero_grads(self.params)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))
