"""Dense float64 tensors with reverse-mode gradients.

Everything downstream (attention blocks, convolution towers, losses) is
composed from the primitives here, so the finite-difference harness at the
bottom of the file is the single source of truth for gradient correctness.
Graphs are built explicitly per forward pass; there is no global tape.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape or dimensionality precondition violated."""


class NonFiniteError(ValueError):
    """A tensor was created with NaN or Inf entries."""


class InvalidMaskError(ValueError):
    """A softmax row had every entry masked out."""


class ProbeError(RuntimeError):
    """The loss was non-finite at a gradient-check probe point."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable-by-convention dense array plus the closure that backpropagates
    through the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy defer to our reflected operators (ndarray * Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite entries")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementary ops ----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _binary(self, other, fwd, bwd_a, bwd_b):
        other = Tensor._lift(other)
        out_data = fwd(self.data, other.data)
        req = self.requires_grad or other.requires_grad
        if not req:
            return Tensor(out_data)

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(bwd_a(g, self.data, other.data), self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(bwd_b(g, self.data, other.data), other.shape))

        return Tensor(out_data, True, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            # true division (not multiply-by-reciprocal) so x / x == 1 exactly
            return self._binary(other, lambda a, b: a / b,
                                lambda g, a, b: g / b,
                                lambda g, a, b: -g * a / (b * b))
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents supported")
        out_data = self.data ** p
        if not self.requires_grad:
            return Tensor(out_data)

        def backward(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor(out_data, True, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        if self.data.shape[-1] != other.data.shape[-2]:
            raise DimensionError(
                f"matmul inner dims differ: {self.shape} @ {other.shape}")
        out_data = self.data @ other.data
        req = self.requires_grad or other.requires_grad
        if not req:
            return Tensor(out_data)

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accum(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accum(_unbroadcast(gb, other.shape))

        return Tensor(out_data, True, (self, other), backward)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        if not self.requires_grad:
            return Tensor(out_data)

        def backward(g):
            self._accum(g.reshape(self.shape))

        return Tensor(out_data, True, (self,), backward)

    def transpose(self, axes):
        out_data = self.data.transpose(axes)
        if not self.requires_grad:
            return Tensor(out_data)
        inv = np.argsort(axes)

        def backward(g):
            self._accum(g.transpose(inv))

        return Tensor(out_data, True, (self,), backward)

    def __getitem__(self, key):
        out_data = self.data[key]
        if not self.requires_grad:
            return Tensor(out_data)

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)

        return Tensor(out_data, True, (self,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not self.requires_grad:
            return Tensor(out_data)

        def backward(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        return Tensor(out_data, True, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities -------------------------------------------

    def _unary(self, out_data, dfunc):
        if not self.requires_grad:
            return Tensor(out_data)

        def backward(g):
            self._accum(g * dfunc())

        return Tensor(out_data, True, (self,), backward)

    def relu(self):
        return self._unary(np.maximum(self.data, 0.0),
                           lambda: (self.data > 0).astype(np.float64))

    def exp(self):
        out = np.exp(self.data)
        return self._unary(out, lambda: out)

    def log(self):
        return self._unary(np.log(self.data), lambda: 1.0 / self.data)

    def sigmoid(self):
        out = _sigmoid(self.data)
        return self._unary(out, lambda: out * (1.0 - out))

    def softplus(self):
        out = np.logaddexp(0.0, self.data)
        return self._unary(out, lambda: _sigmoid(self.data))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Parameter(Tensor):
    """A named, trainable tensor; `.grad` holds the accumulated gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None


# -- n-ary structural ops ---------------------------------------------------


def concat(tensors, axis=0):
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    if not req:
        return Tensor(out_data)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accum(g[tuple(sl)])

    return Tensor(out_data, True, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    if not req:
        return Tensor(out_data)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor(out_data, True, tuple(tensors), backward)


def minimum(a, b):
    a, b = Tensor._lift(a), Tensor._lift(b)
    pick_a = a.data <= b.data
    return a._binary(b, lambda x, y: np.minimum(x, y),
                     lambda g, x, y: g * pick_a,
                     lambda g, x, y: g * ~pick_a)


def maximum(a, b):
    a, b = Tensor._lift(a), Tensor._lift(b)
    pick_a = a.data >= b.data
    return a._binary(b, lambda x, y: np.maximum(x, y),
                     lambda g, x, y: g * pick_a,
                     lambda g, x, y: g * ~pick_a)


def pad_rows(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad along axis 0."""
    if left == 0 and right == 0:
        return x
    widths = [(left, right)] + [(0, 0)] * (x.data.ndim - 1)
    out_data = np.pad(x.data, widths)
    if not x.requires_grad:
        return Tensor(out_data)
    T = x.shape[0]

    def backward(g):
        x._accum(g[left:left + T])

    return Tensor(out_data, True, (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of `x` (axis 0) by an integer index array of any shape."""
    out_data = x.data[idx]
    if not x.requires_grad:
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return Tensor(out_data, True, (x,), backward)


# -- composite primitives ----------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """out[..., j] = sum_i x[..., i] w[i, j] (+ b[j])."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: {x.shape} incompatible with {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; masked entries get weight exactly 0."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise InvalidMaskError("softmax row with no unmasked entries")
        shifted = np.where(mask, xd, -np.inf)
        mx = shifted.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(xd - mx), 0.0)
    else:
        mx = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - mx)
    y = e / e.sum(axis=axis, keepdims=True)
    if not x.requires_grad:
        return Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - inner))

    return Tensor(y, True, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then scale by gamma and shift by beta."""
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm over empty last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gamma + beta


def _same_pad(T: int, k: int, stride: int) -> tuple[int, int]:
    T_out = -(-T // stride)
    total = max((T_out - 1) * stride + k - T, 0)
    left = (total + 1) // 2  # left-biased when asymmetric
    return left, total - left


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """1-D convolution over axis 0 of x[T, D_in] with kernel w[k, D_in, D_out].

    Same padding yields T' = ceil(T/stride); valid padding requires T >= k.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise DimensionError("conv1d expects x[T,Din], w[k,Din,Dout]")
    T, d_in = x.shape
    k, wd_in, d_out = w.shape
    if T < 1:
        raise DimensionError("conv1d: empty input")
    if d_in != wd_in:
        raise DimensionError(f"conv1d channel mismatch: {d_in} vs {wd_in}")
    if stride < 1:
        raise DimensionError("conv1d: stride must be >= 1")
    if padding == "same":
        if k % 2 == 0:
            raise DimensionError("conv1d: same padding requires odd kernel")
        left, right = _same_pad(T, k, stride)
        T_out = -(-T // stride)
    elif padding == "valid":
        if T < k:
            raise DimensionError("conv1d: input shorter than kernel")
        left = right = 0
        T_out = (T - k) // stride + 1
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = pad_rows(x, left, right)
    idx = np.arange(T_out)[:, None] * stride + np.arange(k)[None, :]
    windows = take_rows(xp, idx).reshape(T_out, k * d_in)
    return linear(windows, w.reshape(k * d_in, d_out), b)


def depthwise_conv1d(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Per-channel strided convolution, x[T, D] * w[k, D] -> [ceil(T/s), D].

    Pads on the right only, so output t always reads inputs starting at
    t*stride regardless of total length (keeps right-padding inert).
    """
    T, d = x.shape
    k = w.shape[0]
    T_out = -(-T // stride)
    left, right = 0, max((T_out - 1) * stride + k - T, 0)
    xp = pad_rows(x, left, right)
    idx = np.arange(T_out)[:, None] * stride + np.arange(k)[None, :]
    windows = take_rows(xp, idx)          # [T_out, k, D]
    return (windows * w).sum(axis=1)


# -- gradient checking -------------------------------------------------------


def grad_check(f, params, h: float = 1e-5, max_coords: int = 8,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph on every call and return a scalar Tensor.
    Samples up to `max_coords` coordinates per parameter.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ProbeError("non-finite loss at probe point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            hi = float(f().data)
            flat[c] = orig - h
            lo = float(f().data)
            flat[c] = orig
            fd = (hi - lo) / (2 * h)
            err = abs(an.reshape(-1)[c] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
