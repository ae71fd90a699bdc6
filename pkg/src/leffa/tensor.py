"""Dense float tensors with reverse-mode differentiation.

Only the handful of kernels the attention/flow pipeline and the toy
denoiser need are provided. Every op returns a new :class:`Tensor`; when
any input requires a gradient, the output remembers its parents and a
closure mapping the output gradient to per-parent gradients.

Training runs in 32-bit floats. ``with precision(np.float64):`` switches
new tensors to 64-bit, which is what the finite-difference checks use.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "DimensionError",
    "ParameterError",
    "ContractError",
    "NumericalError",
    "precision",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "constant",
    "backward",
    "matmul",
    "softmax",
    "softmax_lastdim",
    "conv2d",
    "bilinear_resize",
    "interpolation_positions",
    "concat",
    "relu",
    "silu",
    "rms_norm",
    "row_normalize",
    "linear",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its legal range."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported precision {dtype}")
    previous, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        array = np.array(data, dtype=_DTYPE, copy=True)
        self.data = _frozen(array)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _frozen(np.asarray(data))
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = grad_fn if track else None
        return out

    # -- metadata -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd entry -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        grads = _run_backward(self)
        for leaf, g in grads.values():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def square(self):
        return mul(self, self)


def _raise_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._result(np.asarray(value, dtype=_DTYPE), (), None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- gradient evaluation --------------------------------------------------------


class ComputationRecord:
    """Operations reachable from a root value, in topological order.

    Inputs always precede the operations that consume them, so walking
    ``reversed(record)`` visits every node exactly once after all of its
    consumers.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = _topological_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __reversed__(self):
        return reversed(self.nodes)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(root: Tensor, record: ComputationRecord | None = None) -> dict[int, tuple[Tensor, np.ndarray]]:
    if root.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    if not root.requires_grad:
        return leaves
    record = record if record is not None else ComputationRecord(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(record):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return leaves


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             record: ComputationRecord | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by ``id(param)``.

    Fan-out contributions are summed. Parameters the loss does not touch get
    a zero array of their own shape.
    """
    leaves = _run_backward(loss, record)
    if params is None:
        return {key: g for key, (_, g) in leaves.items()}
    out = {}
    for p in params:
        hit = leaves.get(id(p))
        out[id(p)] = hit[1] if hit is not None else np.zeros_like(p.data)
    return out


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return Tensor._result(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,))


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-free logistic
    out = x.data * sig

    def grad_fn(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return Tensor._result(out.astype(x.dtype, copy=False), (x,), grad_fn)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each last-axis vector to unit root-mean-square."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = x.data * inv

    def grad_fn(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True) / d),)

    return Tensor._result(y, (x,), grad_fn)


def row_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Divide each last-axis slice by ``its sum + eps``.

    With ``eps == 0`` an all-zero slice becomes uniform (and passes no
    gradient) instead of dividing by zero.
    """
    s = x.data.sum(axis=-1, keepdims=True) + eps
    empty = s == 0
    safe = np.where(empty, 1.0, s).astype(x.dtype)
    y = np.where(empty, 1.0 / x.shape[-1], x.data / safe).astype(x.dtype)

    def grad_fn(g):
        return (np.where(empty, 0.0, (g - (g * y).sum(axis=-1, keepdims=True)) / safe),)

    return Tensor._result(y, (x,), grad_fn)


# -- shape manipulation -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(x.data[index], (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


# -- reductions -------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(np.matmul(ad, bd), (a, b), grad_fn)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``, max-shifted."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / temperature,)

    return Tensor._result(y.astype(x.dtype, copy=False), (x,), grad_fn)


softmax_lastdim = softmax


# -- convolution --------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``kernel`` is
    ``(C_out, C_in, 3, 3)``. ``stride`` 2 gives the downsampling convs of the
    toy encoder.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    kd = kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects (N,C,H,W) input and 3x3 kernel, got {x.shape} and {kernel.shape}")
    if kd.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    n, c, h, w = xd.shape
    co = kd.shape[0]
    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    # channel-major im2col: (C, 3, 3, N, Ho, Wo) flattened to (C*9, N*Ho*Wo)
    cols = np.empty((c, 3, 3, n, ho, wo), dtype=xd.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, di, dj] = padded[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * 9, n * ho * wo)
    kmat = kd.reshape(co, c * 9)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        g4 = g[None] if unbatched else g
        gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gk = (gmat @ cols.T).reshape(kd.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c, 3, 3, n, ho, wo)
            gpad = np.zeros((c, n, h + 2, w + 2), dtype=xd.dtype)
            for di in range(3):
                for dj in range(3):
                    gpad[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
            gx = np.ascontiguousarray(gpad[:, :, 1:h + 1, 1:w + 1].transpose(1, 0, 2, 3))
            if unbatched:
                gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=1)

    return Tensor._result(out, parents, grad_fn)


# -- resampling -----------------------------------------------------------------


def interpolation_positions(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners source positions (in input pixels) for each output index.

    A single output sample sits at the input midpoint, which is normalized
    coordinate 0.
    """
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def _lerp_plan(n_in: int, n_out: int):
    pos = interpolation_positions(n_in, n_out)
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    lo, hi, frac = _lerp_plan(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes with align-corners semantics.

    Interpolation is evaluated as ``a + f * (b - a)`` so identity resizes,
    corner samples and constant fields come out exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {(out_h, out_w)}")
    if x.ndim < 2:
        raise DimensionError(f"bilinear_resize needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    dtype = x.dtype
    xd = x.data
    if (h, w) == (out_h, out_w):
        return Tensor._result(xd, (x,), lambda g: (g,))
    lo, hi, fy = _lerp_plan(h, out_h)
    fy = fy.astype(dtype)[:, None]
    top, bot = xd[..., lo, :], xd[..., hi, :]
    rows = top + fy * (bot - top)
    lo, hi, fx = _lerp_plan(w, out_w)
    fx = fx.astype(dtype)
    left, right = rows[..., lo], rows[..., hi]
    out = left + fx * (right - left)
    my = _interp_matrix(h, out_h).astype(dtype)
    mx = _interp_matrix(w, out_w).astype(dtype)

    def grad_fn(g):
        return (my.T @ g @ mx,)

    return Tensor._result(out, (x,), grad_fn)


# small aliases used by the model code
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias
