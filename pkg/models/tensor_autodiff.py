"""
Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the orientation network needs are provided: matrix
multiply, bias add, elementwise arithmetic, ReLU/tanh/sigmoid, 3D and 1D
convolution, transposed 1D convolution, concatenation, slicing, reductions,
smooth-L1, FiLM modulation and group/layer normalization.

A graph node is recorded for an op only when gradient recording is enabled
and at least one input requires a gradient. `backward` walks the recorded
graph once; a second call on the same loss is rejected, so gradient
accumulation across graphs is always explicit in the caller.
"""
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from utils.errors import InputError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class ShapeError(InputError):
    """Operand shapes do not conform for the requested op."""


class GraphConsumedError(InputError):
    """backward was already run on this graph."""


_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


class no_grad:
    """Context manager that disables graph recording (inference, finite differences)."""

    def __enter__(self):
        self._token = _GRAD_ENABLED.set(False)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAD_ENABLED.reset(self._token)
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs and the rule mapping output grad to input grads."""
    op: str
    inputs: Tuple["Tensor", ...]
    backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    consumed: bool = False


class Tensor:
    # Make numpy defer to Tensor's reflected operators (ndarray * Tensor -> Tensor.__rmul__).
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name
        if not self.requires_grad:
            self.data.flags.writeable = False

    @classmethod
    def _result(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"],
                rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        record = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out.requires_grad = record
        out.node = Node(op, tuple(inputs), rule) if record else None
        if not record:
            out.data.flags.writeable = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return Tensor._result(a.data + b.data, "add", (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return Tensor._result(a.data - b.data, "sub", (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return Tensor._result(a.data * b.data, "mul", (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return Tensor._result(
        a.data / b.data, "div", (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return Tensor._result(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor._result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return Tensor._result(a.data @ b.data, "matmul", (a, b),
                          lambda g: (g @ b.data.T, a.data.T @ g))


def bias_add(x, bias) -> Tensor:
    """Add a per-channel bias along axis 1 (features for dense, channels for conv)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match axis 1 of {x.shape}")
    view = (1, bias.shape[0]) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
    return Tensor._result(x.data + bias.data.reshape(view), "bias_add", (x, bias),
                          lambda g: (g, g.sum(axis=reduce_axes)))


def linear(x, weight, bias=None) -> Tensor:
    """x (N, in) @ weight (in, out) + bias (out,)."""
    out = matmul(x, weight)
    return bias_add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Shape manipulation and reductions

def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return Tensor._result(data, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def rule(g):
        full = np.zeros(x.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(x.data[index], "getitem", (x,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors),
                          lambda g: tuple(np.split(g, bounds, axis=ax)))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), rule)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Losses and conditioning

def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 distance with transition point `beta`."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data
    small = np.abs(d) < beta
    value = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)

    def rule(g):
        dd = g * np.where(small, d / beta, np.sign(d))
        return dd, -dd

    return Tensor._result(value, "smooth_l1", (pred, target), rule)


def film(x, gamma, beta) -> Tensor:
    """Feature-wise affine modulation gamma * x + beta; gamma/beta are (N, C), x is (N, C, ...)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != beta.shape or gamma.shape != x.shape[:2]:
        raise ShapeError(f"film: gamma {gamma.shape}, beta {beta.shape} must equal {x.shape[:2]}")
    view = gamma.shape + (1,) * (x.ndim - 2)
    gb, bb = gamma.data.reshape(view), beta.data.reshape(view)
    spatial = tuple(range(2, x.ndim))

    def rule(g):
        return g * gb, (g * x.data).sum(axis=spatial), g.sum(axis=spatial)

    return Tensor._result(gb * x.data + bb, "film", (x, gamma, beta), rule)


def _normalize(xg: np.ndarray, axes: Tuple[int, ...], eps: float):
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (xg - mu) * inv_std, inv_std


def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    return inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))


def group_norm(x, num_groups: int, weight, bias, eps: float = 1e-5) -> Tensor:
    """Group normalization over (channels-in-group, spatial) for x of shape (N, C, ...)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, c = x.shape[:2]
    if c % num_groups != 0 or weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: {c} channels, {num_groups} groups, weight {weight.shape}, bias {bias.shape}")
    grouped = x.data.reshape(n, num_groups, -1)
    xhat_g, inv_std = _normalize(grouped, (2,), eps)
    xhat = xhat_g.reshape(x.shape)
    view = (1, c) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    def rule(g):
        dxhat = (g * weight.data.reshape(view)).reshape(n, num_groups, -1)
        dx = _normalize_backward(dxhat, xhat_g, inv_std, (2,)).reshape(x.shape)
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    out = xhat * weight.data.reshape(view) + bias.data.reshape(view)
    return Tensor._result(out, "group_norm", (x, weight, bias), rule)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last axis {d}, weight {weight.shape}, bias {bias.shape}")
    xhat, inv_std = _normalize(x.data, (-1,), eps)
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        dx = _normalize_backward(g * weight.data, xhat, inv_std, (-1,))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * weight.data + bias.data, "layer_norm", (x, weight, bias), rule)


# ---------------------------------------------------------------------------
# Convolutions (stride-1 3D, strided 1D, transposed 1D); im2col via sliding windows

def conv3d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """x (N, Ci, D, H, W), weight (Co, Ci, k, k, k) -> (N, Co, D', H', W')."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} and weight {weight.shape} do not conform")
    k = weight.shape[2:]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    if any(xp.shape[2 + i] < k[i] for i in range(3)):
        raise ShapeError(f"conv3d: kernel {k} larger than padded input {xp.shape[2:]}")
    windows = sliding_window_view(xp, k, axis=(2, 3, 4))  # (N, Ci, Do, Ho, Wo, kd, kh, kw)
    out = np.tensordot(windows, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    do, ho, wo = out.shape[2:]

    def rule(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gxp = np.zeros(xp.shape)
        for i in range(k[0]):
            for j in range(k[1]):
                for l in range(k[2]):
                    contrib = np.tensordot(g, weight.data[:, :, i, j, l], axes=([1], [0]))
                    gxp[:, :, i:i + do, j:j + ho, l:l + wo] += np.moveaxis(contrib, -1, 1)
        gx = gxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p, p:xp.shape[4] - p]
        return gx, gw

    result = Tensor._result(out, "conv3d", (x, weight), rule)
    return bias_add(result, bias) if bias is not None else result


def conv1d(x, weight, bias=None, padding: int = 0, stride: int = 1) -> Tensor:
    """x (N, Ci, L), weight (Co, Ci, k) -> (N, Co, L')."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and weight {weight.shape} do not conform")
    k, p, s = weight.shape[2], int(padding), int(stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p)))
    if xp.shape[2] < k:
        raise ShapeError(f"conv1d: kernel {k} larger than padded length {xp.shape[2]}")
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::s]  # (N, Ci, Lo, k)
    lo = windows.shape[2]
    out = np.moveaxis(np.tensordot(windows, weight.data, axes=([1, 3], [1, 2])), -1, 1)

    def rule(g):
        gw = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
        gxp = np.zeros(xp.shape)
        for i in range(k):
            contrib = np.tensordot(g, weight.data[:, :, i], axes=([1], [0]))  # (N, Lo, Ci)
            gxp[:, :, i:i + s * (lo - 1) + 1:s] += np.moveaxis(contrib, -1, 1)
        return gxp[:, :, p:xp.shape[2] - p], gw

    result = Tensor._result(out, "conv1d", (x, weight), rule)
    return bias_add(result, bias) if bias is not None else result


def conv_transpose1d(x, weight, bias=None, padding: int = 0, stride: int = 1) -> Tensor:
    """x (N, Ci, L), weight (Ci, Co, k) -> (N, Co, (L-1)*stride - 2*padding + k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose1d: input {x.shape} and weight {weight.shape} do not conform")
    n, _, length = x.shape
    k, p, s = weight.shape[2], int(padding), int(stride)
    full_len = (length - 1) * s + k
    if full_len - 2 * p <= 0:
        raise ShapeError(f"conv_transpose1d: padding {p} leaves no output for input {x.shape}")
    full = np.zeros((n, weight.shape[1], full_len))
    for i in range(k):
        contrib = np.tensordot(x.data, weight.data[:, :, i], axes=([1], [0]))  # (N, L, Co)
        full[:, :, i:i + s * (length - 1) + 1:s] += np.moveaxis(contrib, -1, 1)
    out = full[:, :, p:full_len - p]

    def rule(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p)))
        gx = np.zeros(x.shape)
        gw = np.zeros(weight.shape)
        for i in range(k):
            gslice = gfull[:, :, i:i + s * (length - 1) + 1:s]  # (N, Co, L)
            gx += np.tensordot(weight.data[:, :, i], gslice, axes=([1], [1])).transpose(1, 0, 2)
            gw[:, :, i] = np.tensordot(x.data, gslice, axes=([0, 2], [0, 2]))
        return gx, gw

    result = Tensor._result(out, "conv_transpose1d", (x, weight), rule)
    return bias_add(result, bias) if bias is not None else result


# ---------------------------------------------------------------------------
# Graph and backward

class Graph:
    """Topologically ordered op records reachable from an output tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.order: List[Tensor] = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in tensor.node.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    @property
    def nodes(self) -> List[Node]:
        return [t.node for t in self.order if t.node is not None]

    def leaves(self) -> List[Tensor]:
        return [t for t in self.order if t.node is None and t.requires_grad]

    def propagate(self) -> Dict[int, np.ndarray]:
        grads: Dict[int, np.ndarray] = {id(self.output): np.ones(self.output.shape)}
        for tensor in reversed(self.order):
            node = tensor.node
            g = grads.pop(id(tensor), None) if node is not None else grads.get(id(tensor))
            if node is None or g is None:
                continue
            for parent, pg in zip(node.inputs, node.backward_rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return grads


def backward(loss: Tensor, parameters: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    Populate `.grad` on every parameter reachable from the scalar `loss`.

    Parameters listed in `parameters` but not reached get a zero gradient.
    Returns the gradients in `parameters` order (or in leaf order when omitted).
    `.grad` is overwritten, never accumulated.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is not None and loss.node.consumed:
        raise GraphConsumedError("backward: graph already consumed; rerun the forward pass")
    graph = Graph(loss)
    grads = graph.propagate()
    if loss.node is not None:
        loss.node.consumed = True
    targets = list(parameters) if parameters is not None else graph.leaves()
    result = []
    for tensor in targets:
        g = grads.get(id(tensor))
        tensor.grad = np.zeros(tensor.shape) if g is None else np.array(g, dtype=np.float64).reshape(tensor.shape)
        result.append(tensor.grad)
    return result


# ---------------------------------------------------------------------------
# Finite-difference verification

@dataclass
class GradientCheckReport:
    """Per-parameter max relative error between analytic and central-difference gradients."""
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    step: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def gradient_check(f: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
                   step: float = 1e-5, tolerance: float = 1e-4, max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> GradientCheckReport:
    """
    Compare analytic gradients of the scalar `f()` with central differences.

    The error of a parameter is max_i |a_i - n_i| / max(max|a|, max|n|, 1e-12)
    over the probed entries, i.e. relative to the parameter's gradient scale.
    `max_entries` caps the probed entries per parameter (sampled with `rng`).
    """
    if step <= 0:
        raise InputError(f"gradient_check: step must be positive, got {step}")
    named = dict(params) if isinstance(params, Mapping) else {f"param{i}": p for i, p in enumerate(params)}
    tensors = list(named.values())
    analytic = backward(f(), tensors)
    report = GradientCheckReport(tolerance=tolerance, step=step)
    for (name, tensor), grad in zip(named.items(), analytic):
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picker = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(picker.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(indices.size)
        with no_grad():
            for j, idx in enumerate(indices):
                original = flat[idx]
                flat[idx] = original + step
                f_plus = f().data.sum()
                flat[idx] = original - step
                f_minus = f().data.sum()
                flat[idx] = original
                numeric[j] = (f_plus - f_minus) / (2.0 * step)
        a = grad.reshape(-1)[indices]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        report.errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    if not report.passed:
        worst = max(report.errors, key=report.errors.get)
        logger.warning(f"Gradient check failed: {worst} rel. error {report.errors[worst]:.3e}")
    return report
