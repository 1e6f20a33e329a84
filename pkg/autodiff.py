# Reverse-mode automatic differentiation over dense numpy arrays.
#
# Setiap operasi menyimpan closure backward; backward() menyusun graph
# komputasi dengan networkx lalu menjalankan closure dalam urutan topologi
# terbalik (sama seperti graph topologi di controller, tapi untuk gradien).

import logging
import math
import threading
from contextlib import contextmanager

import networkx as nx
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigurationError, ContractError, DimensionError

LOG = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
_GELU_C = math.sqrt(2.0 / math.pi)
_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""

    # --- basic properties ---
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- operators ---
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # --- method forms ---
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis=axis)


class Parameter(Tensor):
    """Leaf tensor owned by a Module; trainable until frozen."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _result(data, parents, op, backward_fn):
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward_fn
    return out


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ================================================================= #
# ======================= ELEMENTWISE OPS ========================= #
# ================================================================= #

def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", _backward)


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", _backward)


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def _backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", _backward)


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def _backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), "div", _backward)


def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), "neg", lambda g: (-g,))


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)

    def _backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return _result(x.data ** p, (x,), "pow", _backward)


def exp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return _result(out_data, (x,), "exp", lambda g: (g * out_data,))


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def tanh(x):
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    return _result(out_data, (x,), "tanh", lambda g: (g * (1.0 - out_data * out_data),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu",
                   lambda g: (g * mask,))


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    out_data = 0.5 * xd * (1.0 + t)

    def _backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(out_data.astype(x.dtype), (x,), "gelu", _backward)


# ================================================================= #
# ===================== REDUCTIONS & SHAPES ======================= #
# ================================================================= #

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def _backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", _backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out_data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out_data.size, 1)

    def _backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _result(out_data.astype(x.dtype), (x,), "mean", _backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out_data, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose",
                   lambda g: (np.transpose(g, inverse),))


def getitem(x, index):
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), "getitem", _backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out_data, tuple(tensors), "concat", _backward)


def roll(x, shift, axis):
    x = as_tensor(x)
    if isinstance(shift, int):
        back = -shift
    else:
        back = tuple(-s for s in shift)
    return _result(np.roll(x.data, shift, axis=axis), (x,), "roll",
                   lambda g: (np.roll(g, back, axis=axis),))


# ================================================================= #
# =================== NORMALISED PROBABILITIES ==================== #
# ================================================================= #

def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return _result(out_data, (x,), "softmax", _backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out_data, (x,), "log_softmax", _backward)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    top = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - top)
    s = e.sum(axis=axis, keepdims=True)
    out_keep = top + np.log(s)
    weights = e / s

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    return _result(np.asarray(out_data), (x,), "logsumexp", _backward)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat
    parents = [x]
    if weight is not None:
        if weight.shape != (n,):
            raise DimensionError(f"layer_norm weight {weight.shape} does not match features {n}")
        out_data = out_data * weight.data
        parents.append(weight)
    if bias is not None:
        out_data = out_data + bias.data
        parents.append(bias)

    def _backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * weight.data if weight is not None else g
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out_data.astype(x.dtype), tuple(parents), "layer_norm", _backward)


# ================================================================= #
# ======================= LINEAR ALGEBRA ========================== #
# ================================================================= #

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(out_data, (a, b), "matmul", _backward)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x[B,C,H,W] with w[F,C,k,k] (im2col)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} padding={padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise ConfigurationError(
            f"non-integral conv2d output for input {H}x{W}, kernel {kh}, stride {stride}, padding {padding}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        if b.shape != (F,):
            raise DimensionError(f"conv2d bias {b.shape} does not match {F} filters")
        out = out + b.data.reshape(1, F, 1, 1)
        parents.append(b)

    def _backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out, dtype=x.dtype), tuple(parents), "conv2d", _backward)


def max_pool2d(x, kernel=2):
    """Non-overlapping max pooling; ties go to the first element of the window."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % kernel or W % kernel:
        raise ConfigurationError(f"max_pool2d: {H}x{W} not divisible by {kernel}")
    h, w = H // kernel, W // kernel
    blocks = x.data.reshape(B, C, h, kernel, w, kernel).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, h, w, kernel * kernel)
    idx = flat.argmax(axis=-1)[..., None]
    out_data = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def _backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx, g[..., None], axis=-1)
        gblocks = gflat.reshape(B, C, h, w, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gblocks.reshape(B, C, H, W),)

    return _result(out_data, (x,), "max_pool2d", _backward)


# ================================================================= #
# ========================= BACKWARD PASS ========================= #
# ================================================================= #

def _build_graph(root):
    graph = nx.DiGraph()
    graph.add_node(root)
    stack = [root]
    seen = {id(root)}
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            graph.add_edge(parent, node)
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    return graph


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(t) into t.grad for every tracked tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")

    graph = _build_graph(loss)
    order = list(nx.topological_sort(graph))
    pending = {loss: np.ones_like(loss.data)}

    for node in reversed(order):
        g = pending.pop(node, None)
        if g is None:
            continue
        g = np.asarray(g, dtype=node.dtype)
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent in pending:
                pending[parent] = pending[parent] + pg
            else:
                pending[parent] = pg

    if not retain_graph:
        for node in order:
            node._backward = None
            node._parents = ()


# ================================================================= #
# ============================ MODULES ============================ #
# ================================================================= #

class Module:
    """Container of named Parameters and sub-modules (attribute order = name order)."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_count(self):
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        std = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.normal(0.0, std, size=(in_features, out_features)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects {self.in_features} features, got {x.shape}")
        lead = x.shape[:-1]
        out = matmul(reshape(x, (-1, self.in_features)), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return reshape(out, lead + (self.out_features,))


class LayerNorm(Module):
    def __init__(self, features, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.eps = eps
        self.weight = Parameter(np.ones(features), dtype=dtype)
        self.bias = Parameter(np.zeros(features), dtype=dtype)

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


# ================================================================= #
# =================== OPTIMIZER & LR SCHEDULE ===================== #
# ================================================================= #

def cosine_lr(step, total_steps, lr0, lr_min=0.0):
    """Cosine annealing; steps past the end clamp to lr_min."""
    if step < 0:
        raise ConfigurationError(f"negative schedule step {step}")
    if total_steps <= 0:
        return float(lr0)
    step = min(step, total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Optimizer:
    """AdamW (decoupled weight decay) or SGD, driven by a learning-rate schedule."""

    METHODS = ("adamw", "sgd")

    def __init__(self, params, lr0, total_steps=0, lr_min=0.0, weight_decay=0.0,
                 method="adamw", schedule="cosine", betas=(0.9, 0.999), eps=1e-8, momentum=0.0):
        if method not in self.METHODS:
            raise ConfigurationError(f"unknown optimizer '{method}'")
        if schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule '{schedule}'")
        self.params = list(params)
        self.lr0 = float(lr0)
        self.lr_min = float(lr_min)
        self.total_steps = int(total_steps)
        self.weight_decay = float(weight_decay)
        self.method = method
        self.schedule = schedule
        self.betas = betas
        self.eps = eps
        self.momentum = momentum
        self.step_count = 0
        self._m = [None] * len(self.params)
        self._v = [None] * len(self.params)

    @property
    def learning_rate(self):
        if self.schedule == "constant":
            return self.lr0
        return cosine_lr(self.step_count, self.total_steps, self.lr0, self.lr_min)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        lr = self.learning_rate
        self.step_count += 1
        if lr == 0.0:
            return lr
        t = self.step_count
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.method == "adamw":
                if self._m[i] is None:
                    self._m[i] = np.zeros_like(p.data)
                    self._v[i] = np.zeros_like(p.data)
                self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
                self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
                m_hat = self._m[i] / (1.0 - b1 ** t)
                v_hat = self._v[i] / (1.0 - b2 ** t)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                if self.momentum:
                    if self._m[i] is None:
                        self._m[i] = np.zeros_like(p.data)
                    self._m[i] = self.momentum * self._m[i] + g
                    update = self._m[i]
                else:
                    update = g
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)
        return lr


# ================================================================= #
# ======================= GRADIENT CHECKS ========================= #
# ================================================================= #

def numerical_grad(fn, tensor, eps=1e-6, indices=None):
    """Central finite differences of scalar fn() w.r.t. tensor (selected flat indices)."""
    if not tensor.data.flags.c_contiguous:
        tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(fn().item())
            flat[i] = orig - eps
            minus = float(fn().item())
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * eps)
    return out.reshape(tensor.shape)


def gradcheck(fn, tensors, eps=1e-6, max_coords=None, seed=0):
    """Largest norm-based relative error ||a-n|| / (||a|| + ||n||) over the given tensors."""
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        indices = None
        if max_coords is not None and t.size > max_coords:
            indices = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numerical_grad(fn, t, eps=eps, indices=indices)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if indices is not None:
            a, n = a[indices], n[indices]
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    LOG.debug(">>> [GRADCHECK] %d tensors, relative error %.3g", len(tensors), worst)
    return worst
