"""
A small dense tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the Q-networks and their losses are provided.
Every op records a closure that pushes the output gradient to its parents;
``Tensor.backward`` walks the tape from a scalar root.
"""
import contextlib
import contextvars
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import InvalidArgumentError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS = {'float32': np.float32, 'float64': np.float64}

_grad_enabled = contextvars.ContextVar('grad_enabled', default=True)
_dtype = contextvars.ContextVar('dtype', default=None)
_debug = contextvars.ContextVar('debug', default=False)


def default_dtype():
    dtype = _dtype.get()
    if dtype is None:
        from .conf import grasp_settings
        dtype = PRECISIONS[grasp_settings()['PRECISION']]
    return dtype


@contextlib.contextmanager
def precision(dtype):
    """Switch between verification (float64) and training (float32) precision."""
    if isinstance(dtype, str):
        if dtype not in PRECISIONS:
            raise InvalidArgumentError(f"Unknown precision {dtype!r}. Choose from: {list(PRECISIONS)}")
        dtype = PRECISIONS[dtype]
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Check every forward and backward result for NaN values."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


def _check_finite(array, where):
    if _debug.get() and np.isnan(array).any():
        raise FloatingPointError(f"NaN produced by {where}")


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward', '_op')

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = 'leaf'

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

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
        return scale(self, -1.0)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires a gradient."""
        if self.data.size != 1:
            raise InvalidArgumentError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data) if self.grad is None or self._parents else self.grad + 1
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            _check_finite(node.grad, f"backward of {node._op}")
            node._backward(node.grad)


class Parameter(Tensor):
    """A trainable leaf tensor."""
    __slots__ = ()

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _topological_order(root):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _record(data, parents, backward, op):
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    _check_finite(out.data, op)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))
    return _record(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))
    return _record(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'multiply')

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))
    return _record(a.data * b.data, (a, b), backward, 'multiply')


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)

    def backward(grad):
        _accumulate(a, grad * factor)
    return _record(a.data * factor, (a,), backward, 'scale')


def relu(x):
    x = as_tensor(x)
    positive = x.data > 0

    def backward(grad):
        _accumulate(x, grad * positive)
    return _record(np.where(positive, x.data, 0).astype(x.data.dtype), (x,), backward, 'relu')


def squash(x):
    """Element-wise two-logit softmax, i.e. the logistic function, bounded in (0, 1)."""
    x = as_tensor(x)
    out = expit(x.data).astype(x.data.dtype)

    def backward(grad):
        _accumulate(x, grad * out * (1 - out))
    return _record(out, (x,), backward, 'squash')


def conv2d(x, weight, stride=1, padding=0):
    """
    Zero-padded cross-correlation.

    ``x`` is ``[c_in, h, w]`` or batched ``[n, c_in, h, w]``; ``weight`` is
    ``[c_out, c_in, kh, kw]``. Output size ``floor((h + 2p - kh) / stride) + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    if data.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [n, c, h, w] input and 4-d kernel, got {x.shape} and {weight.shape}")
    n, channels, height, width = data.shape
    out_channels, in_channels, kh, kw = weight.shape
    if channels != in_channels:
        raise ShapeError(f"conv2d: input has {channels} channels, kernel expects {in_channels}")
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit a {height}x{width} input with padding {padding}")

    padded = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, channels * kh * kw)
    flat_weight = weight.data.reshape(out_channels, -1)
    out = (cols @ flat_weight.T).reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(grad):
        grad = grad[None] if single else grad
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        if weight.requires_grad:
            _accumulate(weight, (grad_rows.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            grad_cols = (grad_rows @ flat_weight).reshape(n, out_h, out_w, channels, kh, kw)
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
            _accumulate(x, grad_x[0] if single else grad_x)
    return _record(out[0] if single else out, (x, weight), backward, 'conv2d')


def max_pool2x2(x):
    x = as_tensor(x)
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial sizes, got {height}x{width}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, height // 2, 2, width // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, height // 2, width // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def backward(grad):
        grad_blocks = np.zeros(blocks.shape, dtype=grad.dtype)
        np.put_along_axis(grad_blocks, argmax[..., None], grad[..., None], axis=-1)
        grad_blocks = grad_blocks.reshape(*lead, height // 2, width // 2, 2, 2)
        grad_x = np.moveaxis(grad_blocks, -2, -3).reshape(x.shape)
        _accumulate(x, grad_x)
    return _record(out, (x,), backward, 'max_pool2x2')


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(grad):
        lead = x.shape[:-2]
        height, width = x.shape[-2:]
        _accumulate(x, grad.reshape(*lead, height, 2, width, 2).sum(axis=(-3, -1)))
    return _record(out, (x,), backward, 'upsample2x')


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(grad):
        for tensor, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(start, stop)
            _accumulate(tensor, grad[tuple(index)])
    return _record(out, tensors, backward, 'concat')


def add_bias(x, bias, repeat=1):
    """Add one bias per field copy to ``[n, c, h, w]`` (or ``[n, c]``) data, shared over ``repeat`` fiber slots."""
    x, bias = as_tensor(x), as_tensor(bias)
    channels = x.shape[1]
    if bias.ndim != 1 or bias.shape[0] * repeat != channels:
        raise ShapeError(f"add_bias: {bias.shape[0]} biases x {repeat} slots do not match {channels} channels")
    expand = (1, channels) + (1,) * (x.ndim - 2)
    out = x.data + np.repeat(bias.data, repeat).reshape(expand)

    def backward(grad):
        _accumulate(x, grad)
        axes = tuple(i for i in range(grad.ndim) if i != 1)
        per_channel = grad.sum(axis=axes)
        _accumulate(bias, per_channel.reshape(bias.shape[0], repeat).sum(axis=1))
    return _record(out, (x, bias), backward, 'add_bias')


def expand_linear(base, matrix, shape):
    """``reshape(matrix @ base.ravel(), shape)``; the backward pass is the transposed map."""
    base = as_tensor(base)
    if matrix.shape[1] != base.size:
        raise ShapeError(f"expand_linear: matrix takes {matrix.shape[1]} inputs, base has {base.size}")
    out = np.asarray(matrix @ base.data.reshape(-1), dtype=base.data.dtype).reshape(shape)

    def backward(grad):
        _accumulate(base, np.asarray(matrix.T @ grad.reshape(-1)).reshape(base.shape))
    return _record(out, (base,), backward, 'expand_linear')


def take_pixels(x, batch, channel, rows, cols):
    """Gather ``x[batch, channel, rows, cols]`` into a 1-d tensor."""
    x = as_tensor(x)
    index = tuple(np.asarray(v, dtype=int) for v in (batch, channel, rows, cols))
    out = x.data[index]

    def backward(grad):
        grad_x = np.zeros_like(x.data)
        np.add.at(grad_x, index, grad)
        _accumulate(x, grad_x)
    return _record(out, (x,), backward, 'take_pixels')


def take_columns(x, rows, cols):
    """Gather ``x[rows, cols]`` from a 2-d tensor."""
    x = as_tensor(x)
    index = (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int))
    out = x.data[index]

    def backward(grad):
        grad_x = np.zeros_like(x.data)
        np.add.at(grad_x, index, grad)
        _accumulate(x, grad_x)
    return _record(out, (x,), backward, 'take_columns')


def reshape(x, shape):
    x = as_tensor(x)

    def backward(grad):
        _accumulate(x, grad.reshape(x.shape))
    return _record(x.data.reshape(shape), (x,), backward, 'reshape')


def sum(x, axis=None):  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(grad):
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        _accumulate(x, np.broadcast_to(grad, x.shape))
    return _record(out, (x,), backward, 'sum')


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis), 1.0 / count)


def mse(prediction, target):
    """Mean squared error."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"mse: prediction {prediction.shape} and target {target.shape} differ")
    diff = sub(prediction, target)
    return mean(mul(diff, diff))


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.first_moments = [np.zeros_like(p.data) for p in self.params]
        self.second_moments = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        """Apply one update from the accumulated gradients, then clear them."""
        beta1, beta2 = self.betas
        self.steps += 1
        correction1 = 1 - beta1 ** self.steps
        correction2 = 1 - beta2 ** self.steps
        for param, m, v in zip(self.params, self.first_moments, self.second_moments):
            grad = np.zeros_like(param.data) if param.grad is None else param.grad
            m *= beta1
            m += (1 - beta1) * grad
            v *= beta2
            v += (1 - beta2) * grad * grad
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.data = (param.data - update).astype(param.data.dtype)
        self.zero_grad()

    def state_arrays(self):
        arrays = {'optim/steps': np.array([self.steps], dtype=np.float64)}
        for param, m, v in zip(self.params, self.first_moments, self.second_moments):
            arrays[f"optim/m/{param.name}"] = m
            arrays[f"optim/v/{param.name}"] = v
        return arrays

    def load_state_arrays(self, arrays):
        if 'optim/steps' not in arrays:
            return
        self.steps = int(arrays['optim/steps'][0])
        for index, param in enumerate(self.params):
            self.first_moments[index] = np.array(arrays[f"optim/m/{param.name}"], dtype=param.data.dtype)
            self.second_moments[index] = np.array(arrays[f"optim/v/{param.name}"], dtype=param.data.dtype)


def optimizer_step(optimizer):
    optimizer.step()


def numerical_gradient(function, array, step=1e-5):
    """Central finite differences of a scalar ``function()`` with respect to ``array`` (mutated in place)."""
    grad = np.zeros(array.shape, dtype=np.float64)
    with np.nditer(array, flags=['multi_index'], op_flags=['readwrite']) as it:
        for entry in it:
            original = entry.copy()
            entry[...] = original + step
            upper = function()
            entry[...] = original - step
            lower = function()
            entry[...] = original
            grad[it.multi_index] = (upper - lower) / (2 * step)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale_)


class Module:
    """
    Container of Parameters and sub-modules.

    Parameters are discovered from instance attributes in definition order, which
    fixes their checkpoint names (``q1.levels.0.first.base`` and so on).
    """

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = f"{prefix}{name}"
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{index}.")

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def parameter_count(self):
        return int(np.sum([param.size for param in self.parameters()], dtype=np.int64))

    def state_dict(self):
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, arrays):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ShapeError(f"State is missing parameters: {', '.join(missing[:5])}")
        for name, param in params.items():
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise ShapeError(f"Parameter {name}: stored shape {value.shape} != {param.shape}")
            param.data = value.astype(param.data.dtype, copy=True)
            param.grad = None
