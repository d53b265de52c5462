"""N-dimensional tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order; image tensors use NCHW layout.
Storage defaults to float32. Every op preserves the dtype of its inputs, so a
test harness can run the same graph through a float64 shadow path. Binary ops
require identical shapes; there is no broadcasting. Gradients accumulate
across backward() calls and are zeroed by the optimizer.
"""

import numpy as np

from .errors import DomainError, GraphError, ShapeError


class Tensor:
    """A numpy-backed value with optional gradient tracking.

    Tensors produced by ops keep references to their inputs and a backward
    closure; together these form the recorded graph that backward() replays
    in reverse topological order. Tensors are immutable once created except
    for the grad buffer (and parameter data, which the optimizer owns).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A grad-free leaf sharing this tensor's values."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, op={self._op!r}, requires_grad={self.requires_grad})"


def _result(data, parents, backward, op):
    """Wrap an op result, recording the graph only if some input needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def backward(loss):
    """Populate grads on every requires_grad leaf reachable from a scalar loss.

    Repeated calls without zeroing accumulate into the existing grads.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative DFS postorder over grad-requiring nodes; reversed it yields a
    # valid reverse-topological order (every consumer before its inputs).
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    cotangents = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = cotangents.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = cotangents.get(pid)
            cotangents[pid] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ "
            "(broadcasting is not supported)"
        )


def add(a, b):
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(x, c):
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def relu(x):
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def leaky_relu(x, slope=0.2):
    xd = x.data
    out = np.where(xd > 0, xd, xd * slope)
    return _result(out, (x,), lambda g: (np.where(xd > 0, g, g * slope),), "leaky_relu")


def tanh(x):
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def _sigmoid_array(xd):
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1 / (1 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid(x):
    s = _sigmoid_array(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def absolute(x):
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def log(x):
    xd = x.data
    if xd.size and np.min(xd) <= 0:
        raise DomainError("log: input has non-positive values")
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softplus(x):
    """log(1 + exp(x)), computed without overflow; gradient is sigmoid(x)."""
    xd = x.data
    out = np.logaddexp(0, xd)
    return _result(out, (x,), lambda g: (g * _sigmoid_array(xd),), "softplus")


_UNARY = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": absolute,
    "log": log,
    "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind, *args):
    """Dispatch by name over the pointwise op set."""
    if kind in _UNARY:
        return _UNARY[kind](*args)
    if kind in _BINARY:
        return _BINARY[kind](*args)
    if kind == "scalar_mul":
        return scalar_mul(*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions


def sum(x):  # noqa: A001 - mirrors numpy's naming
    if x.data.size == 0:
        raise DomainError("sum: empty tensor")
    shape = x.data.shape
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(x):
    if x.data.size == 0:
        raise DomainError("mean: empty tensor")
    shape = x.data.shape
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


def reduce(kind, x):
    if kind == "sum":
        return sum(x)
    if kind == "mean":
        return mean(x)
    raise ValueError(f"unknown reduce kind {kind!r}")


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(parts, axis=1):
    """Concatenate tensors along one axis; backward splits the cotangent."""
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    first = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(first) or any(
            i != axis and s[i] != first[i] for i in range(len(first))
        ):
            raise ShapeError(f"concat: shapes {first} and {s} differ off axis {axis}")
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def back(g):
        grads = []
        offset = 0
        index = [slice(None)] * g.ndim
        for size in sizes:
            index[axis] = slice(offset, offset + size)
            grads.append(g[tuple(index)])
            offset += size
        return grads

    return _result(out, tuple(parts), back, "concat")


def crop(x, h0, h1, w0, w1):
    """Spatial slice [h0:h1, w0:w1] of an NCHW tensor; backward zero-pads."""
    if x.data.ndim != 4:
        raise ShapeError(f"crop: expected 4-D NCHW tensor, got shape {x.data.shape}")
    _, _, h, w = x.data.shape
    if not (0 <= h0 < h1 <= h and 0 <= w0 < w1 <= w):
        raise ShapeError(f"crop: window [{h0}:{h1}, {w0}:{w1}] outside {h}x{w}")
    shape = x.data.shape
    out = np.ascontiguousarray(x.data[:, :, h0:h1, w0:w1])

    def back(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, :, h0:h1, w0:w1] = g
        return (dx,)

    return _result(out, (x,), back, "crop")


def channel_bias(x, b):
    """Add a per-channel bias vector to an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_bias: expected 4-D NCHW tensor, got {x.data.shape}")
    if b.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"channel_bias: bias shape {b.data.shape} does not match {x.data.shape[1]} channels"
        )
    out = x.data + b.data.reshape(1, -1, 1, 1)
    return _result(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_bias")


# ---------------------------------------------------------------------------
# convolution


def conv_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def conv_transpose_output_extent(extent, kernel, stride, padding):
    return (extent - 1) * stride - 2 * padding + kernel


def _check_conv_args(stride, padding):
    if not (isinstance(stride, int) and stride >= 1):
        raise ShapeError(f"stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ShapeError(f"padding must be a non-negative int, got {padding!r}")


def _im2col(arr, kh, kw, stride, padding):
    """Unfold NCHW array into [B*OH*OW, C*kh*kw] patch rows."""
    b, c, h, w = arr.shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    if padding:
        arr = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(arr, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)


def _col2im(col, shape, kh, kw, stride, padding):
    """Adjoint of _im2col: scatter-add patch rows back into an NCHW array."""
    b, c, h, w = shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    # contiguous [B, C, kh, kw, OH, OW] makes each scatter-add read one block
    col = np.ascontiguousarray(col.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=col.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col[:, :, i, j]
    if padding:
        return np.ascontiguousarray(out[:, :, padding : padding + h, padding : padding + w])
    return out


def conv2d(x, k, stride=1, padding=0):
    """Cross-correlate x[B,Cin,H,W] with k[Cout,Cin,kh,kw]."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.data.shape} and {k.data.shape}")
    b, cin, h, w = x.data.shape
    cout, kcin, kh, kw = k.data.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    col = _im2col(x.data, kh, kw, stride, padding)
    w2 = k.data.reshape(cout, -1)
    out = np.ascontiguousarray(
        (col @ w2.T).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
    )

    def back(g):
        gr = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (gr.T @ col).reshape(k.data.shape)
        dx = _col2im(gr @ w2, x.data.shape, kh, kw, stride, padding)
        return dx, dk

    return _result(out, (x, k), back, "conv2d")


def conv2d_transpose(x, k, stride=1, padding=0):
    """Adjoint of conv2d: x[B,Cin,H,W] with k[Cin,Cout,kh,kw].

    For matching configs, conv2d_transpose(g, k) equals the input-gradient of
    conv2d at cotangent g, so <conv2d(x,k), g> == <x, conv2d_transpose(g,k)>.
    """
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose: need 4-D input and kernel, got {x.data.shape} and {k.data.shape}"
        )
    b, cin, h, w = x.data.shape
    kcin, cout, kh, kw = k.data.shape
    if cin != kcin:
        raise ShapeError(f"conv2d_transpose: input has {cin} channels but kernel expects {kcin}")
    h_out = conv_transpose_output_extent(h, kh, stride, padding)
    w_out = conv_transpose_output_extent(w, kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d_transpose: output extent {h_out}x{w_out} is degenerate "
            f"(input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding})"
        )
    x_rows = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    w2 = k.data.reshape(cin, -1)
    out = _col2im(x_rows @ w2, (b, cout, h_out, w_out), kh, kw, stride, padding)

    def back(g):
        colg = _im2col(g, kh, kw, stride, padding)
        dx = np.ascontiguousarray(
            (colg @ w2.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        )
        dk = (x_rows.T @ colg).reshape(k.data.shape)
        return dx, dk

    return _result(out, (x, k), back, "conv2d_transpose")


# ---------------------------------------------------------------------------
# normalization and dropout


def _check_norm_shapes(x, gamma, beta, op):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected 4-D NCHW tensor, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"{op}: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels"
        )


def batchnorm(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5):
    """Per-channel batch normalization with affine parameters.

    Train mode normalizes by batch statistics over (B, H, W) and updates the
    running buffers in place (biased variance, matching the normalizer).
    Eval mode normalizes by the running statistics.
    """
    _check_norm_shapes(x, gamma, beta, "batchnorm")
    xd = x.data
    c = xd.shape[1]
    gd = gamma.data.reshape(1, c, 1, 1)

    if mode == "train":
        axes = (0, 2, 3)
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var
        inv = (1 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
        xhat = (xd - mu.reshape(1, c, 1, 1)) * inv
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]

        def back(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gd
            t1 = dxhat.sum(axis=axes).reshape(1, c, 1, 1)
            t2 = (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1)
            dx = (inv / n) * (n * dxhat - t1 - xhat * t2)
            return dx, dgamma, dbeta

        return _result(out, (x, gamma, beta), back, "batchnorm")

    if mode == "eval":
        if running_mean is None or running_var is None:
            raise DomainError("batchnorm: eval mode needs running statistics")
        inv = (1 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)

        def back(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _result(out, (x, gamma, beta), back, "batchnorm")

    raise ValueError(f"batchnorm: unknown mode {mode!r}")


def instancenorm(x, gamma, beta, eps=1e-5):
    """Per-instance, per-channel normalization over (H, W); no running stats."""
    _check_norm_shapes(x, gamma, beta, "instancenorm")
    xd = x.data
    b, c, h, w = xd.shape
    gd = gamma.data.reshape(1, c, 1, 1)
    axes = (2, 3)
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)
    n = h * w

    def back(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gd
        t1 = dxhat.sum(axis=axes, keepdims=True)
        t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv / n) * (n * dxhat - t1 - xhat * t2)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), back, "instancenorm")


def dropout(x, rate, mode="train", rng=None):
    """Zero a random fraction in train mode, scaling survivors by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise DomainError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = rng.random(x.data.shape) >= rate
    mask = keep.astype(x.data.dtype) * (1.0 / (1.0 - rate))
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
