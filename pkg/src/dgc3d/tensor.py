"""Dense 5-axis tensors with reverse-mode automatic differentiation.

Everything the network needs is a closed set of primitives over
``(batch, channels, depth, height, width)`` arrays: grouped 3D convolution
(stride 1, zero padding), average pooling, affine maps, batch
normalization, ReLU, channel concatenation/shuffle, and a softmax
cross-entropy loss.  All math is double-precision numpy.  Forward results
are deterministic in single-threaded mode; the recorded operation graph is
walked exactly once, in reverse topological order, by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """Structurally invalid layer, model, or run configuration."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional gradient buffer and backward rule.

    Leaf tensors are plain data; tensors produced by the ops in this module
    remember their parents and how to push a gradient back to them.  The
    graph of these links is the recording that :func:`backward` replays.

    Floating dtypes are preserved (float64 is the default and the one all
    stated tolerances assume; float32 is supported for training builds),
    anything else is promoted to float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_rule = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_param_ids = itertools.count()


class Parameter(Tensor):
    """A named, trainable leaf tensor with a unique integer id."""

    __slots__ = ("name", "id")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.id = next(_param_ids)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _from_op(data, parents, backward_rule) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = backward_rule
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Propagate d(loss)/d(node) to every recorded ancestor of ``loss``.

    ``loss`` must be a scalar produced by recorded operations.  Each
    recorded operation is visited exactly once, in reverse topological
    order; leaves that never fed the loss keep whatever gradient they had
    (zero after ``zero_grad``).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_rule is None:
        raise RuntimeError("backward called before any operation was recorded for this tensor")

    # Iterative post-order DFS over parent links: parents are appended
    # before their consumers, so the reversed list is a valid backprop order.
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_rule is not None and node.grad is not None:
            node._backward_rule(node.grad)


# ---------------------------------------------------------------------------
# convolution and pooling


def _check_tensor5(x: Tensor, what: str):
    if x.data.ndim != 5:
        raise ShapeError(f"{what} must have 5 axes (n, c, d, h, w), got {x.data.ndim}")


_AXIS_NAMES = ("depth", "height", "width")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           groups: int = 1, padding=(0, 0, 0)) -> Tensor:
    """Grouped 3D cross-correlation, stride 1, zero padding.

    ``kernel`` has shape ``(c_out, c_in/groups, kd, kh, kw)``; group ``g``'s
    output channels read only input channels in group ``g``.  Output extent
    per axis is ``in + 2*pad - k + 1``.  Differentiable in ``x``, ``kernel``
    and ``bias``.
    """
    _check_tensor5(x, "conv3d input")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d kernel must have 5 axes, got {kernel.data.ndim}")
    n, c_in, d, h, w = x.data.shape
    c_out, c_in_g, kd, kh, kw = kernel.data.shape
    if groups < 1:
        raise ConfigError(f"groups must be positive, got {groups}")
    if c_in % groups != 0:
        raise ConfigError(f"groups={groups} does not divide input channels {c_in}")
    if c_out % groups != 0:
        raise ConfigError(f"groups={groups} does not divide output channels {c_out}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"kernel expects {c_in_g} channels per group, input provides {c_in // groups}")
    pd, ph, pw = padding
    for name, ext, p, k in zip(_AXIS_NAMES, (d, h, w), (pd, ph, pw), (kd, kh, kw)):
        if ext + 2 * p < k:
            raise ShapeError(
                f"kernel size {k} exceeds padded input extent {ext + 2 * p} on the {name} axis")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.data.shape}")

    ci_g = c_in // groups
    co_g = c_out // groups
    pointwise = (kd, kh, kw) == (1, 1, 1) and (pd, ph, pw) == (0, 0, 0)

    if pointwise:
        xp = x.data
        out = np.empty((n, c_out, d, h, w))
        for g in range(groups):
            out[:, g * co_g:(g + 1) * co_g] = np.einsum(
                "ncdhw,oc->nodhw",
                xp[:, g * ci_g:(g + 1) * ci_g],
                kernel.data[g * co_g:(g + 1) * co_g, :, 0, 0, 0],
                optimize=True)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
        od, oh, ow = win.shape[2:5]
        out = np.empty((n, c_out, od, oh, ow))
        for g in range(groups):
            out[:, g * co_g:(g + 1) * co_g] = np.einsum(
                "ncdhwxyz,ocxyz->nodhw",
                win[:, g * ci_g:(g + 1) * ci_g],
                kernel.data[g * co_g:(g + 1) * co_g],
                optimize=True)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1, 1)

    kdata = kernel.data

    def rule(go):
        if kernel.requires_grad:
            dk = np.empty_like(kdata)
            for g in range(groups):
                gs = slice(g * co_g, (g + 1) * co_g)
                cs = slice(g * ci_g, (g + 1) * ci_g)
                if pointwise:
                    dk[gs, :, 0, 0, 0] = np.einsum(
                        "ncdhw,nodhw->oc", xp[:, cs], go[:, gs], optimize=True)
                else:
                    dk[gs] = np.einsum(
                        "ncdhwxyz,nodhw->ocxyz",
                        sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, cs],
                        go[:, gs], optimize=True)
            _accum(kernel, dk)
        if x.requires_grad:
            if pointwise:
                dx = np.empty_like(x.data)
                for g in range(groups):
                    dx[:, g * ci_g:(g + 1) * ci_g] = np.einsum(
                        "nodhw,oc->ncdhw",
                        go[:, g * co_g:(g + 1) * co_g],
                        kdata[g * co_g:(g + 1) * co_g, :, 0, 0, 0],
                        optimize=True)
            else:
                # Full correlation of the output gradient with the flipped
                # kernel gives the padded-input gradient; crop the padding.
                gp = np.pad(go, ((0, 0), (0, 0), (kd - 1, kd - 1),
                                 (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gwin = sliding_window_view(gp, (kd, kh, kw), axis=(2, 3, 4))
                kf = kdata[:, :, ::-1, ::-1, ::-1]
                dxp = np.empty((n, c_in, d + 2 * pd, h + 2 * ph, w + 2 * pw))
                for g in range(groups):
                    dxp[:, g * ci_g:(g + 1) * ci_g] = np.einsum(
                        "nodhwxyz,ocxyz->ncdhw",
                        gwin[:, g * co_g:(g + 1) * co_g],
                        kf[g * co_g:(g + 1) * co_g], optimize=True)
                dx = dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
            _accum(x, dx)
        if bias is not None and bias.requires_grad:
            _accum(bias, go.sum(axis=(0, 2, 3, 4)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _from_op(out, parents, rule)


def avg_pool3d(x: Tensor, window, stride=None) -> Tensor:
    """Average pooling with per-axis window and stride, floor semantics."""
    _check_tensor5(x, "avg_pool3d input")
    wd, wh, ww = window
    sd, sh, sw = stride if stride is not None else window
    n, c, d, h, w = x.data.shape
    for name, ext, k in zip(_AXIS_NAMES, (d, h, w), (wd, wh, ww)):
        if k > ext:
            raise ConfigError(f"pool window {k} exceeds input extent {ext} on the {name} axis")
        if k < 1:
            raise ConfigError(f"pool window must be >= 1, got {k} on the {name} axis")
    if min(sd, sh, sw) < 1:
        raise ConfigError(f"pool stride must be >= 1, got {(sd, sh, sw)}")

    win = sliding_window_view(x.data, (wd, wh, ww), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    out = win.mean(axis=(5, 6, 7))
    od, oh, ow = out.shape[2:]
    count = wd * wh * ww

    def rule(go):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        share = go / count
        for a in range(wd):
            for b in range(wh):
                for cc in range(ww):
                    dx[:, :,
                       a:a + sd * (od - 1) + 1:sd,
                       b:b + sh * (oh - 1) + 1:sh,
                       cc:cc + sw * (ow - 1) + 1:sw] += share
        _accum(x, dx)

    return _from_op(out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Pool the full (d, h, w) extent down to a single value per channel."""
    _, _, d, h, w = x.data.shape
    return avg_pool3d(x, (d, h, w), (1, 1, 1))


# ---------------------------------------------------------------------------
# affine, normalization, activations


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for 2-axis inputs ``(n, f_in)``."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear input must have 2 axes, got {x.data.ndim}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"weight shape {weight.data.shape} incompatible with input {x.data.shape}")
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"bias shape {bias.data.shape} does not match f_out {weight.data.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def rule(go):
        if x.requires_grad:
            _accum(x, go @ weight.data)
        if weight.requires_grad:
            _accum(weight, go.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accum(bias, go.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(out, parents, rule)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the (n, d, h, w) axes.

    Training mode normalizes with batch statistics (biased variance),
    updates the running buffers in place by exponential moving average, and
    is differentiable through the batch statistics.  Eval mode uses the
    running buffers.
    """
    _check_tensor5(x, "batch_norm input")
    n, c, d, h, w = x.data.shape
    if n == 0:
        raise ShapeError("batch_norm requires a non-empty batch")
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    axes = (0, 2, 3, 4)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1, 1)) * inv_std.reshape(1, c, 1, 1, 1)
    out = scale.data.reshape(1, c, 1, 1, 1) * xhat + shift.data.reshape(1, c, 1, 1, 1)

    def rule(go):
        if scale.requires_grad:
            _accum(scale, (go * xhat).sum(axis=axes))
        if shift.requires_grad:
            _accum(shift, go.sum(axis=axes))
        if x.requires_grad:
            dxhat = go * scale.data.reshape(1, c, 1, 1, 1)
            if training:
                dx = (dxhat
                      - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                      ) * inv_std.reshape(1, c, 1, 1, 1)
            else:
                dx = dxhat * inv_std.reshape(1, c, 1, 1, 1)
            _accum(x, dx)

    return _from_op(out, (x, scale, shift), rule)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0

    def rule(go):
        _accum(x, go * mask)

    return _from_op(np.where(mask, x.data, 0.0), (x,), rule)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(inputs) -> Tensor:
    """Concatenate along the channel axis; all other axes must agree."""
    if not inputs:
        raise ShapeError("concat_channels requires a non-empty list")
    ref = inputs[0].data.shape
    for i, t in enumerate(inputs):
        _check_tensor5(t, f"concat input {i}")
        s = t.data.shape
        if (s[0],) + s[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(
                f"concat input {i} has non-channel shape {(s[0],) + s[2:]}, "
                f"expected {(ref[0],) + ref[2:]}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    sizes = [t.data.shape[1] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def rule(go):
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, go[:, lo:hi])

    return _from_op(out, tuple(inputs), rule)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Permutation p with out[j*groups + i] = in[i*(c/groups) + j]."""
    if channels % groups != 0:
        raise ConfigError(f"shuffle groups {groups} do not divide {channels} channels")
    return np.arange(channels).reshape(groups, channels // groups).T.ravel()


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Transpose the channel axis viewed as a groups x (c/groups) grid."""
    _check_tensor5(x, "channel_shuffle input")
    perm = shuffle_permutation(x.data.shape[1], groups)
    inv = np.argsort(perm)
    out = x.data[:, perm]

    def rule(go):
        _accum(x, go[:, inv])

    return _from_op(out, (x,), rule)


def scale_channels(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each (sample, channel) slab by a scalar weight (n, c)."""
    _check_tensor5(x, "scale_channels input")
    n, c = x.data.shape[:2]
    if weights.data.shape != (n, c):
        raise ShapeError(f"weights must have shape {(n, c)}, got {weights.data.shape}")
    wb = weights.data[:, :, None, None, None]
    out = x.data * wb

    def rule(go):
        if x.requires_grad:
            _accum(x, go * wb)
        if weights.requires_grad:
            _accum(weights, (go * x.data).sum(axis=(2, 3, 4)))

    return _from_op(out, (x, weights), rule)


def mul_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (no gradient to it)."""
    out = x.data * const

    def rule(go):
        _accum(x, go * const)

    return _from_op(out, (x,), rule)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def rule(go):
        _accum(x, go.reshape(x.data.shape))

    return _from_op(out, (x,), rule)


def flatten2d(x: Tensor) -> Tensor:
    """Collapse all non-batch axes: (n, ...) -> (n, prod(...))."""
    return reshape(x, (x.data.shape[0], -1))


# ---------------------------------------------------------------------------
# loss and small generic ops


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray):
    """Mean negative log-likelihood of integer labels under softmax logits.

    Returns ``(loss, probs)`` where ``probs`` is the cached softmax as a
    plain array.  Stabilized by max subtraction; the gradient is
    ``(softmax - onehot) / n``.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must have 2 axes, got {logits.data.ndim}")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    loss_val = -logp[np.arange(n), labels].mean()

    def rule(go):
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0
        _accum(logits, (probs - onehot) * (float(go) / n))

    return _from_op(np.asarray(loss_val), (logits,), rule), probs


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def rule(go):
        _accum(a, go)
        _accum(b, go)

    return _from_op(a.data + b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")

    def rule(go):
        _accum(a, go * b.data)
        _accum(b, go * a.data)

    return _from_op(a.data * b.data, (a, b), rule)


def scale(x: Tensor, s: float) -> Tensor:
    def rule(go):
        _accum(x, go * s)

    return _from_op(x.data * s, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    def rule(go):
        _accum(x, np.full_like(x.data, float(go)))

    return _from_op(np.asarray(x.data.sum()), (x,), rule)
