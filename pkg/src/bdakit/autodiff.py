"""Reverse-mode automatic differentiation over float64 numpy arrays.

Conventions shared by the whole package:

* Feature maps are laid out ``(batch, channels, height, width)``.
* Everything is float64. The test suite leans on central finite differences
  at tolerances (1e-6 for linear ops) that float32 cannot meet.
* Interpolation -- both :func:`upsample_bilinear` and
  :func:`bilinear_sample` -- uses the half-pixel-center convention: output
  index ``i`` reads source coordinate ``(i + 0.5) * (n_in / n_out) - 0.5``,
  and out-of-range coordinates are clamped to the border. Clamping (rather
  than zero fill) keeps sampled values in-distribution and leaves usable
  gradients at image edges.
* Non-finite values in any forward result or parameter gradient raise
  :class:`ContractError`; silent NaN propagation is never acceptable here.

The graph is a plain tape: each op returns a Tensor holding its parents and
a closure that scatters the upstream gradient. ``backward()`` walks the tape
in reverse topological order and accumulates into ``.grad``.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractError(ValueError):
    """A runtime contract (shape, value range, finiteness) was violated."""


class ConfigError(ValueError):
    """A static configuration value is invalid."""


_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


@contextlib.contextmanager
def finite_checks_disabled():
    global _finite_checks
    prev = _finite_checks
    _finite_checks = False
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by {where}")


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Reverse pass from a scalar; accumulates into ``.grad`` of every
        tensor on the tape that requires a gradient."""
        if self.data.size != 1:
            raise ContractError("backward() starts from a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        if _finite_checks:
            for node in topo:
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise ContractError("non-finite gradient after backward pass")

    # arithmetic sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise ContractError("tensor division is only supported by scalars")
        return mul(self, as_tensor(1.0 / float(other)))

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor carrying AdamW moment buffers and a step counter."""

    __slots__ = ("name", "m", "v", "t")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _result(data: np.ndarray, parents: tuple, backward_fn, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _result(-a.data, (a,), bwd, "neg")


def pow_const(a: Tensor, exponent: float) -> Tensor:
    data = np.power(a.data, exponent)

    def bwd(g):
        if exponent == 0.0:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            local = exponent * np.power(a.data, exponent - 1.0)
        # subgradient 0 where x**(c-1) is singular (x == 0, c < 1)
        local = np.where(np.isfinite(local), local, 0.0)
        _accum(a, g * local)

    return _result(data, (a,), bwd, "pow")


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _result(data, (a,), bwd, "exp")


def tlog(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), bwd, "log")


def clip_min(a: Tensor, floor: float) -> Tensor:
    data = np.maximum(a.data, floor)

    def bwd(g):
        _accum(a, g * (a.data > floor))

    return _result(data, (a,), bwd, "clip_min")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _result(data, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _result(data, (a,), bwd, "sigmoid")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    data = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _result(data, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), bwd, "log_softmax")


# reductions and reshaping ---------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _result(np.asarray(a.data.sum()), (a,), bwd, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _result(np.asarray(a.data.mean()), (a,), bwd, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(orig))

    return _result(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(t, g[tuple(index)])

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat"
    )


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        _accum(a, full)

    return _result(a.data[:, lo:hi].copy(), (a,), bwd, "slice_channels")


def take_flat(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor at constant integer indices."""
    indices = np.asarray(indices, dtype=np.intp)
    size = a.data.size

    def bwd(g):
        flat = np.bincount(indices.ravel(), weights=g.ravel(), minlength=size)
        _accum(a, flat.reshape(a.data.shape))

    return _result(a.data.ravel()[indices], (a,), bwd, "take_flat")


# structured ops --------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution, kernels 1x1 (no padding) or 3x3 (same padding).

    Stride 1 preserves the spatial size; stride 2 halves it and is used by
    the encoder's downsampling convolutions.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractError("conv2d expects 4-d input and weight")
    batch, cin, h, w = x.data.shape
    cout, cw, kh, kw = weight.data.shape
    if kh != kw or kh not in (1, 3):
        raise ConfigError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d supports stride 1 or 2, got {stride}")
    if cin != cw:
        raise ContractError(f"conv2d channel mismatch: input {cin}, weight expects {cw}")
    if bias is not None and bias.data.shape != (cout,):
        raise ContractError("conv2d bias must have one entry per output channel")

    pad = 1 if kh == 3 else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        _accum(weight, np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            ho, wo = g.shape[2], g.shape[3]
            if stride == 1:
                gd = g
            else:
                gd = np.zeros((batch, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            flipped = weight.data[:, :, ::-1, ::-1]
            part = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))
            part = part.transpose(0, 3, 1, 2)
            hp, wp = h + 2 * pad, w + 2 * pad
            if part.shape[2] != hp or part.shape[3] != wp:
                # strided convs may not cover the last padded rows/cols
                full = np.zeros((batch, cin, hp, wp))
                full[:, :, : part.shape[2], : part.shape[3]] = part
                part = full
            _accum(x, part[:, :, pad : pad + h, pad : pad + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bwd, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) normalization to zero mean / unit variance,
    followed by a per-channel affine transform."""
    if x.data.ndim != 4:
        raise ContractError("group_norm expects a 4-d input")
    batch, channels, h, w = x.data.shape
    if groups < 1 or channels % groups != 0:
        raise ConfigError(f"{channels} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ContractError("group_norm affine parameters must be per-channel")

    per = channels // groups
    xg = x.data.reshape(batch, groups, per, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(batch, channels, h, w)
    out = gamma.data.reshape(1, channels, 1, 1) * xhat + beta.data.reshape(1, channels, 1, 1)

    def bwd(g):
        _accum(beta, g.sum(axis=(0, 2, 3)))
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            m = per * h * w
            dxhat = (g * gamma.data.reshape(1, channels, 1, 1)).reshape(batch, groups, per, h, w)
            dvar = (dxhat * xc).sum(axis=(2, 3, 4), keepdims=True) * -0.5 * rstd**3
            dmu = -rstd * dxhat.sum(axis=(2, 3, 4), keepdims=True) + dvar * (
                -2.0 / m
            ) * xc.sum(axis=(2, 3, 4), keepdims=True)
            dx = dxhat * rstd + dvar * (2.0 / m) * xc + dmu / m
            _accum(x, dx.reshape(batch, channels, h, w))

    return _result(out, (x, gamma, beta), bwd, "group_norm")


_interp_cache: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic half-pixel-center interpolation matrix (n_out, n_in)."""
    key = (n_out, n_in)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    _interp_cache[key] = mat
    return mat


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize to (target_h, target_w); exact identity when sizes match."""
    if x.data.ndim != 4:
        raise ContractError("upsample_bilinear expects a 4-d input")
    if target_h < 1 or target_w < 1:
        raise ContractError("upsample target extents must be >= 1")
    _, _, h, w = x.data.shape
    mh = _interp_matrix(target_h, h)
    mw = _interp_matrix(target_w, w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bwd(g):
        _accum(x, np.matmul(np.matmul(mh.T, g), mw))

    return _result(out, (x,), bwd, "upsample_bilinear")


def bilinear_sample(feature: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Read ``feature`` at continuous coordinates, bilinearly interpolated.

    ``xs``/``ys`` are (batch, h, w) column/row coordinates in pixel units.
    Out-of-range coordinates clamp to the border. Differentiable with respect
    to the feature and to both coordinate maps.
    """
    if feature.data.ndim != 4:
        raise ContractError("bilinear_sample expects a 4-d feature")
    if xs.data.shape != ys.data.shape or xs.data.ndim != 3:
        raise ContractError("coordinate maps must both be (batch, h, w)")
    batch, channels, h_in, w_in = feature.data.shape
    if xs.data.shape[0] != batch:
        raise ContractError("coordinate batch size must match the feature")

    xc = np.clip(xs.data, 0.0, w_in - 1.0)
    yc = np.clip(ys.data, 0.0, h_in - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)

    bi = np.arange(batch)[:, None, None]
    f = feature.data
    v00 = f[bi, :, y0, x0]  # (batch, h, w, channels)
    v01 = f[bi, :, y0, x1]
    v10 = f[bi, :, y1, x0]
    v11 = f[bi, :, y1, x1]
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = np.ascontiguousarray(
        (
            w00[..., None] * v00
            + w01[..., None] * v01
            + w10[..., None] * v10
            + w11[..., None] * v11
        ).transpose(0, 3, 1, 2)
    )

    def bwd(g):
        gt = g.transpose(0, 2, 3, 1)  # (batch, h, w, channels)
        if feature.requires_grad:
            plane = h_in * w_in
            chan = np.arange(channels)[None, None, None, :]
            stack_idx = []
            stack_val = []
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                idx = (bi[..., None] * channels + chan) * plane + (yy * w_in + xx)[..., None]
                stack_idx.append(idx.ravel())
                stack_val.append((gt * ww[..., None]).ravel())
            flat = np.bincount(
                np.concatenate(stack_idx),
                weights=np.concatenate(stack_val),
                minlength=batch * channels * plane,
            )
            _accum(feature, flat.reshape(batch, channels, h_in, w_in))
        if xs.requires_grad:
            ddx = ((1.0 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)) * gt
            in_range = (xs.data >= 0.0) & (xs.data <= w_in - 1.0)
            _accum(xs, ddx.sum(axis=-1) * in_range)
        if ys.requires_grad:
            ddy = ((1.0 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)) * gt
            in_range = (ys.data >= 0.0) & (ys.data <= h_in - 1.0)
            _accum(ys, ddy.sum(axis=-1) * in_range)

    return _result(out, (feature, xs, ys), bwd, "bilinear_sample")


def reflect_pad2d(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Reflective padding of the two spatial axes (used by padded evaluation)."""
    if x.data.ndim != 4:
        raise ContractError("reflect_pad2d expects a 4-d input")
    _, _, h, w = x.data.shape
    out = np.pad(x.data, ((0, 0), (0, 0), pad_h, pad_w), mode="reflect")

    def bwd(g):
        iy = np.pad(np.arange(h), pad_h, mode="reflect")
        ix = np.pad(np.arange(w), pad_w, mode="reflect")
        lin = (iy[:, None] * w + ix[None, :]).ravel()
        rows = g.reshape(-1, g.shape[2] * g.shape[3])
        acc = np.zeros((rows.shape[0], h * w))
        for r in range(rows.shape[0]):
            acc[r] = np.bincount(lin, weights=rows[r], minlength=h * w)
        _accum(x, acc.reshape(x.data.shape))

    return _result(out, (x,), bwd, "reflect_pad2d")
