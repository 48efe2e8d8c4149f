"""Dense tensors with reverse-mode differentiation.

Every op builds a node on the fly (define-by-run); ``Tensor.backward`` walks
the resulting graph in reverse topological order and accumulates gradients.
Conv, pooling and upsampling kernels are vectorised numpy; gradients of a
tensor consumed by several nodes are summed, which is what the distributed
dense wiring relies on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- graph -----------------------------------------------------------

    def backward(self, grad=None):
        """Populate ``.grad`` of every leaf reachable from this node.

        Leaf gradients accumulate across calls; clear them with ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each appearing after all its inputs."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise & reductions -----------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "pow")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing; advanced indexing is not supported."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    return getitem(a, (slice(None), slice(start, stop)))


# -- activations ---------------------------------------------------------------


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)

    def backward(g):
        return (g * slope,)

    return _make(x.data * slope, (x,), backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y.astype(x.dtype, copy=False), (x,), backward, "sigmoid")


# -- shape ops -----------------------------------------------------------------


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1 in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat_channels: spatial/batch mismatch {ref} vs {t.shape}"
            )
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _make(np.concatenate([t.data for t in inputs], axis=1), inputs, backward, "concat")


def _check_5d(x: Tensor, name: str):
    if x.data.ndim != 5:
        raise ValueError(f"{name} expects [N,C,D,H,W], got shape {x.shape}")


def _window_view(x: np.ndarray, k: int) -> np.ndarray:
    n, c, d, h, w = x.shape
    v = x.reshape(n, c, d // k, k, h // k, k, w // k, k)
    return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // k, h // k, w // k, k**3)


def _window_unview(v: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    n, c, d, h, w = shape
    v = v.reshape(n, c, d // k, h // k, w // k, k, k, k)
    return v.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(shape)


def _check_pool(x: Tensor, kernel: int, stride: int, name: str):
    _check_5d(x, name)
    if kernel != stride:
        raise ValueError(f"{name}: only non-overlapping windows (kernel == stride) are supported")
    if any(s % kernel for s in x.shape[2:]):
        raise ValueError(f"{name}: spatial extents {x.shape[2:]} not divisible by {kernel}")


def max_pool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Windowed max; ties send the gradient to the first voxel in row-major order."""
    _check_pool(x, kernel, stride, "max_pool3d")
    win = _window_view(x.data, kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (_window_unview(gw, x.shape, kernel),)

    return _make(out, (x,), backward, "max_pool3d")


def avg_pool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    _check_pool(x, kernel, stride, "avg_pool3d")
    k3 = kernel**3
    out = _window_view(x.data, kernel).mean(axis=-1)

    def backward(g):
        gw = np.broadcast_to((g / k3)[..., None], out.shape + (k3,))
        return (_window_unview(np.ascontiguousarray(gw), x.shape, kernel),)

    return _make(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool3d")


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    _check_5d(x, "upsample_nearest3d")
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    n, c, d, h, w = x.shape
    f = factor
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f)
    ).reshape(n, c, d * f, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), backward, "upsample")


# -- convolution -------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, ks, stride: int, dilation: int, out_sp) -> np.ndarray:
    """Gather [N, C*K, P] columns; row order is (channel, kd, kh, kw)."""
    n, c = xp.shape[:2]
    od, oh, ow = out_sp
    kd, kh, kw = ks
    cols = np.empty((n, c, kd * kh * kw, od, oh, ow), dtype=xp.dtype)
    span = (stride * (od - 1) + 1, stride * (oh - 1) + 1, stride * (ow - 1) + 1)
    i = 0
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                z0, y0, x0 = a * dilation, b * dilation, e * dilation
                cols[:, :, i] = xp[
                    :,
                    :,
                    z0 : z0 + span[0] : stride,
                    y0 : y0 + span[1] : stride,
                    x0 : x0 + span[2] : stride,
                ]
                i += 1
    return cols.reshape(n, c * kd * kh * kw, od * oh * ow)


def _conv_forward(xp: np.ndarray, weight: np.ndarray, stride: int, dilation: int, out_sp):
    cols = _im2col(xp, weight.shape[2:], stride, dilation, out_sp)
    out = np.matmul(weight.reshape(weight.shape[0], -1), cols)
    return out.reshape((xp.shape[0], weight.shape[0]) + tuple(out_sp)), cols


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """3D cross-correlation (no kernel flip) via im2col + GEMM."""
    _check_5d(x, "conv3d")
    if weight.data.ndim != 5:
        raise ValueError(f"conv3d weight must be [Cout,Cin,kd,kh,kw], got {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, wcin, kd, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv3d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})"
        )
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv3d: stride and dilation must be >= 1, padding >= 0")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    ks = (kd, kh, kw)
    out_sp = tuple(conv_output_size(s, k, stride, padding, dilation) for s, k in zip((d, h, w), ks))
    if min(out_sp) <= 0:
        raise ValueError(f"conv3d: non-positive output extent {out_sp} for input {x.shape}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    out, cols = _conv_forward(xp, weight.data, stride, dilation, out_sp)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        gm = g.reshape(n, cout, -1)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = sum(gm[i] @ cols[i].T for i in range(n)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            gx = _conv_input_grad(g, weight.data, x.shape, xp.shape, stride, padding, dilation)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv3d")


def _conv_input_grad(g, weight, x_shape, xp_shape, stride, padding, dilation):
    n, cin = x_shape[:2]
    cout = weight.shape[0]
    ks = weight.shape[2:]
    out_sp = g.shape[2:]
    if stride == 1:
        # transposed conv: correlate the padded upstream grad with the flipped kernel
        wt = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        q = [dilation * (k - 1) - padding for k in ks]
        pad = [(max(v, 0), max(v, 0)) for v in q]
        gp = np.pad(g, [(0, 0), (0, 0)] + pad) if any(v > 0 for v in q) else g
        full_sp = tuple(gp.shape[2 + i] - dilation * (ks[i] - 1) for i in range(3))
        gx, _ = _conv_forward(gp, wt, 1, dilation, full_sp)
        crop = [max(-v, 0) for v in q]
        if any(crop):
            gx = gx[
                :,
                :,
                crop[0] : crop[0] + x_shape[2],
                crop[1] : crop[1] + x_shape[3],
                crop[2] : crop[2] + x_shape[4],
            ]
        return np.ascontiguousarray(gx)
    kd, kh, kw = ks
    od, oh, ow = out_sp
    wmat = weight.reshape(cout, -1)
    gcols = np.matmul(wmat.T, g.reshape(n, cout, -1)).reshape(n, cin, kd * kh * kw, od, oh, ow)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    span = (stride * (od - 1) + 1, stride * (oh - 1) + 1, stride * (ow - 1) + 1)
    i = 0
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                z0, y0, x0 = a * dilation, b * dilation, e * dilation
                gxp[
                    :,
                    :,
                    z0 : z0 + span[0] : stride,
                    y0 : y0 + span[1] : stride,
                    x0 : x0 + span[2] : stride,
                ] += gcols[:, :, i]
                i += 1
    p = padding
    if p:
        gxp = gxp[:, :, p : p + x_shape[2], p : p + x_shape[3], p : p + x_shape[4]]
    return np.ascontiguousarray(gxp)


# -- batch normalisation -------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of one BN layer. Fresh state is mean 0, var 1."""

    num_channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    dtype: type = np.float32
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_channels, dtype=self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.num_channels, dtype=self.dtype)


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = True,
) -> Tensor:
    """Per-channel normalisation over (N, D, H, W).

    Training mode uses batch statistics and updates ``state`` (running variance
    is stored unbiased); eval mode reads ``state`` only.
    """
    _check_5d(x, "batch_norm3d")
    c = x.shape[1]
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    m = x.data.size // c
    if training:
        if m < 2:
            raise ValueError("batch_norm3d in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * (m / (m - 1))).astype(
            state.running_var.dtype
        )
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "batch_norm3d")


# -- finite-difference checker -------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: list[int]

    def __float__(self):
        return self.max_rel_error


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``f`` at ``point`` to central differences.

    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``. A coordinate
    whose one-sided slopes disagree is re-probed with ``h / 10``; if the asymmetry
    does not shrink accordingly there is a kink (pool tie, activation corner)
    within the step and the coordinate is reported in ``skipped``.
    """
    if not point.requires_grad:
        raise ValueError("grad_check point must require grad")
    point.grad = None
    out = f(point)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad
    analytic = analytic.reshape(-1).astype(np.float64)

    flat = point.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))

    def value() -> float:
        with no_grad():
            return float(f(point).data.reshape(-1)[0])

    def probe(i: int, step: float) -> tuple[float, float]:
        orig = flat[i]
        flat[i] = orig + step
        fp = value()
        flat[i] = orig - step
        fm = value()
        flat[i] = orig
        central = (fp - fm) / (2 * step)
        asym = abs((fp - f0) / step - (f0 - fm) / step)
        return central, asym

    f0 = value()
    worst = 0.0
    skipped: list[int] = []
    for i in coords:
        a = analytic[i]
        num, asym = probe(i, h)
        scale = max(1.0, abs(a), abs(num))
        if asym > 2 * tol * scale:
            num2, asym2 = probe(i, h / 10)
            if asym2 > 0.2 * asym:
                skipped.append(int(i))
                continue
            num = num2
            scale = max(1.0, abs(a), abs(num))
        worst = max(worst, abs(a - num) / scale)
    return GradCheckResult(worst, len(coords) - len(skipped), skipped)
