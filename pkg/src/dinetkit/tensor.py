"""Dense tensors with reverse-mode differentiation.

Only the operations the saliency network needs are provided: dilated 2-D
convolution, relu/sigmoid, bilinear up-sampling, max pooling, channel
concatenation, elementwise sums and per-sample min-max scaling.  Each op is
available as a pure numpy kernel (``conv2d_forward`` and friends) and as a
graph-recording function on :class:`Tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


def effective_kernel_size(k: int, r: int) -> int:
    """Spatial extent of a ``k x k`` kernel dilated with rate ``r``."""
    if k < 1 or r < 1:
        raise ValueError(f"kernel size and dilation must be >= 1, got k={k}, r={r}")
    return k + (k - 1) * (r - 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    k: int = 3
    r: int = 1
    stride: int = 1
    padding: int | None = None
    bias: bool = True

    def __post_init__(self):
        if self.k < 1 or self.r < 1:
            raise ValueError(f"kernel size and dilation must be >= 1, got k={self.k}, r={self.r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.padding is None:
            # "same" padding; k_d is odd for every odd k
            object.__setattr__(self, "padding", (self.k_d - 1) // 2)
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def k_d(self) -> int:
        return effective_kernel_size(self.k, self.r)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.k, self.k)

    def weight_count(self) -> int:
        return self.out_channels * self.in_channels * self.k * self.k

    def bias_count(self) -> int:
        return self.out_channels if self.bias else 0

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.k_d) // self.stride + 1
        wo = (w + 2 * self.padding - self.k_d) // self.stride + 1
        return ho, wo


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, k, k) over a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, spec.k, spec.k),
        strides=(sn, sc, sh * spec.stride, sw * spec.stride, sh * spec.r, sw * spec.r),
        writeable=False,
    )


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects an N x C x H x W input, got shape {x.shape}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ValueError(
            f"weight shape {tuple(weights.shape)} does not match spec {spec.weight_shape}"
        )
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels but the layer expects {spec.in_channels}"
        )
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ValueError(
            f"input {x.shape[2]}x{x.shape[3]} too small for effective kernel {spec.k_d}"
        )


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
                   spec: ConvSpec) -> np.ndarray:
    """y[n, o, i, j] = sum_{c,a,b} x_pad[n, c, s*i + r*a, s*j + r*b] * w[o, c, a, b] (+ bias)."""
    _check_conv_shapes(x, weights, spec)
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if spec.k == 1:
        cols = xp[:, :, : spec.stride * (ho - 1) + 1: spec.stride, : spec.stride * (wo - 1) + 1: spec.stride]
        out = np.einsum("nchw,oc->nohw", cols, weights[:, :, 0, 0], optimize=True)
    else:
        win = _windows(xp, spec, ho, wo)
        out = np.tensordot(win, weights, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(output_grad: np.ndarray, saved_input: np.ndarray, weights: np.ndarray,
                    spec: ConvSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    _check_conv_shapes(saved_input, weights, spec)
    n, _, h, w = saved_input.shape
    ho, wo = spec.output_size(h, w)
    if output_grad.shape != (n, spec.out_channels, ho, wo):
        raise ValueError(
            f"output grad shape {output_grad.shape} inconsistent with input "
            f"{saved_input.shape} under {spec}"
        )
    p, s, r = spec.padding, spec.stride, spec.r
    xp = np.pad(saved_input, ((0, 0), (0, 0), (p, p), (p, p))) if p else saved_input
    win = _windows(xp, spec, ho, wo)
    weight_grad = np.tensordot(output_grad, win, axes=([0, 2, 3], [0, 2, 3]))
    bias_grad = output_grad.sum(axis=(0, 2, 3))

    dxp = np.zeros(xp.shape, dtype=np.result_type(output_grad, weights))
    for a in range(spec.k):
        for b in range(spec.k):
            contrib = np.einsum("nohw,oc->nchw", output_grad, weights[:, :, a, b], optimize=True)
            dxp[:, :, a * r: a * r + s * (ho - 1) + 1: s, b * r: b * r + s * (wo - 1) + 1: s] += contrib
    input_grad = dxp[:, :, p: p + h, p: p + w] if p else dxp
    return np.ascontiguousarray(input_grad), weight_grad, bias_grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of the sigmoid expressed through its output."""
    return y * (1.0 - y)


def _relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return _sigmoid(np.asarray(x, dtype=np.result_type(x, np.float32)))
    raise ValueError(f"unknown activation {kind!r}")


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear resampling matrix (n_out x n_in), half-pixel centers, edge clamping.

    Output sample ``i`` reads the input at ``(i + 0.5) * n_in / n_out - 0.5``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``x`` to ``size``."""
    mh = interpolation_matrix(x.shape[-2], size[0]).astype(x.dtype, copy=False)
    mw = interpolation_matrix(x.shape[-1], size[1]).astype(x.dtype, copy=False)
    return mh @ x @ mw.T


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return resize_bilinear(x, (x.shape[-2] * factor, x.shape[-1] * factor))


def bilinear_upsample_backward(grad: np.ndarray, in_size: tuple[int, int], factor: int) -> np.ndarray:
    if factor == 1:
        return grad
    mh = interpolation_matrix(in_size[0], in_size[0] * factor).astype(grad.dtype, copy=False)
    mw = interpolation_matrix(in_size[1], in_size[1] * factor).astype(grad.dtype, copy=False)
    return mh.T @ grad @ mw


# ---------------------------------------------------------------------------
# autograd
# ---------------------------------------------------------------------------

class Tensor:
    """An array plus an optional gradient and the recipe that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (defaults to ones) to every tensor that requires grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    xd = x.data
    out = conv2d_forward(xd, weight.data, None if bias is None else bias.data, spec)

    def backward(g):
        dx, dw, db = conv2d_backward(g, xd, weight.data, spec)
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), lambda g: (g * _relu_grad(xd),))


def sigmoid(x: Tensor) -> Tensor:
    y = activation(x.data, "sigmoid")
    return _result(y, (x,), lambda g: (g * _sigmoid_grad(y),))


def upsample(x: Tensor, factor: int) -> Tensor:
    size = x.shape[-2:]
    out = bilinear_upsample(x.data, factor)
    return _result(out, (x,), lambda g: (bilinear_upsample_backward(g, size, factor),))


def add(*xs: Tensor) -> Tensor:
    if not xs:
        raise ValueError("add needs at least one tensor")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch in add: {shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return _result(out, tuple(xs), lambda g: tuple(g for _ in xs))


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def max_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int | None = None) -> Tensor:
    if padding is None:
        padding = (k - 1) // 2
    xd = x.data
    n, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(n, c, ho, wo, k, k),
                     strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        ii = np.arange(ho)[:, None] * stride + arg // k
        jj = np.arange(wo)[None, :] * stride + arg % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dxp, (nn, cc, ii, jj), g)
        return (dxp[:, :, padding: padding + h, padding: padding + w],)

    return _result(out, (x,), backward)


def minmax_scale(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-sample affine rescaling to [0, 1] over all non-batch axes."""
    xd = x.data
    n = xd.shape[0]
    flat = xd.reshape(n, -1)
    imin, imax = flat.argmin(axis=1), flat.argmax(axis=1)
    lo = flat[np.arange(n), imin][:, None]
    hi = flat[np.arange(n), imax][:, None]
    span = hi - lo + eps
    out = ((flat - lo) / span).reshape(xd.shape)

    def backward(g):
        gf = g.reshape(n, -1)
        y = out.reshape(n, -1)
        dx = gf / span
        total = gf.sum(axis=1, keepdims=True)
        weighted = (gf * y).sum(axis=1, keepdims=True)
        dx[np.arange(n), imax] += (-weighted / span)[:, 0]
        dx[np.arange(n), imin] += ((weighted - total) / span)[:, 0]
        return (dx.reshape(xd.shape),)

    return _result(out, (x,), backward)
