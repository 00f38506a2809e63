"""Central finite-difference checks of every analytic gradient.

Relative error of a gradient is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)``, computed in 64-bit with step 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import DISTRIBUTION_KINDS, NORMALIZATIONS, RAW_KINDS, batch_loss, loss_value_and_grad
from .model import build_model
from .tensor import ConvSpec, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class UnitResult:
    unit: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.unit:<40s} worst rel err {self.error:.3e}"


def check_op(op: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error over all inputs of ``sum(op(*inputs) * R)`` for random R."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = op(*tensors)
    weight = rng.standard_normal(out.shape)
    out.backward(weight)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float((op(*[Tensor(s.data) for s in tensors]).data * weight).sum()), t.data)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def layer_units(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def conv_unit(n, c, o, h, k, r, stride, bias=True):
        spec = ConvSpec(c, o, k, r=r, stride=stride, bias=bias)
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal(spec.weight_shape)
        if bias:
            b = rng.standard_normal(o)
            return lambda: check_op(lambda x, w, b: T.conv2d(x, w, b, spec), [x, w, b], rng)
        return lambda: check_op(lambda x, w: T.conv2d(x, w, None, spec), [x, w], rng)

    def unary(fn, shape, low=-2.0, high=2.0):
        return lambda: check_op(fn, [rng.uniform(low, high, shape)], rng)

    return {
        "conv2d k3 r1": conv_unit(2, 3, 4, 8, 3, 1, 1),
        "conv2d k3 r2": conv_unit(2, 3, 4, 9, 3, 2, 1),
        "conv2d k3 r4 no-bias": conv_unit(1, 2, 3, 12, 3, 4, 1, bias=False),
        "conv2d k3 stride2": conv_unit(2, 2, 3, 8, 3, 1, 2),
        "conv2d k1 stride2": conv_unit(2, 4, 2, 8, 1, 1, 2),
        "conv2d k5": conv_unit(1, 2, 2, 7, 5, 1, 1),
        "relu": unary(T.relu, (2, 3, 5, 5)),
        "sigmoid": unary(T.sigmoid, (2, 3, 5, 5)),
        "bilinear upsample x4": unary(lambda x: T.upsample(x, 4), (2, 2, 3, 5)),
        "max pool 3x3": unary(lambda x: T.max_pool2d(x, 3, 1), (2, 2, 6, 6)),
        "min-max scale": unary(T.minmax_scale, (2, 1, 5, 5)),
        "add": lambda: check_op(lambda a, b: T.add(a, b), [rng.standard_normal((2, 3, 4, 4)),
                                                          rng.standard_normal((2, 3, 4, 4))], rng),
        "concat": lambda: check_op(lambda a, b: T.concat([a, b]), [rng.standard_normal((2, 3, 4, 4)),
                                                                  rng.standard_normal((2, 1, 4, 4))], rng),
    }


def loss_units(rng: np.random.Generator, n: int = 32) -> dict[str, Callable[[], float]]:
    units = {}
    for kind in DISTRIBUTION_KINDS + RAW_KINDS:
        modes = NORMALIZATIONS if kind in DISTRIBUTION_KINDS else ("none",)
        for mode in modes:
            def unit(kind=kind, mode=mode):
                p = rng.uniform(0.05, 0.95, n)
                if kind == "nss_loss":
                    g = (rng.random(n) < 0.2).astype(float)
                    g[0] = 1.0
                else:
                    g = rng.uniform(0.0, 1.0, n)
                _, analytic = loss_value_and_grad(p, g, kind, mode)
                num = numeric_grad(lambda: loss_value_and_grad(p, g, kind, mode)[0], p)
                return rel_error(analytic, num)
            units[f"loss {kind} ({mode})"] = unit
    return units


def end_to_end_units(rng: np.random.Generator, size: int = 16) -> dict[str, Callable[[], float]]:
    def unit(variant, loss="total_variation", norm="linear"):
        model = build_model(variant, backbone_channels=4, branch_channels=3, decoder_width=3,
                            widths=(2, 3, 4), seed=int(rng.integers(1 << 31)), dtype=np.float64)
        # zero biases leave a network this narrow mostly dead; a generic point needs live units
        for t in model.parameters().values():
            if t.data.ndim == 1:
                t.data[:] = rng.uniform(0.05, 0.2, t.data.shape)
        x = rng.uniform(0, 1, (2, 3, size, size))
        target = rng.uniform(0, 1, (2, 1, size, size))

        def f():
            return batch_loss(model(x).data, target, loss, norm)[0]

        out = model(x)
        if out.data.std() < 1e-3:
            raise RuntimeError(f"gradcheck probe for {variant} produced a flat map")
        _, g = batch_loss(out.data, target, loss, norm)
        out.backward(g)
        worst = 0.0
        for t in model.parameters().values():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            worst = max(worst, rel_error(analytic, numeric_grad(f, t.data)))
            t.grad = None
        return worst

    return {
        f"end-to-end dim_e {size}x{size} (total_variation linear)": lambda: unit("dim_e"),
        f"end-to-end baseline {size}x{size} (kld softmax)": lambda: unit("baseline", "kld", "softmax"),
    }


SCOPES = {"layers": layer_units, "losses": loss_units, "end_to_end": end_to_end_units}


def run(scope: str = "all", seed: int = 0) -> list[UnitResult]:
    scopes = list(SCOPES) if scope == "all" else [scope]
    results = []
    for name in scopes:
        if name not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {name!r}; choose from {', '.join(SCOPES)} or all")
        rng = np.random.default_rng(seed)
        for unit, fn in SCOPES[name](rng).items():
            results.append(UnitResult(unit, fn()))
    return results
