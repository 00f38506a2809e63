"""Probability-distribution losses for saliency maps.

Predicted and ground-truth maps are flattened, optionally normalized into
distributions (``softmax`` or ``linear``), and compared with a statistical
distance.  Every loss has a closed-form gradient w.r.t. the raw prediction
that includes the normalization Jacobian.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

EPS = 1e-8

NORMALIZATIONS = ("none", "softmax", "linear")
DISTRIBUTION_KINDS = ("total_variation", "bhattacharyya", "kld", "chi_square", "cosine")
RAW_KINDS = ("bce", "euclidean", "nss_loss")
LOSS_KINDS = DISTRIBUTION_KINDS + RAW_KINDS


class DegenerateInputWarning(UserWarning):
    pass


def normalize(x: np.ndarray, mode: str) -> np.ndarray:
    """Map a nonnegative array to a distribution.

    softmax: exp(x_i) / sum_j exp(x_j);  linear: x_i / sum_j x_j.
    An all-zero input under linear mode falls back to the uniform distribution.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "none":
        return x
    if mode == "softmax":
        e = np.exp(x - x.max())
        return e / e.sum()
    if mode == "linear":
        if np.any(x < 0):
            raise ValueError("linear normalization needs nonnegative inputs")
        s = x.sum()
        if s == 0:
            warnings.warn("all-zero map normalized to the uniform distribution", DegenerateInputWarning)
            return np.full_like(x, 1.0 / x.size)
        return x / s
    raise ValueError(f"unknown normalization {mode!r}; choose from {NORMALIZATIONS}")


def _normalize_backward(grad_p: np.ndarray, x: np.ndarray, p: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return grad_p
    if mode == "softmax":
        return p * (grad_p - np.dot(grad_p, p))
    s = x.sum()
    if s == 0:
        return np.zeros_like(grad_p)
    return (grad_p - np.dot(grad_p, p)) / s


@dataclass(frozen=True)
class NormRangeBounds:
    a: float
    b: float


def norm_range_bounds(x: np.ndarray, mode: str) -> NormRangeBounds:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot bound an empty array")
    p = normalize(x, mode)
    return NormRangeBounds(float(p.min()), float(p.max()))


# distance kernels: each returns (value, d value / d p)

def _total_variation(p, g):
    # L = sum |p_i - g_i|; subgradient 0 at ties
    d = p - g
    return np.abs(d).sum(), np.sign(d)


def _bhattacharyya(p, g):
    # L = -ln sum sqrt(p_i g_i), floored inside the root and the log
    root = np.sqrt(p * g + EPS ** 2)
    bc = root.sum()
    return -np.log(bc + EPS), -(g / (2 * root)) / (bc + EPS)


def _kld(p, g):
    # L = sum g_i ln((g_i + eps) / (p_i + eps))  (ground truth first)
    val = (g * (np.log(g + EPS) - np.log(p + EPS))).sum()
    return val, -g / (p + EPS)


def _chi_square(p, g):
    # L = sum (p_i - g_i)^2 / (p_i + g_i + eps)
    d = p - g
    s = p + g + EPS
    return (d * d / s).sum(), (2 * d * s - d * d) / (s * s)


def _cosine(p, g):
    # L = 1 - <p, g> / (|p| |g|)
    np_, ng = np.linalg.norm(p), np.linalg.norm(g)
    denom = max(np_ * ng, EPS)
    dot = np.dot(p, g)
    val = 1.0 - dot / denom
    grad = -(g * denom - dot * ng * p / max(np_, EPS)) / denom ** 2
    return val, grad


def _bce(p, g):
    # mean binary cross entropy on raw values in (0, 1)
    n = p.size
    val = -(g * np.log(p + EPS) + (1 - g) * np.log(1 - p + EPS)).mean()
    grad = -(g / (p + EPS) - (1 - g) / (1 - p + EPS)) / n
    return val, grad


def _euclidean(p, g):
    # L = ||p - g||_2
    d = p - g
    n = np.linalg.norm(d)
    return n, d / max(n, EPS)


def nss_value_and_grad(p: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray]:
    """NSS of ``p`` at the fixations of ``q`` and its gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=np.float64).ravel()
    fix = np.asarray(q).ravel() > 0
    k = int(fix.sum())
    if k == 0:
        raise ValueError("NSS needs at least one fixation")
    n = p.size
    mu = p.mean()
    sigma = p.std()
    if sigma == 0:
        return 0.0, np.zeros_like(p)
    z = (p - mu) / sigma
    val = z[fix].mean()
    grad = (fix / k - 1.0 / n) / sigma - val * z / (n * sigma)
    return float(val), grad


def _nss_loss(p, q):
    val, grad = nss_value_and_grad(p, q)
    return -val, -grad


_KERNELS = {
    "total_variation": _total_variation,
    "bhattacharyya": _bhattacharyya,
    "kld": _kld,
    "chi_square": _chi_square,
    "cosine": _cosine,
    "bce": _bce,
    "euclidean": _euclidean,
    "nss_loss": _nss_loss,
}


def _check(p_raw, g_raw, kind, mode):
    if kind not in _KERNELS:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}; choose from {NORMALIZATIONS}")
    if kind in RAW_KINDS and mode != "none":
        raise ValueError(f"{kind} operates on unnormalized maps; use mode 'none'")
    p = np.asarray(p_raw, dtype=np.float64).ravel()
    g = np.asarray(g_raw, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"prediction has {p.size} elements, ground truth {g.size}")
    return p, g


def loss_value_and_grad(p_raw, g_raw, kind: str, mode: str = "none") -> tuple[float, np.ndarray]:
    p_raw, g_raw = _check(p_raw, g_raw, kind, mode)
    if kind == "nss_loss":
        val, grad = _nss_loss(p_raw, g_raw)
        return float(val), grad
    p = normalize(p_raw, mode)
    g = normalize(g_raw, mode)
    val, grad_p = _KERNELS[kind](p, g)
    return float(val), _normalize_backward(grad_p, p_raw, p, mode)


def loss_value(p_raw, g_raw, kind: str, mode: str = "none") -> float:
    return loss_value_and_grad(p_raw, g_raw, kind, mode)[0]


def loss_grad(p_raw, g_raw, kind: str, mode: str = "none") -> np.ndarray:
    return loss_value_and_grad(p_raw, g_raw, kind, mode)[1]


def nss_loss(p, q) -> float:
    return -nss_value_and_grad(p, q)[0]


def batch_loss(pred: np.ndarray, target: np.ndarray, kind: str, mode: str) -> tuple[float, np.ndarray]:
    """Mean per-map loss over a batch of N x 1 x H x W maps and its gradient."""
    n = pred.shape[0]
    grad = np.empty(pred.shape, dtype=np.float64)
    total = 0.0
    for i in range(n):
        v, g = loss_value_and_grad(pred[i], target[i], kind, mode)
        total += v
        grad[i] = g.reshape(pred.shape[1:])
    return total / n, grad / n
