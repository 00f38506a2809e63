"""Saliency evaluation metrics: NSS, CC, AUC and shuffled AUC."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass

import numpy as np

CSV_HEADER = ("image", "cc", "sauc", "auc", "nss")


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def nss(p, q) -> float:
    """Mean of the standardized map (population std) at fixated pixels; 0 for flat maps."""
    p, q = _pair(p, q, "nss")
    fix = q > 0
    if not fix.any():
        raise ValueError("nss: fixation map has no fixations")
    sigma = p.std()
    if sigma == 0:
        return 0.0
    return float(((p[fix] - p.mean()) / sigma).mean())


def cc(p, g) -> float:
    """Pearson correlation between prediction and ground-truth density."""
    p, g = _pair(p, g, "cc")
    g = g.astype(np.float64)
    sp, sg = p.std(), g.std()
    if sp == 0:
        raise ValueError("cc: predicted map is constant")
    if sg == 0:
        raise ValueError("cc: ground-truth map is constant")
    cov = ((p - p.mean()) * (g - g.mean())).mean()
    return float(np.clip(cov / (sp * sg), -1.0, 1.0))


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """Area under the ROC curve swept over every distinct score.

    Trapezoidal integration over all thresholds gives half credit to tied
    (positive, negative) pairs.  The area is accumulated in integer pair
    counts, so any transform that preserves the order of scores leaves the
    result bit-identical.
    """
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative sample")
    values, inverse = np.unique(np.concatenate([pos, neg]), return_inverse=True)
    n_pos = np.bincount(inverse[: pos.size], minlength=values.size)[::-1]
    n_neg = np.bincount(inverse[pos.size:], minlength=values.size)[::-1]
    # thresholds from high to low: tp/fp counts before and after each step
    tp_after = np.cumsum(n_pos)
    tp_before = tp_after - n_pos
    twice_area = int(np.sum(n_neg * (tp_before + tp_after)))
    return twice_area / (2 * pos.size * neg.size)


def auc(p, q) -> float:
    p, q = _pair(p, q, "auc")
    fix = q > 0
    if not fix.any():
        raise ValueError("auc: fixation map has no fixations")
    if fix.all():
        raise ValueError("auc: every pixel is fixated, no negatives")
    return auc_from_scores(p[fix], p[~fix])


def shuffled_negatives(q, shuffle_pool, n: int, rng: np.random.Generator) -> np.ndarray:
    """Flat indices of ``n`` negatives drawn from other maps' fixations.

    Locations fixated in ``q`` itself are excluded.  Draws without
    replacement when the pool is large enough, otherwise with replacement.
    """
    q = np.asarray(q)
    if not shuffle_pool:
        raise ValueError("sauc: shuffle pool is empty")
    own = q.ravel() > 0
    cand = []
    for m in shuffle_pool:
        m = np.asarray(m)
        if m.shape != q.shape:
            raise ValueError(f"sauc: pool map shape {m.shape} != {q.shape}")
        idx = np.flatnonzero(m.ravel() > 0)
        cand.append(idx[~own[idx]])
    cand = np.concatenate(cand) if cand else np.empty(0, dtype=int)
    if cand.size == 0:
        raise ValueError("sauc: no negatives left after excluding the image's own fixations")
    return rng.choice(cand, size=n, replace=cand.size < n)


def sauc(p, q, shuffle_pool, n_splits: int = 100, rng_seed: int = 0) -> float:
    """AUC with negatives sampled from other images' fixation locations."""
    p, q = _pair(p, q, "sauc")
    fix = q.ravel() > 0
    if not fix.any():
        raise ValueError("sauc: fixation map has no fixations")
    pos = p.ravel()[fix]
    rng = np.random.default_rng(rng_seed)
    scores = []
    for _ in range(n_splits):
        neg_idx = shuffled_negatives(q, shuffle_pool, pos.size, rng)
        scores.append(auc_from_scores(pos, p.ravel()[neg_idx]))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    cc: float
    sauc: float
    auc: float
    nss: float


def evaluate(p, g, q, pool, n_splits: int = 100, rng_seed: int = 0) -> MetricReport:
    return MetricReport(
        cc=cc(p, g),
        sauc=sauc(p, q, pool, n_splits, rng_seed),
        auc=auc(p, q),
        nss=nss(p, q),
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    arr = np.array([astuple(r) for r in reports])
    return MetricReport(*map(float, arr.mean(axis=0)))


def write_reports(stream, rows: list[tuple[str, MetricReport]]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for image, rep in rows:
        w.writerow([image] + [f"{getattr(rep, name):.6f}" for name in CSV_HEADER[1:]])


def read_reports(stream) -> list[tuple[str, MetricReport]]:
    r = csv.reader(stream)
    header = next(r)
    if tuple(header) != CSV_HEADER:
        raise ValueError(f"unexpected metric CSV header {header}")
    out = []
    for row in r:
        if not row:
            continue
        out.append((row[0], MetricReport(cc=float(row[1]), sauc=float(row[2]),
                                         auc=float(row[3]), nss=float(row[4]))))
    return out


def reports_to_text(rows: list[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    write_reports(buf, rows)
    return buf.getvalue()
