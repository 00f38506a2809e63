"""Samples, aspect-preserving resize, synthetic fixation data and dataset folders.

Dataset directory layout::

    <root>/images/<id>.png      RGB or gray stimulus
    <root>/maps/<id>.png        8-bit ground-truth density map
    <root>/fixations/<id>.png   binary fixation map (nonzero = fixated)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import load_image, save_image
from .tensor import resize_bilinear


class DataError(Exception):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    density: np.ndarray  # H x W, max 1
    fixations: np.ndarray  # H x W, uint8 0/1
    id: str
    n_fixations_raw: int = 0

    def __post_init__(self):
        if not (self.image.shape[1:] == self.density.shape == self.fixations.shape):
            raise DataError(
                f"sample {self.id}: image {self.image.shape[1:]}, density {self.density.shape} "
                f"and fixations {self.fixations.shape} disagree"
            )


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)
    n_blobs: tuple[int, int] = (1, 3)
    blob_sigma: float = 4.0
    fixations_per_blob: int = 20
    center_bias_weight: float = 0.3
    blur_sigma: float | None = None
    popout: bool = False
    distractor_fixation_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} must be divisible by 8")
        lo, hi = self.n_blobs
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid blob count range {self.n_blobs}")
        if not 0.0 <= self.center_bias_weight <= 1.0:
            raise ValueError("center_bias_weight must lie in [0, 1]")
        if self.blob_sigma <= 0 or self.fixations_per_blob < 1:
            raise ValueError("blob_sigma and fixations_per_blob must be positive")

    @property
    def density_sigma(self) -> float:
        # about one visual degree at typical viewing distance
        return self.blur_sigma if self.blur_sigma is not None else self.image_size[1] / 32


def resize_pad(image: np.ndarray, target: tuple[int, int], return_box: bool = False):
    """Scale C x H x W content by the largest factor that fits ``target``,
    center it and zero-fill the rest.

    With ``return_box`` also returns ``(top, left, height, width)`` of the content.
    """
    c, h, w = image.shape
    if h == 0 or w == 0:
        raise DataError("cannot resize an image with zero area")
    th, tw = target
    s = min(th / h, tw / w)
    nh, nw = max(1, min(th, round(h * s))), max(1, min(tw, round(w * s)))
    content = image if (nh, nw) == (h, w) else resize_bilinear(image, (nh, nw))
    top, left = (th - nh) // 2, (tw - nw) // 2
    out = np.zeros((c, th, tw), dtype=image.dtype)
    out[:, top: top + nh, left: left + nw] = content
    return (out, (top, left, nh, nw)) if return_box else out


def crop_restore(padded: np.ndarray, box: tuple[int, int, int, int], size: tuple[int, int]) -> np.ndarray:
    """Invert :func:`resize_pad`: cut out the content box and resize to ``size``."""
    top, left, nh, nw = box
    content = padded[..., top: top + nh, left: left + nw]
    return content if (nh, nw) == tuple(size) else resize_bilinear(content, size)


def _blob_centers(rng, cfg: SynthConfig, n: int) -> np.ndarray:
    h, w = cfg.image_size
    centers = np.empty((n, 2))
    for i in range(n):
        if rng.random() < cfg.center_bias_weight:
            c = rng.normal([(h - 1) / 2, (w - 1) / 2], [0.1 * h, 0.1 * w])
        else:
            c = rng.uniform([0.15 * h, 0.15 * w], [0.85 * h, 0.85 * w])
        centers[i] = np.clip(c, 0, [h - 1, w - 1])
    return centers


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w]

    # low-contrast textured background
    image = 0.15 + 0.1 * gaussian_filter(rng.random((3, h, w)), sigma=(0, 1.5, 1.5))
    n = int(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    centers = _blob_centers(rng, cfg, n)
    fix = np.zeros((h, w), dtype=np.uint8)
    raw = 0
    if cfg.popout:
        # one target whose color differs from the shared distractor color
        hues = rng.permutation(3)
        target_color, distractor_color = np.full(3, 0.25), np.full(3, 0.25)
        target_color[hues[0]] = 1.0
        distractor_color[hues[1]] = 1.0
    for i, (cy, cx) in enumerate(centers):
        n_fix = cfg.fixations_per_blob
        if cfg.popout:
            color = target_color if i == 0 else distractor_color
            if i:
                n_fix = max(1, round(n_fix * cfg.distractor_fixation_ratio))
        else:
            color = rng.uniform(0.5, 1.0, size=3)
            color[rng.integers(3)] *= 0.3
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.blob_sigma ** 2))
        image += 0.8 * color[:, None, None] * bump
        pts = rng.normal([cy, cx], cfg.blob_sigma, size=(n_fix, 2))
        pts = np.clip(np.round(pts), 0, [h - 1, w - 1]).astype(int)
        fix[pts[:, 0], pts[:, 1]] = 1
        raw += len(pts)
    image = np.clip(image, 0.0, 1.0)
    density = gaussian_filter(fix.astype(np.float64), cfg.density_sigma, mode="constant")
    density /= density.max()
    return Sample(image, density, fix, f"synth_{cfg.seed}_{index:05d}", raw)


def generate_synthetic(config: SynthConfig, n_samples: int) -> list[Sample]:
    """Deterministic synthetic stimuli with blob-clustered fixations."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    return [synth_sample(config, i) for i in range(n_samples)]


def write_dataset(samples: list[Sample], root) -> Path:
    root = Path(root)
    for sub in ("images", "maps", "fixations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(root / "images" / f"{s.id}.png", s.image)
        save_image(root / "maps" / f"{s.id}.png", s.density)
        save_image(root / "fixations" / f"{s.id}.png", s.fixations.astype(np.float64))
    return root


def dataset_ids(root) -> list[str]:
    images = Path(root) / "images"
    if not images.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    return sorted(p.stem for p in images.iterdir() if p.suffix.lower() in (".png", ".pgm", ".ppm"))


def _find(root: Path, sub: str, sid: str) -> Path:
    for ext in (".png", ".pgm", ".ppm"):
        p = root / sub / f"{sid}{ext}"
        if p.exists():
            return p
    raise DataError(f"{sid}: no file in {sub}/")


def load_rgb(path) -> np.ndarray:
    img = load_image(path)
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


def load_sample(root, sid: str) -> Sample:
    root = Path(root)
    image = load_rgb(_find(root, "images", sid))
    density = load_image(_find(root, "maps", sid))[0]
    fix = (load_image(_find(root, "fixations", sid))[0] > 0).astype(np.uint8)
    if density.max() <= 0:
        raise DataError(f"{sid}: density map is all zero")
    return Sample(image, density, fix, sid, int(fix.sum()))


def load_dataset(root) -> list[Sample]:
    return [load_sample(root, sid) for sid in dataset_ids(root)]


def stack(samples: list[Sample], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype)
    dens = np.stack([s.density for s in samples])[:, None].astype(np.float64)
    fix = np.stack([s.fixations for s in samples])[:, None]
    return images, dens, fix
