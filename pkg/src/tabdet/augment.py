"""Weak and strong views with an invertible record of their geometry.

A view is produced by an optional horizontal flip followed by a crop window
(normalized coordinates of the flipped page) resampled back to the input
size; the scale factor is the zoom that resampling implies.  Photometric
operations (patch erasing, blur) act on pixels only and never enter the
:class:`ViewTransform`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

IDENTITY_CROP = (0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ViewTransform:
    flip: bool = False
    scale: tuple[float, float] = (1.0, 1.0)
    crop: tuple[float, float, float, float] = IDENTITY_CROP  # x0, y0, x1, y1

    def apply(self, boxes) -> np.ndarray:
        """Map ``(n, 4)`` cx, cy, w, h boxes from the page into the view (no clipping)."""
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        if self.flip:
            b[:, 0] = 1.0 - b[:, 0]
        x0, y0, x1, y1 = self.crop
        b[:, 0] = (b[:, 0] - x0) / (x1 - x0)
        b[:, 1] = (b[:, 1] - y0) / (y1 - y0)
        b[:, 2] = b[:, 2] / (x1 - x0)
        b[:, 3] = b[:, 3] / (y1 - y0)
        return b

    def invert(self, boxes) -> np.ndarray:
        """Map view boxes back to page coordinates."""
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        x0, y0, x1, y1 = self.crop
        b[:, 0] = b[:, 0] * (x1 - x0) + x0
        b[:, 1] = b[:, 1] * (y1 - y0) + y0
        b[:, 2] = b[:, 2] * (x1 - x0)
        b[:, 3] = b[:, 3] * (y1 - y0)
        if self.flip:
            b[:, 0] = 1.0 - b[:, 0]
        return b

    def to_view(self, boxes, min_visible: float = 0.5) -> np.ndarray:
        """Map boxes into the view, clip them to it and drop mostly-hidden ones."""
        b = self.apply(boxes)
        if len(b) == 0:
            return b
        lo = np.clip(b[:, :2] - b[:, 2:] / 2, 0.0, 1.0)
        hi = np.clip(b[:, :2] + b[:, 2:] / 2, 0.0, 1.0)
        wh = hi - lo
        area = b[:, 2] * b[:, 3]
        vis = np.where(area > 0, wh[:, 0] * wh[:, 1] / np.maximum(area, 1e-300), 0.0)
        keep = (vis >= min_visible) & (wh > 1e-3).all(axis=1)
        return np.concatenate([(lo + hi) / 2, wh], axis=1)[keep]

    def render(self, image: np.ndarray) -> np.ndarray:
        """Resample ``image`` into this view at the same pixel size."""
        img = image[:, ::-1] if self.flip else image
        if self.crop == IDENTITY_CROP:
            return np.ascontiguousarray(img)
        H, W = img.shape
        x0, y0, x1, y1 = self.crop
        xs = (x0 + (np.arange(W) + 0.5) / W * (x1 - x0)) * W - 0.5
        ys = (y0 + (np.arange(H) + 0.5) / H * (y1 - y0)) * H - 0.5
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


@dataclass(frozen=True)
class StrongConfig:
    flip_p: float = 0.5
    scale_range: tuple[float, float] = (1.0, 1.5)
    crop_tries: int = 20
    erase_p: float = 0.5
    erase_max: int = 2
    erase_size: tuple[float, float] = (0.05, 0.15)
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.3, 1.0)


def weak_augment(image: np.ndarray, boxes=None, rng: np.random.Generator | None = None):
    """Horizontal flip with probability 0.5; returns (view, boxes', transform)."""
    rng = rng if rng is not None else np.random.default_rng()
    t = ViewTransform(flip=bool(rng.random() < 0.5))
    out_boxes = None if boxes is None else t.apply(boxes)
    return t.render(image), out_boxes, t


def _random_crop(rng: np.random.Generator, s: float, boxes, tries: int, flip: bool) -> ViewTransform:
    side = 1.0 / s
    for _ in range(tries):
        x0 = float(rng.uniform(0.0, 1.0 - side))
        y0 = float(rng.uniform(0.0, 1.0 - side))
        t = ViewTransform(flip, (s, s), (x0, y0, x0 + side, y0 + side))
        if boxes is None or len(boxes) == 0 or len(t.to_view(boxes)) > 0:
            return t
    return ViewTransform(flip)


def photometric(image: np.ndarray, rng: np.random.Generator, cfg: StrongConfig = StrongConfig()) -> np.ndarray:
    """Patch erasing and Gaussian blur; grayscale conversion is a no-op here."""
    img = image.copy()
    H, W = img.shape
    if rng.random() < cfg.erase_p:
        for _ in range(int(rng.integers(1, cfg.erase_max + 1))):
            h = max(1, int(rng.uniform(*cfg.erase_size) * H))
            w = max(1, int(rng.uniform(*cfg.erase_size) * W))
            y = int(rng.integers(0, H - h + 1))
            x = int(rng.integers(0, W - w + 1))
            img[y:y + h, x:x + w] = float(np.median(image))
    if rng.random() < cfg.blur_p:
        img = ndimage.gaussian_filter(img, float(rng.uniform(*cfg.blur_sigma)), mode="nearest")
    return img


def strong_augment(image: np.ndarray, boxes=None, rng: np.random.Generator | None = None,
                   cfg: StrongConfig = StrongConfig()):
    """Flip, scale jitter with a same-size crop keeping a table, then photometric noise.

    Returned boxes are clipped to the view; tables less than half visible are
    dropped.
    """
    rng = rng if rng is not None else np.random.default_rng()
    flip = bool(rng.random() < cfg.flip_p)
    s = float(rng.uniform(*cfg.scale_range))
    t = _random_crop(rng, s, boxes, cfg.crop_tries, flip) if s > 1.0 else ViewTransform(flip)
    view = photometric(t.render(image), rng, cfg)
    out_boxes = None if boxes is None else t.to_view(boxes)
    return view, out_boxes, t


@dataclass
class PseudoLabelSet:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # page coordinates
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source: ViewTransform = field(default_factory=ViewTransform)

    def __len__(self) -> int:
        return len(self.scores)
