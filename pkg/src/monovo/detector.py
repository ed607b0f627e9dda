"""Grid-aligned salient keypoint detector.

Gradient magnitude of a Gaussian-smoothed image is max-pooled over a grid
of ``patch_size`` cells (matching the stride of the coarse feature map),
the per-cell maxima are thinned with greedy non-maximum suppression, weak
responses are dropped and the strongest ``top_k`` are kept.

Keypoint coordinates are 0-based integer pixel centres ``(row, col)``, so
``row // patch_size`` is exactly the pooling cell of a keypoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Rec.601 luma
_LUMA = np.array([0.299, 0.587, 0.114])

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]]) / 8.0
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class DetectorConfig:
    kernel_size: int = 5
    sigma: float = 2.0
    patch_size: int = 14
    nms_radius: int = 8
    threshold: float = 0.01
    top_k: int = 512

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("gaussian kernel size must be a positive odd integer")
        if self.sigma <= 0:
            raise ValueError("gaussian std must be positive")
        if self.patch_size < 1:
            raise ValueError("patch size must be >= 1")
        if self.nms_radius < 1:
            raise ValueError("NMS radius must be >= 1")
        if self.threshold < 0:
            raise ValueError("gradient threshold must be >= 0")
        if self.top_k < 8:
            raise ValueError("top_k must be >= 8")


@dataclass
class KeypointSet:
    """Keypoints of one image.

    ``rc`` holds ``(row, col)`` positions (``float``; integer-valued when
    produced by :func:`detect`), ``scores`` the gradient magnitudes.
    """

    rc: np.ndarray
    scores: np.ndarray
    image_shape: tuple
    ids: np.ndarray | None = None  # optional track ids (synthetic data)

    def __post_init__(self):
        self.rc = np.asarray(self.rc, dtype=float).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        self.image_shape = tuple(int(v) for v in self.image_shape[:2])
        if len(self.scores) != len(self.rc):
            raise ValueError("one score per keypoint required")
        H, W = self.image_shape
        if len(self.rc) and (self.rc.min() < 0 or self.rc[:, 0].max() > H - 1
                             or self.rc[:, 1].max() > W - 1):
            raise ValueError("keypoint outside the image")

    def __len__(self):
        return len(self.rc)

    def subset(self, idx):
        return KeypointSet(self.rc[idx], self.scores[idx], self.image_shape,
                           None if self.ids is None else self.ids[idx])

    def normalized(self):
        """Positions scaled to ``[0, 1]^2``."""
        H, W = self.image_shape
        return self.rc / np.array([max(H - 1, 1), max(W - 1, 1)], dtype=float)


def to_gray(img):
    """Validate an image and reduce it to a float ``(H, W)`` array in [0, 1].

    ``uint8`` input is scaled by 1/255; colour input (``H x W x 3``) is
    converted with Rec.601 luma weights.
    """
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(float) / 255.0
    else:
        img = img.astype(float)
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {img.shape[2]}")
        img = img @ _LUMA
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must be finite and within [0, 1]")
    return img


def gaussian_kernel(size, sigma):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def gradient_map(img, cfg: DetectorConfig = DetectorConfig()):
    """Sobel gradient magnitude of the Gaussian-smoothed image.

    Both filters use replicate ("nearest") border padding.  The Sobel
    kernels are scaled by 1/8 so a ramp rising by 1 per pixel has
    magnitude 1; the detection threshold is in intensity units per pixel.
    """
    img = to_gray(img)
    g = gaussian_kernel(cfg.kernel_size, cfg.sigma)
    smooth = ndimage.correlate1d(img, g, axis=0, mode="nearest")
    smooth = ndimage.correlate1d(smooth, g, axis=1, mode="nearest")
    gx = ndimage.correlate(smooth, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(smooth, _SOBEL_Y, mode="nearest")
    return np.hypot(gx, gy)


def grid_candidates(grad, patch_size):
    """Per-cell maximum of ``grad`` over a ``patch_size`` grid.

    Rows/columns beyond the last full cell are ignored.  Ties inside a cell
    go to the first pixel in row-major order.  Returns ``(rc, scores)``
    with one entry per cell, in row-major cell order.
    """
    H, W = grad.shape
    gh, gw = H // patch_size, W // patch_size
    if gh == 0 or gw == 0:
        raise ValueError(f"image {H}x{W} is smaller than one {patch_size}px cell")
    cells = grad[:gh * patch_size, :gw * patch_size]
    cells = cells.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3)
    cells = cells.reshape(gh, gw, patch_size * patch_size)
    arg = np.argmax(cells, axis=2)
    scores = np.take_along_axis(cells, arg[..., None], axis=2)[..., 0]
    gi, gj = np.mgrid[0:gh, 0:gw]
    rows = gi * patch_size + arg // patch_size
    cols = gj * patch_size + arg % patch_size
    rc = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return rc, scores.ravel()


def score_order(rc, scores):
    """Descending score; ties broken by ascending (row, col)."""
    return np.lexsort((rc[:, 1], rc[:, 0], -scores))


def nms(rc, scores, radius):
    """Greedy suppression; returns indices of survivors in score order.

    A point is discarded when a stronger surviving point lies within
    Chebyshev distance ``radius`` of it.
    """
    order = score_order(rc, scores)
    rc = rc[order]
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for n in range(len(order)):
        if not alive[n]:
            continue
        keep.append(order[n])
        close = np.abs(rc[n + 1:] - rc[n]).max(axis=1) <= radius
        alive[n + 1:] &= ~close
    return np.array(keep, dtype=int)


def detect(img, cfg: DetectorConfig = DetectorConfig()) -> KeypointSet:
    img = to_gray(img)
    H, W = img.shape
    if H < cfg.patch_size or W < cfg.patch_size:
        raise ValueError(f"image {H}x{W} is smaller than one {cfg.patch_size}px cell")
    grad = gradient_map(img, cfg)
    rc, scores = grid_candidates(grad, cfg.patch_size)
    keep = nms(rc, scores, cfg.nms_radius)
    keep = keep[scores[keep] >= cfg.threshold][:cfg.top_k]
    return KeypointSet(rc[keep].astype(float), scores[keep], (H, W))
