"""Dense feature maps, keypoint queries and coarse/fine descriptor fusion.

Two dense maps describe an image: a coarse map with one cell per
``patch_size`` x ``patch_size`` block (the stride of a ViT patch grid) and a
fine map with one cell per pixel.  A keypoint's descriptor is a linear
projection of its coarse cell feature concatenated with its fine pixel
feature.

Feature maps come from a provider.  ``classical_provider`` computes
hand-crafted statistics so everything runs without network weights;
``file_provider`` loads precomputed maps (e.g. exported from a foundation
model and a fine CNN) stored as FMAP files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .detector import KeypointSet, to_gray
from .fmap import read_fmap, write_fmap

COARSE_STRIDE = 14
FINE_STRIDE = 1
COARSE_DIM = 384
FINE_DIM = 64
DESC_DIM = 192


@dataclass(frozen=True)
class DenseFeatureMap:
    values: np.ndarray  # (grid_h, grid_w, C)
    stride: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"feature map must be (h, w, C), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        if self.stride not in (COARSE_STRIDE, FINE_STRIDE):
            raise ValueError(f"unsupported stride {self.stride}")
        object.__setattr__(self, "values", v)

    @property
    def grid_shape(self):
        return self.values.shape[:2]

    @property
    def channels(self):
        return self.values.shape[2]

    def check_image(self, image_shape):
        H, W = image_shape
        expect = (H // self.stride, W // self.stride)
        if self.grid_shape != expect:
            raise ValueError(f"stride-{self.stride} map of grid {self.grid_shape} does not fit "
                             f"a {H}x{W} image (expected {expect})")


@dataclass
class DescriptorSet:
    descriptors: np.ndarray  # (K, D)
    positions: np.ndarray    # (K, 2) normalized (row, col) in [0, 1]

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(self.descriptors) != len(self.positions):
            raise ValueError("descriptor count must equal keypoint count")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")

    def __len__(self):
        return len(self.descriptors)

    @property
    def dim(self):
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class FusionWeights:
    weight: np.ndarray  # (192, 448)
    bias: np.ndarray    # (192,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=float)
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if w.shape != (DESC_DIM, COARSE_DIM + FINE_DIM) or b.shape != (DESC_DIM,):
            raise ValueError(f"fusion weights must be {(DESC_DIM, COARSE_DIM + FINE_DIM)} "
                             f"+ bias {DESC_DIM}, got {w.shape} + {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("fusion weights must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def random(cls, seed=0):
        """Rows are orthonormal; bias is zero."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((COARSE_DIM + FINE_DIM, DESC_DIM)))
        return cls(q.T, np.zeros(DESC_DIM))

    @classmethod
    def load(cls, path):
        """Weight file: FMAP with H=192, W=449, C=1 (matrix, then bias column)."""
        a = read_fmap(path).astype(float)
        if a.shape != (DESC_DIM, COARSE_DIM + FINE_DIM + 1, 1):
            raise ValueError(f"fusion weight file has shape {a.shape}")
        return cls(a[:, :-1, 0], a[:, -1, 0])

    def save(self, path):
        write_fmap(path, np.hstack([self.weight, self.bias[:, None]]))


def _cell_index(map_: DenseFeatureMap, kp: KeypointSet):
    map_.check_image(kp.image_shape)
    idx = np.floor(kp.rc / map_.stride).astype(int)
    gh, gw = map_.grid_shape
    if len(idx) and (idx.min() < 0 or idx[:, 0].max() >= gh or idx[:, 1].max() >= gw):
        raise IndexError("keypoint falls outside the feature grid")
    return idx


def query_coarse(map_: DenseFeatureMap, kp: KeypointSet):
    """Feature of the grid cell ``(row // 14, col // 14)`` of every keypoint."""
    if map_.stride != COARSE_STRIDE:
        raise ValueError("query_coarse needs a coarse (stride-14) map")
    idx = _cell_index(map_, kp)
    return map_.values[idx[:, 0], idx[:, 1]].astype(float)


def query_fine(map_: DenseFeatureMap, kp: KeypointSet):
    if map_.stride != FINE_STRIDE:
        raise ValueError("query_fine needs a fine (stride-1) map")
    idx = _cell_index(map_, kp)
    return map_.values[idx[:, 0], idx[:, 1]].astype(float)


def fuse(coarse, fine, w: FusionWeights, positions=None, normalize=False) -> DescriptorSet:
    """``f_i = W @ [coarse_i | fine_i] + b``; optionally L2-normalized."""
    coarse = np.asarray(coarse, dtype=float)
    fine = np.asarray(fine, dtype=float)
    if coarse.ndim != 2 or fine.ndim != 2 or len(coarse) != len(fine):
        raise ValueError(f"cannot fuse shapes {coarse.shape} and {fine.shape}")
    if coarse.shape[1] + fine.shape[1] != w.weight.shape[1]:
        raise ValueError(f"concatenated width {coarse.shape[1] + fine.shape[1]} does not "
                         f"match fusion weights {w.weight.shape}")
    f = np.hstack([coarse, fine]) @ w.weight.T + w.bias
    if normalize:
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    if positions is None:
        positions = np.zeros((len(f), 2))
    return DescriptorSet(f, positions)


def describe(kp: KeypointSet, coarse_map, fine_map, w: FusionWeights, normalize=False):
    return fuse(query_coarse(coarse_map, kp), query_fine(fine_map, kp), w,
                positions=kp.normalized(), normalize=normalize)


# -- providers ---------------------------------------------------------------

# (ring radius px, pooling sigma px, samples) of the sampling pattern
_INTENSITY_RINGS = ((6, 3.0, 8), (14, 5.0, 8), (24, 8.0, 8), (38, 12.0, 8))
_GRADIENT_RINGS = ((9, 3.0, 10), (20, 6.0, 10), (38, 12.0, 10))


# mirror padding keeps ring samples near the border location-specific;
# replicate padding would make every border descriptor look alike
_PAD = "mirror"


def _blur(a, sigma):
    return ndimage.gaussian_filter(a, sigma, mode=_PAD, truncate=3.0)


def _ring_samples(a, center_sigma, rings):
    """``a`` blurred and read at offsets on concentric rings around each pixel."""
    out = [_blur(a, center_sigma)]
    for radius, sigma, n in rings:
        b = _blur(a, sigma)
        for k in range(n):
            ang = 2 * np.pi * k / n
            # channel value at p is b(p + offset)
            out.append(ndimage.shift(b, (-radius * np.sin(ang), -radius * np.cos(ang)),
                                     order=1, mode=_PAD))
    out = np.stack(out, axis=-1)
    return out - out.mean(axis=-1, keepdims=True)


def classical_fine_features(img):
    """64 channels per pixel in a DAISY-like layout.

    33 channels sample the smoothed intensity at the pixel and on four
    rings (radius 6..38 px, smoothing growing with radius); 31 channels do
    the same for the Sobel gradient magnitude on three rings.  Each group
    is centred on its per-pixel mean.  All channels are shift-equivariant
    filters of the image.
    """
    img = to_gray(img)
    base = _blur(img, 0.7)
    mag = np.hypot(ndimage.sobel(base, axis=0, mode="nearest"),
                   ndimage.sobel(base, axis=1, mode="nearest")) / 8.0
    return np.concatenate([_ring_samples(img, 1.0, _INTENSITY_RINGS),
                           _ring_samples(mag, 1.0, _GRADIENT_RINGS)], axis=-1)


# coarse statistics shift with the grid rather than the scene, so they are
# scaled down to keep fused descriptors dominated by the fine part
COARSE_GAIN = 0.1


def classical_coarse_features(fine, patch=COARSE_STRIDE):
    """384 channels per cell: mean/std/max/min of the 64 fine channels over
    the cell, plus mean/std of the cell means over the 3x3 cell
    neighbourhood, all scaled by ``COARSE_GAIN``."""
    H, W, C = fine.shape
    gh, gw = H // patch, W // patch
    cells = fine[:gh * patch, :gw * patch].reshape(gh, patch, gw, patch, C)
    mean = cells.mean(axis=(1, 3))
    std = cells.std(axis=(1, 3))
    mx = cells.max(axis=(1, 3))
    mn = cells.min(axis=(1, 3))
    nb_mean = ndimage.uniform_filter(mean, size=(3, 3, 1), mode="nearest")
    nb_sq = ndimage.uniform_filter(mean * mean, size=(3, 3, 1), mode="nearest")
    nb_std = np.sqrt(np.maximum(nb_sq - nb_mean * nb_mean, 0.0))
    return COARSE_GAIN * np.concatenate([mean, std, mx, mn, nb_mean, nb_std], axis=-1)


def classical_provider(img):
    """Deterministic hand-crafted ``(coarse, fine)`` maps for an image."""
    fine = classical_fine_features(img)
    coarse = classical_coarse_features(fine)
    return DenseFeatureMap(coarse, COARSE_STRIDE), DenseFeatureMap(fine, FINE_STRIDE)


def file_provider(coarse_path, fine_path):
    """Load precomputed maps (FMAP files) for one image."""
    coarse = read_fmap(coarse_path)
    fine = read_fmap(fine_path)
    if coarse.shape[2] != COARSE_DIM or fine.shape[2] != FINE_DIM:
        raise ValueError(f"expected {COARSE_DIM}/{FINE_DIM} channels, got "
                         f"{coarse.shape[2]}/{fine.shape[2]}")
    return DenseFeatureMap(coarse, COARSE_STRIDE), DenseFeatureMap(fine, FINE_STRIDE)
