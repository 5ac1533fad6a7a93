"""
Binary RGB-D descriptor.

256 sampling pairs inside a 48x48 window. Visual bits compare 9x9 patch means
after dark-noise subtraction; depth bits are geometric tests on the back-
projected point cloud (pair distance, surface-normal angle). Visual and depth
strings are OR-combined into one 256-bit string and matched by Hamming distance.
"""

from __future__ import annotations

import enum
import functools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from config import DescriptorParams
from core_types import normalized_grid
from errors import ConfigError, DveoError
from feature_detection import Modality

logger = logging.getLogger(__name__)

N_BITS = 256
N_BYTES = N_BITS // 8


class Validity(str, enum.Enum):
    VISUAL_DEPTH = "visual+depth"
    VISUAL = "visual-only"
    DEPTH = "depth-only"
    EMPTY = "empty"  # in window, but no family set a bit


@dataclass(frozen=True, eq=False)
class SamplingPattern:
    p1: np.ndarray  # N_BITS x 2 integer (du, dv) offsets from the keypoint
    p2: np.ndarray
    patch_size: int
    mean_patch: int
    seed: int


@dataclass(frozen=True)
class DarkNoiseModel:
    i_dn: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.i_dn < 255.0):
            raise ConfigError(f"dark noise intensity must lie in [0, 255), got {self.i_dn}")


@dataclass(frozen=True, eq=False)
class MultimodalDescriptor:
    bits: np.ndarray  # N_BYTES packed uint8
    validity: Validity

    def unpacked(self):
        return np.unpackbits(self.bits).astype(bool)

    def to_bytes(self):
        return self.bits.tobytes()


# ============================================================
# 1. SAMPLING PATTERN AND DARK NOISE
# ============================================================
@functools.lru_cache(maxsize=4)
def make_sampling_pattern(patch_size=48, mean_patch=9, seed=2018):
    """Isotropic Gaussian pairs (sigma = patch/5), redrawn until every mean patch fits the window."""
    bound = patch_size // 2 - mean_patch // 2 - 1
    sigma = patch_size / 5.0
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < N_BITS:
        x = np.round(rng.normal(0.0, sigma, size=(2, 2))).astype(int)
        if np.any(np.abs(x) > bound) or np.array_equal(x[0], x[1]):
            continue
        pairs.append(x)
    pairs = np.array(pairs)
    p1, p2 = pairs[:, 0, :].copy(), pairs[:, 1, :].copy()
    p1.setflags(write=False)
    p2.setflags(write=False)
    return SamplingPattern(p1=p1, p2=p2, patch_size=patch_size, mean_patch=mean_patch, seed=seed)


def pattern_from_params(params):
    return make_sampling_pattern(params.patch_size, params.mean_patch, params.pattern_seed)


def calibrate_dark_noise(dark_images):
    """Mean intensity over every pixel of every image taken in darkness."""
    images = [np.asarray(img, dtype=np.float64) for img in dark_images]
    if not images:
        raise ConfigError("calibrate_dark_noise needs at least one dark image")
    total = sum(float(img.sum()) for img in images)
    count = sum(img.size for img in images)
    if count == 0:
        raise ConfigError("dark images are empty")
    model = DarkNoiseModel(total / count)
    logger.info("dark noise I_DN = %.4f from %d images", model.i_dn, len(images))
    return model


def visual_bit(p1_mean, p2_mean, dn):
    """1 iff max(0, I1 - I_DN) < max(0, I2 - I_DN)."""
    return int(max(0.0, p1_mean - dn.i_dn) < max(0.0, p2_mean - dn.i_dn))


# ============================================================
# 2. PER-FRAME EXTRACTION
# ============================================================
def _smallest_eigenvectors(a11, a12, a13, a22, a23, a33):
    """Unit eigenvector of the smallest eigenvalue of stacked symmetric 3x3 matrices; NaN when degenerate."""
    q = (a11 + a22 + a33) / 3.0
    b11, b22, b33 = a11 - q, a22 - q, a33 - q
    p = np.sqrt((b11 * b11 + b22 * b22 + b33 * b33 + 2.0 * (a12 * a12 + a13 * a13 + a23 * a23)) / 6.0)
    det = b11 * (b22 * b33 - a23 * a23) - a12 * (a12 * b33 - a23 * a13) + a13 * (a12 * a23 - b22 * a13)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.clip(det / (2.0 * p**3), -1.0, 1.0)
    lam = q + 2.0 * p * np.cos(np.arccos(r) / 3.0 + 2.0 * np.pi / 3.0)

    rows = np.stack([
        np.stack([a11 - lam, a12, a13], axis=-1),
        np.stack([a12, a22 - lam, a23], axis=-1),
        np.stack([a13, a23, a33 - lam], axis=-1),
    ])
    crosses = np.stack([np.cross(rows[0], rows[1]), np.cross(rows[0], rows[2]), np.cross(rows[1], rows[2])])
    norms = np.linalg.norm(crosses, axis=-1)
    pick = np.argmax(norms, axis=0)
    vec = np.take_along_axis(crosses, pick[None, ..., None], axis=0)[0]
    norm = np.take_along_axis(norms, pick[None], axis=0)[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        vec = vec / norm[..., None]
    vec[~(norm > 1e-12 * p * p)] = np.nan
    return vec


def normal_map(points, valid, window=5):
    """Plane-fit normal of every pixel's window x window neighborhood, facing the camera.

    Box-filtered point-cloud moments give each neighborhood's covariance; the
    normal is its smallest-eigenvalue direction. NaN where fewer than 3 valid
    points or the fit is degenerate.
    """
    w = valid.astype(np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    wx, wy, wz = w * x, w * y, w * z
    moments = np.stack([w, wx, wy, wz, wx * x, wx * y, wx * z, wy * y, wy * z, wz * z], axis=-1)
    means = ndimage.uniform_filter(moments, size=(window, window, 1), mode="constant", cval=0.0)
    count = np.rint(means[..., 0] * window * window)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = means[..., 1:] / means[..., :1]
    mx, my, mz = m[..., 0], m[..., 1], m[..., 2]
    normals = _smallest_eigenvectors(
        m[..., 3] - mx * mx, m[..., 4] - mx * my, m[..., 5] - mx * mz,
        m[..., 6] - my * my, m[..., 7] - my * mz, m[..., 8] - mz * mz,
    )
    flip = np.sum(normals * points, axis=-1) > 0
    normals[flip] *= -1.0
    normals[count < 3] = np.nan
    return normals


class DescriptorExtractor:
    """Holds the per-frame precomputation (integral image, point cloud, normal map).

    Visual and depth bit strings are cached per pixel, so describing the same
    candidate for several landmark modalities costs one extraction. The normal
    map is built on the first depth-bit request.
    """

    def __init__(self, frame, pattern=None, dn=None, params=None):
        self.params = params or DescriptorParams()
        self.pattern = pattern or pattern_from_params(self.params)
        self.dn = dn or DarkNoiseModel()
        self.frame = frame
        gray = np.asarray(frame.gray, dtype=np.int64)
        self._integral = np.zeros((gray.shape[0] + 1, gray.shape[1] + 1), dtype=np.int64)
        self._integral[1:, 1:] = gray.cumsum(axis=0).cumsum(axis=1)
        depth = np.asarray(frame.depth, dtype=np.float64)
        self._valid = depth > 0
        xy = normalized_grid(frame.camera)
        self._cloud = np.dstack([xy[..., 0] * depth, xy[..., 1] * depth, depth])
        self._shape = depth.shape
        self._cos_thresh = np.cos(np.radians(self.params.normal_angle_deg))
        self._tau2 = self.params.distance_threshold**2
        self._visual_cache = {}
        self._depth_cache = {}

    @functools.cached_property
    def normals(self):
        return normal_map(self._cloud, self._valid, self.params.normal_window)

    def in_window(self, u, v):
        half = self.pattern.patch_size // 2
        h, w = self._shape
        return half <= u <= w - 1 - half and half <= v <= h - 1 - half

    def patch_means(self, u, v, offsets):
        m = self.pattern.mean_patch // 2
        cols = u + offsets[:, 0]
        rows = v + offsets[:, 1]
        ii = self._integral
        sums = (ii[rows + m + 1, cols + m + 1] - ii[rows - m, cols + m + 1]
                - ii[rows + m + 1, cols - m] + ii[rows - m, cols - m])
        return sums / float(self.pattern.mean_patch**2)

    def visual_bits(self, u, v):
        m1 = np.maximum(0.0, self.patch_means(u, v, self.pattern.p1) - self.dn.i_dn)
        m2 = np.maximum(0.0, self.patch_means(u, v, self.pattern.p2) - self.dn.i_dn)
        return m1 < m2

    def depth_bits(self, u, v):
        p1, p2 = self.pattern.p1, self.pattern.p2
        r1, c1 = v + p1[:, 1], u + p1[:, 0]
        r2, c2 = v + p2[:, 1], u + p2[:, 0]
        both = self._valid[r1, c1] & self._valid[r2, c2]
        close = np.sum((self._cloud[r1, c1] - self._cloud[r2, c2]) ** 2, axis=1) <= self._tau2
        normals = self.normals
        cos = np.einsum("ni,ni->n", normals[r1, c1], normals[r2, c2])
        with np.errstate(invalid="ignore"):
            bent = np.isfinite(cos) & (cos <= self._cos_thresh)
        return both & (close | bent)

    def _cached(self, cache, compute, u, v):
        key = (u, v)
        if key not in cache:
            cache[key] = compute(u, v)
        return cache[key]

    def parts(self, pixel):
        """(visual bits, depth bits) as bool arrays, or None outside the window."""
        u, v = int(round(pixel[0])), int(round(pixel[1]))
        if not self.in_window(u, v):
            return None
        return (self._cached(self._visual_cache, self.visual_bits, u, v),
                self._cached(self._depth_cache, self.depth_bits, u, v))

    def describe(self, pixel, modality):
        """Descriptor at a pixel from the bit families of `modality`; None outside the window."""
        u, v = int(round(pixel[0])), int(round(pixel[1]))
        if not self.in_window(u, v):
            return None
        use_visual = self.params.use_visual_bits and modality in (Modality.VISUAL, Modality.MULTIMODAL)
        use_depth = self.params.use_depth_bits and modality in (Modality.DEPTH, Modality.MULTIMODAL)
        visual = self._cached(self._visual_cache, self.visual_bits, u, v) if use_visual else _NO_BITS
        depth = self._cached(self._depth_cache, self.depth_bits, u, v) if use_depth else _NO_BITS
        return combine_bits(visual, depth)


_NO_BITS = np.zeros(N_BITS, dtype=bool)
_NO_BITS.setflags(write=False)


def combine_bits(visual, depth):
    """OR-combine the two strings; validity names the families that set a bit (EMPTY when none did)."""
    has_visual, has_depth = bool(visual.any()), bool(depth.any())
    if has_visual and has_depth:
        validity = Validity.VISUAL_DEPTH
    elif has_visual or has_depth:
        validity = Validity.VISUAL if has_visual else Validity.DEPTH
    else:
        validity = Validity.EMPTY
    return MultimodalDescriptor(np.packbits(visual | depth), validity)


def extract_descriptor(kp, frame, pattern=None, dn=None, params=None, modality=None):
    """Descriptor of one keypoint, or None if its window leaves the image."""
    extractor = DescriptorExtractor(frame, pattern, dn, params)
    return extractor.describe(kp.pixel, modality or kp.modality)


# ============================================================
# 3. MATCHING
# ============================================================
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def _packed(d):
    if d is None:
        raise DveoError("hamming distance on an invalid descriptor")
    bits = d.bits if isinstance(d, MultimodalDescriptor) else np.asarray(d, dtype=np.uint8)
    if bits.shape[-1] != N_BYTES:
        raise DveoError(f"descriptor must have {N_BYTES} bytes, got {bits.shape[-1]}")
    return bits


def hamming_distance(a, b):
    """Number of differing bits."""
    return int(_POPCOUNT[np.bitwise_xor(_packed(a), _packed(b))].sum())


def hamming_to_many(a, others):
    """Distances from one descriptor to a stack (N x 32 bytes or a list of descriptors)."""
    if len(others) == 0:
        return np.empty(0, dtype=np.int64)
    stack = np.stack([_packed(o) for o in others]) if isinstance(others, list) else np.asarray(others)
    return _POPCOUNT[np.bitwise_xor(stack, _packed(a)[None, :])].sum(axis=1)
