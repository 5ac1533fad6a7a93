"""
Multimodal keypoint detection.

A visual score map (thresholded Harris responses at corner peaks) and a depth
score map (noise-floored positive depth Laplacian at corner-like gradient
directions) are each normalized per frame, blended into a saturated combined
map, and keypoints are picked greedily under an adaptive minimum-distance rule.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from config import DetectorParams
from errors import ConfigError

logger = logging.getLogger(__name__)

_LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
_RING_8 = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])


class Modality(str, enum.Enum):
    VISUAL = "visual"
    DEPTH = "depth"
    MULTIMODAL = "multimodal"


@dataclass(frozen=True, eq=False)
class ScoreMap:
    values: np.ndarray  # HxW in [0, 1]
    modality: str  # visual | depth | combined
    sources: Optional[Tuple["ScoreMap", "ScoreMap"]] = None  # (V_s, D_s) for combined maps

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Keypoint:
    pixel: Tuple[float, float]  # (u, v) = (column, row)
    score: float
    modality: Modality
    depth: Optional[float] = None  # meters, None when the depth pixel is invalid


# ============================================================
# 1. HELPERS
# ============================================================
def _normalize_scores(values, floor):
    """Min-max map onto [floor, 1]; a single survivor (or all equal) maps to 1."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    vmin, vmax = values.min(), values.max()
    if vmax <= vmin:
        return np.ones_like(values)
    return floor + (1.0 - floor) * (values - vmin) / (vmax - vmin)


def _peak_centroids(response, radius, threshold):
    """One peak per connected plateau of local maxima: (rows, cols, values).

    Pixels of one plateau all equal the maximum of their shared window, so any
    member carries the plateau's value.
    """
    mask = (response >= threshold) & (response == ndimage.maximum_filter(response, size=2 * radius + 1))
    mask &= response > 0
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return np.empty(0), np.empty(0), np.empty(0)
    rows, cols = np.nonzero(mask)
    lbl = labels[rows, cols] - 1
    count = np.bincount(lbl, minlength=n)
    peaks = np.zeros(n)
    peaks[lbl] = response[rows, cols]
    return np.bincount(lbl, rows, n) / count, np.bincount(lbl, cols, n) / count, peaks


def harris_response(gray, params):
    """Harris corner response on [0, 1] intensities, structure tensor summed over the block."""
    img = np.asarray(gray, dtype=np.float64) / 255.0
    ix = ndimage.sobel(img, axis=1) / 8.0
    iy = ndimage.sobel(img, axis=0) / 8.0
    area = float(params.harris_block**2)
    a = ndimage.uniform_filter(ix * ix, size=params.harris_block) * area
    b = ndimage.uniform_filter(ix * iy, size=params.harris_block) * area
    c = ndimage.uniform_filter(iy * iy, size=params.harris_block) * area
    response = a * c - b * b - params.harris_k * (a + c) ** 2
    border = params.border
    response[:border, :] = 0.0
    response[-border:, :] = 0.0
    response[:, :border] = 0.0
    response[:, -border:] = 0.0
    return response


def _orb_peaks(gray, params):
    import cv2

    edge = max(params.border, 31)
    orb = cv2.ORB_create(nfeatures=5000, nlevels=1, edgeThreshold=edge, patchSize=31,
                         fastThreshold=params.orb_fast_threshold, scoreType=cv2.ORB_HARRIS_SCORE)
    keypoints = orb.detect(np.ascontiguousarray(gray, dtype=np.uint8), None)
    rows = np.array([kp.pt[1] for kp in keypoints], dtype=float)
    cols = np.array([kp.pt[0] for kp in keypoints], dtype=float)
    responses = np.array([kp.response for kp in keypoints], dtype=float)
    keep = responses >= params.harris_lambda
    return rows[keep], cols[keep], responses[keep]


# ============================================================
# 2. SCORE MAPS
# ============================================================
def compute_visual_score_map(gray, params=None):
    """Visual score map: normalized corner scores at corner pixels, 0 elsewhere."""
    params = params or DetectorParams()
    gray = np.asarray(gray)
    if gray.size == 0:
        raise ConfigError("empty intensity image")
    if params.visual_detector == "orb":
        rows, cols, scores = _orb_peaks(gray, params)
    else:
        response = harris_response(gray, params)
        rows, cols, scores = _peak_centroids(response, params.nms_radius, params.harris_lambda)
    values = np.zeros(gray.shape, dtype=np.float64)
    if len(scores):
        r = np.clip(np.round(rows).astype(int), 0, gray.shape[0] - 1)
        c = np.clip(np.round(cols).astype(int), 0, gray.shape[1] - 1)
        np.maximum.at(values, (r, c), _normalize_scores(scores, params.score_floor))
    logger.debug("visual score map: %d corners above lambda", len(scores))
    return ScoreMap(values, "visual")


def depth_error(d, params=None):
    """Quadratic depth-noise model a0 + a1 d + a2 d^2; NaN flags d <= 0."""
    params = params or DetectorParams()
    a0, a1, a2 = params.depth_error_coeffs
    d = np.asarray(d, dtype=np.float64)
    err = np.where(d > 0, a0 + a1 * d + a2 * d * d, np.nan)
    return float(err) if err.ndim == 0 else err


def compute_depth_score_map(depth, params=None):
    """Depth score map from the noise-floored Laplacian of a registered depth image."""
    params = params or DetectorParams()
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0
    # every pixel of the 3x3 stencil must carry depth
    full = ndimage.minimum_filter(valid.astype(np.uint8), size=3, mode="constant", cval=0).astype(bool)

    a0, a1, a2 = params.depth_error_coeffs
    err = np.where(valid, a0 + a1 * d + a2 * d * d, 0.0)
    noise = ndimage.convolve(err, _RING_8, mode="constant", cval=0.0)
    laplacian = ndimage.convolve(d, _LAPLACIAN_4, mode="constant", cval=0.0)
    raw = np.where(full, np.maximum(laplacian - noise, 0.0), 0.0)

    peaks = (raw > 0) & (raw == ndimage.maximum_filter(raw, size=3, mode="constant", cval=0.0))

    gx = ndimage.sobel(d, axis=1)
    gy = ndimage.sobel(d, axis=0)
    theta = np.degrees(np.arctan2(gy, gx)) % 90.0
    lo, hi = params.gradient_band_deg
    in_band = (theta >= lo) & (theta <= hi) & (np.hypot(gx, gy) > 0)

    keep = peaks & in_band & full
    values = np.zeros(d.shape, dtype=np.float64)
    values[keep] = _normalize_scores(raw[keep], params.score_floor)
    logger.debug("depth score map: %d corner pixels", int(keep.sum()))
    return ScoreMap(values, "depth")


def combine_score_maps(V_s, D_s, params=None):
    """C_s = min(gamma V_s + (1 - gamma) D_s, s_sat), per pixel."""
    params = params or DetectorParams()
    if V_s.shape != D_s.shape:
        raise ConfigError(f"score maps differ in size: visual {V_s.shape}, depth {D_s.shape}")
    g = params.gamma
    values = np.minimum(g * V_s.values + (1.0 - g) * D_s.values, params.s_sat)
    return ScoreMap(values, "combined", sources=(V_s, D_s))


# ============================================================
# 3. KEYPOINT SELECTION
# ============================================================
def _greedy_select(rows, cols, r, shape):
    """Indices accepted in order, each >= r px from every accepted one."""
    blocked = np.zeros(shape, dtype=bool)
    rad = int(np.ceil(r))
    dy, dx = np.mgrid[-rad:rad + 1, -rad:rad + 1]
    disc = dx * dx + dy * dy < r * r
    accepted = []
    for i, (y, x) in enumerate(zip(rows, cols)):
        if blocked[y, x]:
            continue
        accepted.append(i)
        y0, y1 = max(0, y - rad), min(shape[0], y + rad + 1)
        x0, x1 = max(0, x - rad), min(shape[1], x + rad + 1)
        blocked[y0:y1, x0:x1] |= disc[y0 - y + rad:y1 - y + rad, x0 - x + rad:x1 - x + rad]
    return accepted


def _modality_at(C_s, row, col):
    if C_s.sources is None:
        return {"visual": Modality.VISUAL, "depth": Modality.DEPTH}.get(C_s.modality, Modality.MULTIMODAL)
    V_s, D_s = C_s.sources
    has_v = V_s.values[row, col] > 0
    has_d = D_s.values[row, col] > 0
    if has_v and has_d:
        return Modality.MULTIMODAL
    return Modality.VISUAL if has_v else Modality.DEPTH


def select_keypoints(C_s, frame, params=None, blocked_pixels=(), margin=0):
    """Greedy selection by descending score under an adaptive distance constraint.

    r starts at r_max and halves (not below r_min) until n_target keypoints are
    accepted or candidates run out. `blocked_pixels` act as already-accepted
    points (live landmarks) that candidates must keep clear of. Candidates
    closer than `margin` px to the image edge are skipped.
    """
    params = params or DetectorParams()
    values = C_s.values
    rows, cols = np.nonzero(values > 0)
    if margin > 0:
        h, w = values.shape
        inside = (rows >= margin) & (rows <= h - 1 - margin) & (cols >= margin) & (cols <= w - 1 - margin)
        rows, cols = rows[inside], cols[inside]
    if len(rows) == 0:
        return []
    scores = values[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]

    blocked = [(int(round(v)), int(round(u))) for u, v in blocked_pixels]
    r = float(params.r_max)
    while True:
        pre_rows = np.array([b[0] for b in blocked] + list(rows), dtype=int)
        pre_cols = np.array([b[1] for b in blocked] + list(cols), dtype=int)
        pre_rows = np.clip(pre_rows, 0, values.shape[0] - 1)
        pre_cols = np.clip(pre_cols, 0, values.shape[1] - 1)
        accepted = [i - len(blocked) for i in _greedy_select(pre_rows, pre_cols, r, values.shape)
                    if i >= len(blocked)]
        if len(accepted) >= params.n_target or r <= params.r_min:
            break
        r = max(r / 2.0, params.r_min)

    keypoints = []
    for i in accepted:
        y, x = int(rows[i]), int(cols[i])
        d = float(frame.depth[y, x])
        keypoints.append(Keypoint(
            pixel=(float(x), float(y)),
            score=float(scores[i]),
            modality=_modality_at(C_s, y, x),
            depth=d if d > 0 else None,
        ))
    logger.debug("selected %d keypoints at r=%.1f px from %d candidates", len(keypoints), r, len(rows))
    return keypoints


def detect(frame, params=None):
    """Full detector on one frame: (V_s, D_s, C_s, keypoints)."""
    params = params or DetectorParams()
    V_s = compute_visual_score_map(frame.gray, params)
    D_s = compute_depth_score_map(frame.depth, params)
    C_s = combine_score_maps(V_s, D_s, params)
    return V_s, D_s, C_s, select_keypoints(C_s, frame, params)


def score_map_to_image(score_map):
    """8-bit rendering of a score map (1.0 -> 255) for PGM dumps."""
    return np.clip(np.round(score_map.values * 255.0), 0, 255).astype(np.uint8)
