"""
Landmark tracking: predict each landmark's pixel from the propagated filter,
search a covariance-scaled ellipse around it, and match stored descriptors
against the candidate pixels of the new combined score map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from config import TrackingParams
from core_types import bearing_pixel_jacobian, bearing_to_pixel
from descriptor import MultimodalDescriptor, hamming_to_many
from ekf_backend import landmark_slice
from feature_detection import Keypoint, Modality

logger = logging.getLogger(__name__)


@dataclass
class TrackedLandmark:
    id: int
    descriptor: MultimodalDescriptor  # from the first observation, never refreshed
    modality: Modality
    last_seen_frame: int
    miss_count: int = 0


@dataclass(frozen=True)
class SearchWindow:
    center: Tuple[float, float]
    half_axes: Tuple[float, float]  # major, minor (px)
    orientation: float  # major-axis angle from +u, radians

    def bounding_box(self):
        """(u_min, u_max, v_min, v_max) of the ellipse."""
        a, b = self.half_axes
        c, s = np.cos(self.orientation), np.sin(self.orientation)
        hu = np.hypot(a * c, b * s)
        hv = np.hypot(a * s, b * c)
        u, v = self.center
        return u - hu, u + hu, v - hv, v + hv

    def contains(self, pixels):
        """Boolean mask of Nx2 pixels inside the ellipse."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        d = pixels - np.asarray(self.center)
        c, s = np.cos(self.orientation), np.sin(self.orientation)
        d1 = d[:, 0] * c + d[:, 1] * s
        d2 = -d[:, 0] * s + d[:, 1] * c
        a, b = self.half_axes
        return (d1 / a) ** 2 + (d2 / b) ** 2 <= 1.0

    @property
    def area(self):
        return float(np.pi * self.half_axes[0] * self.half_axes[1])


@dataclass(frozen=True)
class MatchResult:
    pixel: Tuple[float, float]
    distance: int
    candidate: int  # index into the candidate list


@dataclass(frozen=True)
class LandmarkDirectives:
    drop: Tuple[int, ...] = ()
    add: Tuple[Keypoint, ...] = ()


@dataclass(frozen=True)
class TrackRecord:
    frame: int
    landmark_id: int
    predicted: Optional[Tuple[float, float]]
    matched: Optional[Tuple[float, float]]
    distance: Optional[int]
    half_axes: Optional[Tuple[float, float]]


# ============================================================
# 1. PREDICTION AND SEARCH WINDOWS
# ============================================================
def predict_feature_pixel(state, cov, landmark_index, camera):
    """(pixel, 2x2 pixel covariance) of a landmark, or None when its bearing leaves the view."""
    b = state.bearing(landmark_index)
    pixel = bearing_to_pixel(b, camera)
    if pixel is None:
        return None
    _, J = bearing_pixel_jacobian(b.azimuth, b.elevation, camera)
    s = landmark_slice(landmark_index).start
    return pixel, J @ cov[s:s + 2, s:s + 2] @ J.T


def search_window(pixel, pixel_cov, params=None):
    """Confidence ellipse of the predicted pixel, half-axes clipped to [w_min, w_max]."""
    params = params or TrackingParams()
    evals, evecs = np.linalg.eigh(0.5 * (pixel_cov + pixel_cov.T))
    evals = np.maximum(evals, 0.0)
    axes = np.clip(params.window_sigma * np.sqrt(evals[::-1]), params.w_min, params.w_max)
    major = evecs[:, 1]
    return SearchWindow(
        center=(float(pixel[0]), float(pixel[1])),
        half_axes=(float(axes[0]), float(axes[1])),
        orientation=float(np.arctan2(major[1], major[0])),
    )


def candidates_in_window(window, pixels):
    """Indices of Nx2 candidate pixels inside the window (box prefilter, then ellipse)."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(pixels) == 0:
        return np.empty(0, dtype=int)
    u0, u1, v0, v1 = window.bounding_box()
    box = (pixels[:, 0] >= u0) & (pixels[:, 0] <= u1) & (pixels[:, 1] >= v0) & (pixels[:, 1] <= v1)
    idx = np.flatnonzero(box)
    if len(idx) == 0:
        return idx
    return idx[window.contains(pixels[idx])]


# ============================================================
# 2. MATCHING
# ============================================================
def match_landmark(landmark, window, candidates, params=None):
    """Best Hamming match among (pixel, descriptor) candidates inside the window, or None."""
    params = params or TrackingParams()
    if not candidates:
        return None
    pixels = np.array([c[0] for c in candidates], dtype=float)
    inside = candidates_in_window(window, pixels)
    inside = [i for i in inside if candidates[i][1] is not None]
    if not inside:
        return None
    dists = hamming_to_many(landmark.descriptor, [candidates[i][1] for i in inside])
    order = np.argsort(dists, kind="stable")
    best = int(dists[order[0]])
    if best > params.h_max:
        return None
    k = inside[order[0]]
    if params.use_second_best_margin and len(order) > 1:
        # neighbours of the best pixel on the same corner do not count as rivals
        rest = pixels[[inside[i] for i in order[1:]]]
        apart = np.hypot(*(rest - pixels[k]).T) > params.duplicate_radius
        if apart.any() and int(dists[order[1:]][apart][0]) - best < params.second_best_margin:
            return None
    return MatchResult(pixel=tuple(candidates[k][0]), distance=best, candidate=int(k))


# ============================================================
# 3. LANDMARK LIFECYCLE
# ============================================================
def manage_landmarks(landmarks, new_keypoints, params=None, live_pixels=(), out_of_view=(), r_min=8.0):
    """Drop stale or out-of-view landmarks and refill up to j_max.

    `landmarks` carry miss counts already updated for the current frame.
    `new_keypoints` are in descending score order; an added keypoint keeps
    r_min px from every surviving landmark pixel and from other additions.
    """
    params = params or TrackingParams()
    out_of_view = set(out_of_view)
    drop = tuple(lm.id for lm in landmarks if lm.miss_count >= params.miss_max or lm.id in out_of_view)
    open_slots = params.j_max - (len(landmarks) - len(drop))
    taken = [tuple(p) for lm_id, p in live_pixels if lm_id not in drop] if live_pixels else []
    add = []
    for kp in new_keypoints:
        if len(add) >= open_slots:
            break
        if any(np.hypot(kp.pixel[0] - u, kp.pixel[1] - v) < r_min for u, v in taken):
            continue
        add.append(kp)
        taken.append(kp.pixel)
    if open_slots > 0 and len(add) < open_slots:
        logger.debug("landmark table short by %d after refill", open_slots - len(add))
    return LandmarkDirectives(drop=drop, add=tuple(add))


class TrackingFrontend:
    """Landmark table plus per-frame predict / search / match."""

    def __init__(self, params=None):
        self.params = params or TrackingParams()
        self.landmarks: Dict[int, TrackedLandmark] = {}

    def add(self, landmark_id, descriptor, modality, frame_index):
        self.landmarks[landmark_id] = TrackedLandmark(landmark_id, descriptor, modality, frame_index)

    def drop(self, landmark_id):
        self.landmarks.pop(landmark_id, None)

    def track(self, frame_index, state, cov, camera, candidate_pixels, extractor):
        """Match every landmark of the filter state in the new frame.

        Returns (matches as (state index, pixel), out-of-view ids, track records).
        Each candidate pixel is given to at most one landmark, the closer in Hamming distance.
        """
        candidate_pixels = np.asarray(candidate_pixels, dtype=float).reshape(-1, 2)
        proposals: Dict[int, Tuple[int, MatchResult]] = {}
        predictions = {}
        out_of_view = []
        for j, lm_id in enumerate(state.landmark_ids):
            lm = self.landmarks.get(lm_id)
            if lm is None:
                continue
            pred = predict_feature_pixel(state, cov, j, camera)
            if pred is None:
                out_of_view.append(lm_id)
                predictions[lm_id] = (None, None)
                continue
            window = search_window(pred[0], pred[1], self.params)
            predictions[lm_id] = (pred[0], window)
            idx = candidates_in_window(window, candidate_pixels)
            candidates = [(candidate_pixels[i], extractor.describe(candidate_pixels[i], lm.modality)) for i in idx]
            result = match_landmark(lm, window, candidates, self.params)
            if result is None:
                continue
            key = int(idx[result.candidate])
            if key not in proposals or result.distance < proposals[key][1].distance:
                proposals[key] = (lm_id, result)

        matched = {lm_id: result for lm_id, result in proposals.values()}
        matches = []
        records = []
        for j, lm_id in enumerate(state.landmark_ids):
            lm = self.landmarks.get(lm_id)
            if lm is None:
                continue
            result = matched.get(lm_id)
            if result is not None:
                lm.miss_count = 0
                lm.last_seen_frame = frame_index
                matches.append((j, result.pixel))
            else:
                lm.miss_count += 1
            pixel, window = predictions.get(lm_id, (None, None))
            records.append(TrackRecord(
                frame=frame_index,
                landmark_id=lm_id,
                predicted=None if pixel is None else (float(pixel[0]), float(pixel[1])),
                matched=None if result is None else (float(result.pixel[0]), float(result.pixel[1])),
                distance=None if result is None else result.distance,
                half_axes=None if window is None else window.half_axes,
            ))
        logger.debug("frame %d: matched %d of %d landmarks, %d out of view",
                     frame_index, len(matches), len(state.landmark_ids), len(out_of_view))
        return matches, out_of_view, records

    def manage(self, new_keypoints, live_pixels=(), out_of_view=(), r_min=8.0):
        return manage_landmarks(list(self.landmarks.values()), new_keypoints, self.params,
                                live_pixels, out_of_view, r_min)
