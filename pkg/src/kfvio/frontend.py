"""Keyframe-aware feature association over simulator-provided correspondences.

A new observation joins an existing track only when its landmark was seen in
the last bundle, in one of the two most recent keyframe bundles, or in the
sibling image of the current bundle; otherwise it starts a fresh track, even
for a previously known landmark.  Keyframes are picked by view overlap with
the retained keyframe bundles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import BundleObservations


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counterclockwise, no repeated endpoint."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if pts.shape[0] < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def build(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = build(pts)
    upper = build(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    return hull


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counterclockwise polygons."""
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject by a CCW convex polygon."""
    output = list(subject)
    n = clip.shape[0]
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inputs, output = output, []
        if not inputs:
            break
        prev = inputs[-1]
        prev_in = _cross2(edge, prev - a) >= 0
        for cur in inputs:
            cur_in = _cross2(edge, cur - a) >= 0
            if cur_in != prev_in:
                denom = _cross2(edge, cur - prev)
                t = _cross2(edge, a - prev) / denom
                output.append(prev + t * (cur - prev))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def convex_hull_overlap(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """area(hull(A) intersect hull(B)) / area(hull(B)); 0 for degenerate hulls."""
    hull_a = convex_hull(points_a) if len(points_a) else np.zeros((0, 2))
    hull_b = convex_hull(points_b) if len(points_b) else np.zeros((0, 2))
    area_b = polygon_area(hull_b)
    if hull_a.shape[0] < 3 or hull_b.shape[0] < 3 or area_b <= 0.0:
        return 0.0
    inter = clip_convex(hull_a, hull_b)
    if inter.shape[0] < 3:
        return 0.0
    return float(np.clip(polygon_area(inter) / area_b, 0.0, 1.0))


@dataclass
class FeatureTrack:
    track_id: int
    landmark_id: int
    observations: list = field(default_factory=list)   # (bundle_id, cam_id, u, v)
    bundles: set = field(default_factory=set)
    status: str = "live"                                # live | disappeared | in-state

    def add(self, bundle_id: int, cam_id: int, u: float, v: float):
        self.observations.append((bundle_id, cam_id, u, v))
        self.bundles.add(bundle_id)


@dataclass
class AssociationResult:
    bundle_id: int
    t_raw: list
    is_keyframe: bool
    observations: list            # (track_id, cam_id, u, v) added this bundle
    disappeared: list             # FeatureTrack objects declared dead now
    overlap: float
    match_ratio: float


class Frontend:
    """Single-threaded association state machine fed bundles in arrival order."""

    def __init__(self, n_match_keyframes: int = 2, retained_keyframes: int = 5,
                 overlap_threshold: float = 0.6, ratio_threshold: float = 0.2,
                 matching: str = "keyframe"):
        if matching not in ("keyframe", "framewise"):
            raise ValueError(f"unknown matching mode {matching!r}")
        self.n_match_keyframes = n_match_keyframes
        self.retained_keyframes = retained_keyframes
        self.overlap_threshold = overlap_threshold
        self.ratio_threshold = ratio_threshold
        self.matching = matching

        self.tracks: dict[int, FeatureTrack] = {}
        self.live: set[int] = set()
        self.active: dict[int, int] = {}       # landmark -> live track id
        self.keyframes: list[int] = []
        self.last_bundle: int | None = None
        self._next_track = 0

    def _sources(self) -> set[int]:
        src = set()
        if self.last_bundle is not None:
            src.add(self.last_bundle)
        if self.matching == "keyframe":
            src.update(self.keyframes[-self.n_match_keyframes:])
        return src

    def process(self, bundle: BundleObservations) -> AssociationResult:
        j = bundle.bundle_id
        sources = self._sources()
        new_obs = []
        per_cam_pixels = []
        per_cam_matched = []

        for cam, obs in enumerate(bundle.obs):
            pixels = obs[:, 1:3] if obs.size else np.zeros((0, 2))
            per_cam_pixels.append(pixels)
            matched_mask = np.zeros(obs.shape[0], dtype=bool)
            for i in range(obs.shape[0]):
                lm = int(obs[i, 0])
                u, v = float(obs[i, 1]), float(obs[i, 2])
                tid = self.active.get(lm)
                track = self.tracks.get(tid) if tid is not None else None
                joinable = (track is not None and track.status == "live"
                            and (track.bundles & sources or j in track.bundles))
                if not joinable:
                    tid = self._next_track
                    self._next_track += 1
                    track = FeatureTrack(tid, lm)
                    self.tracks[tid] = track
                    self.live.add(tid)
                    self.active[lm] = tid
                track.add(j, cam, u, v)
                new_obs.append((tid, cam, u, v))
                if self.matching == "keyframe" and \
                        set(self.keyframes) & (track.bundles - {j}):
                    matched_mask[i] = True
            per_cam_matched.append(matched_mask)

        overlap, ratio = 0.0, 0.0
        if self.last_bundle is None:
            is_keyframe = True
        elif self.matching == "framewise":
            is_keyframe = True
        else:
            for pixels, matched in zip(per_cam_pixels, per_cam_matched):
                if pixels.shape[0] == 0:
                    continue
                m_pixels = pixels[matched]
                overlap = max(overlap, convex_hull_overlap(m_pixels, pixels))
                ratio = max(ratio, m_pixels.shape[0] / pixels.shape[0])
            is_keyframe = (overlap < self.overlap_threshold
                           or ratio < self.ratio_threshold)

        if is_keyframe:
            self.keyframes.append(j)
            if len(self.keyframes) > self.retained_keyframes:
                self.keyframes = self.keyframes[-self.retained_keyframes:]

        # a live track is dead once it cannot be matched by any future bundle
        future_sources = {j} | set(self.keyframes[-self.n_match_keyframes:]) \
            if self.matching == "keyframe" else {j}
        disappeared = []
        for tid in sorted(self.live):
            track = self.tracks[tid]
            if not (track.bundles & future_sources):
                track.status = "disappeared"
                disappeared.append(track)
        for track in disappeared:
            self.live.discard(track.track_id)
            if self.active.get(track.landmark_id) == track.track_id:
                del self.active[track.landmark_id]

        self.last_bundle = j
        return AssociationResult(bundle_id=j, t_raw=list(bundle.t_raw),
                                 is_keyframe=is_keyframe, observations=new_obs,
                                 disappeared=disappeared, overlap=overlap,
                                 match_ratio=ratio)

    def forget(self, track_ids) -> None:
        """Drop finished tracks from the registry (bookkeeping only)."""
        for tid in track_ids:
            self.tracks.pop(tid, None)
