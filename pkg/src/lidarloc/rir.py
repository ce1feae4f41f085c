"""Reference image reduction: drop images redundant by both metrics.

A reference image is redundant with a partner in the same spatial grid
cell when (a) their viewing directions are nearly parallel (global
metric, cosine of the shooting poses) and (b) enough local feature
matches survive the epipolar check (local metric). Of a redundant pair
the member with fewer detected keypoints is dropped, because keypoint
count is what feeds pose estimation later. Pairs are processed greedily
in descending cosine order, skipping pairs with an already dropped
member, so every drop decision names a partner that was kept at that
moment; the report records each decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSet, epipolar_inliers, match
from .geometry import CameraIntrinsics, Pose, viewing_direction
from .pointcloud_io import ImageRecord


@dataclass
class GridIndex:
    """Camera centers bucketed into cubic cells of cell_size meters."""

    cell_size: float
    cells: dict[tuple[int, int, int], list[str]] = field(default_factory=dict)

    @staticmethod
    def build(ids_and_poses, cell_size: float) -> "GridIndex":
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        index = GridIndex(cell_size=cell_size)
        for image_id, pose in ids_and_poses:
            c = pose.center()
            key = tuple(int(v) for v in np.floor(c / cell_size))
            index.cells.setdefault(key, []).append(image_id)
        return index


@dataclass
class DropDecision:
    dropped: str
    partner: str
    cosine: float
    inliers: int


@dataclass
class ReductionReport:
    kept: list[str]
    dropped: list[DropDecision]
    config: dict = field(default_factory=dict)

    def dropped_ids(self) -> list[str]:
        return [d.dropped for d in self.dropped]

    def to_json(self) -> dict:
        return {
            "kept": list(self.kept),
            "dropped": [
                {"image": d.dropped, "partner": d.partner,
                 "cosine": d.cosine, "inliers": d.inliers}
                for d in self.dropped
            ],
            "config": dict(self.config),
        }


def global_similarity(a: Pose, b: Pose) -> float:
    """Cosine of the angle between the two cameras' viewing directions."""
    c = float(np.dot(viewing_direction(a), viewing_direction(b)))
    return min(1.0, max(-1.0, c))


def reduce_references(records: list[ImageRecord],
                      feature_sets: dict[str, FeatureSet],
                      grid_cell_m: float = 5.0,
                      c_thresh: float = 0.95,
                      f_thresh: int = 100,
                      match_ratio: float = 0.8,
                      epipolar_px: float = 3.0) -> ReductionReport:
    """Greedy pairwise reduction within spatial grid cells.

    For each unordered same-cell pair with cosine similarity above
    c_thresh, the epipolar-inlier count of their feature matches is the
    local metric; pairs passing both thresholds are redundant. Iterating
    in descending cosine order (ties by image id pair), the member with
    fewer keypoints is dropped (tie: the lexically larger id), skipping
    pairs whose members are already dropped. Inlier counts are computed
    lazily, only for pairs that pass the cosine gate.
    """
    by_id = {}
    for r in records:
        if r.image in by_id:
            raise ValueError(f"duplicate reference id {r.image!r}")
        if r.pose is None:
            raise ValueError(f"reference {r.image!r} lacks a pose")
        if r.image not in feature_sets:
            raise ValueError(f"reference {r.image!r} lacks features")
        by_id[r.image] = r

    index = GridIndex.build(((r.image, r.pose) for r in records), grid_cell_m)

    candidates = []  # (cosine, id_i, id_j) passing the cosine gate
    for members in index.cells.values():
        members = sorted(members)
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                c = global_similarity(by_id[members[i]].pose,
                                      by_id[members[j]].pose)
                if c > c_thresh:
                    candidates.append((c, members[i], members[j]))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))

    dropped: dict[str, DropDecision] = {}
    inlier_cache: dict[tuple[str, str], int] = {}
    for c, ida, idb in candidates:
        if ida in dropped or idb in dropped:
            continue
        key = (ida, idb)
        if key not in inlier_cache:
            inlier_cache[key] = _pair_inliers(
                by_id[ida], by_id[idb], feature_sets[ida], feature_sets[idb],
                match_ratio, epipolar_px)
        f = inlier_cache[key]
        if f < f_thresh:
            continue
        na, nb = len(feature_sets[ida]), len(feature_sets[idb])
        if na < nb:
            victim, partner = ida, idb
        elif nb < na:
            victim, partner = idb, ida
        else:
            victim, partner = max(ida, idb), min(ida, idb)
        dropped[victim] = DropDecision(dropped=victim, partner=partner,
                                       cosine=c, inliers=f)

    kept = [r.image for r in records if r.image not in dropped]
    return ReductionReport(
        kept=kept,
        dropped=[dropped[k] for k in sorted(dropped)],
        config={"grid_cell_m": grid_cell_m, "c_thresh": c_thresh,
                "f_thresh": f_thresh, "match_ratio": match_ratio,
                "epipolar_px": epipolar_px},
    )


def _pair_inliers(ra: ImageRecord, rb: ImageRecord,
                  fa: FeatureSet, fb: FeatureSet,
                  match_ratio: float, epipolar_px: float) -> int:
    m = match(fa, fb, ratio=match_ratio)
    baseline = np.linalg.norm(ra.pose.center() - rb.pose.center())
    if baseline < 1e-9:
        # Zero baseline: epipolar geometry is undefined; the raw mutual
        # match count stands in, the cosine gate already flagged the pair.
        return len(m)
    inl = epipolar_inliers(m, fa, fb, ra.pose, rb.pose,
                           ra.intrinsics, rb.intrinsics,
                           threshold_px=epipolar_px)
    return len(inl)
