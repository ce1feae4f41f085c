"""The 3D reference map: keypoints with directly assigned LiDAR positions.

Building walks every kept reference image through detect -> hidden point
removal -> virtual image -> per-keypoint 3D lookup. A keypoint that finds
an occupied pixel within the search radius becomes a map point carrying
the original world position of the LiDAR point; the rest stay stored with
their descriptors but flagged unassigned (only assigned points feed pose
estimation later). The map persists to a single checksummed, versioned
binary file; see docs/formats.md.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import images as image_io
from .features import FeatureSet, detect_and_describe, global_descriptor
from .geometry import CameraIntrinsics, Pose, project_many, transform_to_camera
from .hpr import ShellParams, hidden_point_removal
from .pointcloud_io import DatasetManifest, PointCloud
from .virtualimage import lookup_3d, render_virtual_image

logger = logging.getLogger(__name__)

MAP_MAGIC = b"LLRMAP01"
MAP_VERSION = 1


class MapFormatError(ValueError):
    pass


class MapVersionError(MapFormatError):
    pass


class MapCorruptionError(MapFormatError):
    pass


class BuildError(RuntimeError):
    pass


class MapPoint(NamedTuple):
    keypoint: np.ndarray        # (2,) subpixel
    descriptor: np.ndarray
    world_position: np.ndarray  # (3,)
    point_id: int               # source LiDAR point id
    image_id: str


@dataclass
class ReferenceRecord:
    """All keypoints of one reference image; `assigned` marks map points."""

    image_id: str
    intrinsics: CameraIntrinsics
    pose: Pose
    keypoints: np.ndarray        # (n, 2) f8
    responses: np.ndarray        # (n,) f8
    descriptors: np.ndarray      # (n, d) u1 packed bits or f4
    descriptor_type: str
    assigned: np.ndarray         # (n,) bool
    world: np.ndarray            # (n, 3) f8, NaN where unassigned
    point_ids: np.ndarray        # (n,) i8, -1 where unassigned
    retrieval: np.ndarray | None = None  # (1024,) f8 global descriptor

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def n_assigned(self) -> int:
        return int(np.count_nonzero(self.assigned))

    @property
    def n_unassigned(self) -> int:
        return self.n_keypoints - self.n_assigned

    def map_points(self):
        for i in np.flatnonzero(self.assigned):
            yield MapPoint(self.keypoints[i], self.descriptors[i],
                           self.world[i], int(self.point_ids[i]), self.image_id)


@dataclass
class ReferenceMap:
    records: list[ReferenceRecord]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def record(self, image_id: str) -> ReferenceRecord:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)

    def total_assigned(self) -> int:
        return sum(r.n_assigned for r in self.records)


@dataclass(frozen=True)
class BuildConfig:
    """Everything that determines a map build besides the inputs."""

    shell: ShellParams = ShellParams()
    flip_radius_factor: float = 10.0
    max_range: float | None = None
    use_hpr: bool = True
    splat_radius: float = 1.0
    search_radius: float = 2.0
    max_features: int = 1000
    grid_cells: int = 8
    min_response: float = 1e-4
    strict: bool = True
    workers: int = 4

    def to_json(self) -> dict:
        return {
            "shell_min": self.shell.s_min, "shell_max": self.shell.s_max,
            "flip_radius_factor": self.flip_radius_factor,
            "max_range": self.max_range, "use_hpr": self.use_hpr,
            "splat_radius": self.splat_radius,
            "search_radius": self.search_radius,
            "max_features": self.max_features, "grid_cells": self.grid_cells,
            "min_response": self.min_response, "strict": self.strict,
            "workers": self.workers,
        }


def _build_one(cloud: PointCloud, rec, image: np.ndarray | None,
               feature_set: FeatureSet | None, config: BuildConfig):
    timings = {}
    t0 = time.perf_counter()
    if feature_set is None:
        feature_set = detect_and_describe(
            image, image_id=rec.image, max_features=config.max_features,
            grid_cells=config.grid_cells, min_response=config.min_response)
    retrieval = global_descriptor(image) if image is not None else None
    timings["detect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if config.use_hpr:
        mask = hidden_point_removal(cloud, rec.pose, config.shell,
                                    config.flip_radius_factor,
                                    config.max_range)
    else:
        mask = np.ones(len(cloud), dtype=bool)
    timings["hpr"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    vimg = render_virtual_image(cloud, mask, rec.pose, rec.intrinsics,
                                config.splat_radius)
    timings["render"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    n = len(feature_set)
    assigned = np.zeros(n, dtype=bool)
    world = np.full((n, 3), np.nan)
    point_ids = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        hit = lookup_3d(vimg, feature_set.keypoints[i], config.search_radius)
        if hit is not None:
            point_ids[i], world[i] = hit
            assigned[i] = True
    timings["assign"] = time.perf_counter() - t0

    record = ReferenceRecord(
        image_id=rec.image, intrinsics=rec.intrinsics, pose=rec.pose,
        keypoints=feature_set.keypoints.astype(np.float64),
        responses=feature_set.responses.astype(np.float64),
        descriptors=feature_set.descriptors,
        descriptor_type=feature_set.descriptor_type,
        assigned=assigned, world=world, point_ids=point_ids,
        retrieval=retrieval)
    return record, timings


def build_reference_map(cloud: PointCloud, manifest: DatasetManifest,
                        config: BuildConfig = BuildConfig(),
                        images: dict[str, np.ndarray] | None = None,
                        feature_sets: dict[str, FeatureSet] | None = None,
                        keep_ids: list[str] | None = None) -> ReferenceMap:
    """Build the map over the manifest's reference images.

    images may supply in-memory grayscale arrays keyed by image id;
    otherwise files are read relative to the manifest root. feature_sets,
    when given, replace built-in detection per image (imported features).
    keep_ids restricts the build to a reduction's survivors. In strict
    mode any per-image failure aborts with context; in lenient mode the
    image is skipped with a warning.
    """
    t_start = time.perf_counter()
    refs = manifest.references
    if keep_ids is not None:
        keep = set(keep_ids)
        unknown = keep - {r.image for r in refs}
        if unknown:
            raise ValueError(f"keep_ids not in manifest: {sorted(unknown)}")
        refs = [r for r in refs if r.image in keep]

    def load_image(rec):
        if feature_sets is not None and rec.image in feature_sets:
            return None  # detection will be skipped
        if images is not None and rec.image in images:
            return images[rec.image]
        return image_io.read_gray(rec.image_path(manifest.root))

    def task(rec):
        fs = feature_sets.get(rec.image) if feature_sets else None
        return _build_one(cloud, rec, load_image(rec), fs, config)

    records = []
    stage_totals: dict[str, float] = {}
    per_image_s = {}
    workers = max(1, config.workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [(rec, pool.submit(task, rec)) for rec in refs]
        for rec, fut in futures:
            try:
                record, timings = fut.result()
            except Exception as e:
                if config.strict:
                    raise BuildError(f"building {rec.image!r} failed: {e}") from e
                logger.warning("skipping %r: %s", rec.image, e)
                continue
            records.append(record)
            per_image_s[rec.image] = sum(timings.values())
            for k, v in timings.items():
                stage_totals[k] = stage_totals.get(k, 0.0) + v

    metadata = {
        "config": config.to_json(),
        "built_at": datetime.now(timezone.utc).isoformat(),
        "cloud_points": len(cloud),
        "timings": {
            "total_s": time.perf_counter() - t_start,
            "stages_s": {k: round(v, 6) for k, v in stage_totals.items()},
            "per_image_s": {k: round(v, 6) for k, v in per_image_s.items()},
        },
    }
    return ReferenceMap(records=records, metadata=metadata)


def validate_map(refmap: ReferenceMap, slack_px: float = 0.5) -> list[str]:
    """Check the reprojection invariant of every assigned keypoint.

    The stored world position must project within search_radius + slack_px
    of its keypoint in the source camera. Returns human-readable violation
    strings; an empty list means the map is consistent.
    """
    search_radius = float(
        refmap.metadata.get("config", {}).get("search_radius", 2.0))
    limit = search_radius + slack_px
    problems = []
    for rec in refmap.records:
        idx = np.flatnonzero(rec.assigned)
        if len(idx) == 0:
            continue
        p_cam = transform_to_camera(rec.pose, rec.world[idx])
        uv, valid = project_many(rec.intrinsics, p_cam)
        err = np.linalg.norm(uv - rec.keypoints[idx], axis=1)
        bad = ~valid | (err > limit)
        for i in np.flatnonzero(bad):
            problems.append(
                f"{rec.image_id}: keypoint {idx[i]} reprojects "
                f"{err[i]:.3f}px away (limit {limit:.3f})")
    return problems


# Persistence ------------------------------------------------------------

def _record_blob(rec: ReferenceRecord) -> bytes:
    parts = [
        np.ascontiguousarray(rec.keypoints, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.responses, dtype="<f8").tobytes(),
        np.ascontiguousarray(
            rec.descriptors,
            dtype=np.uint8 if rec.descriptor_type == "binary" else "<f4").tobytes(),
        np.ascontiguousarray(rec.assigned, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(rec.world, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.point_ids, dtype="<i8").tobytes(),
    ]
    return b"".join(parts)


def save_map(refmap: ReferenceMap, path) -> None:
    """Single-file binary map: magic, version, JSON header, blob, SHA-256."""
    blobs = []
    image_entries = []
    offset = 0
    for rec in refmap.records:
        blob = _record_blob(rec)
        image_entries.append({
            "id": rec.image_id,
            "intrinsics": rec.intrinsics.to_json(),
            **rec.pose.to_json(),
            "n": rec.n_keypoints,
            "descriptor_type": rec.descriptor_type,
            "descriptor_width": int(rec.descriptors.shape[1]) if rec.descriptors.ndim == 2 else 0,
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": refmap.metadata, "images": image_entries},
                        sort_keys=True).encode("utf-8")
    payload = MAP_MAGIC + struct.pack("<IQ", MAP_VERSION, len(header)) \
        + header + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


def load_map(path) -> ReferenceMap:
    data = Path(path).read_bytes()
    if len(data) < len(MAP_MAGIC) + 12 + 32:
        raise MapFormatError(f"{path}: file too small to be a map")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise MapCorruptionError(f"{path}: checksum mismatch, file corrupted")
    if payload[:8] != MAP_MAGIC:
        raise MapFormatError(f"{path}: bad magic {payload[:8]!r}")
    version, header_len = struct.unpack_from("<IQ", payload, 8)
    if version != MAP_VERSION:
        raise MapVersionError(f"{path}: unsupported map version {version}")
    header_start = 8 + 12
    try:
        header = json.loads(payload[header_start:header_start + header_len])
    except json.JSONDecodeError as e:
        raise MapFormatError(f"{path}: bad header JSON: {e}") from e
    blob = payload[header_start + header_len:]

    records = []
    for ent in header["images"]:
        n = int(ent["n"])
        dw = int(ent["descriptor_width"])
        desc_type = ent["descriptor_type"]
        at = int(ent["offset"])

        def take(count, dtype, shape):
            nonlocal at
            itemsize = np.dtype(dtype).itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=at)
            at += count * itemsize
            return arr.reshape(shape).copy()

        keypoints = take(n * 2, "<f8", (n, 2))
        responses = take(n, "<f8", (n,))
        if desc_type == "binary":
            descriptors = take(n * dw, np.uint8, (n, dw))
        else:
            descriptors = take(n * dw, "<f4", (n, dw))
        assigned = take(n, np.uint8, (n,)).astype(bool)
        world = take(n * 3, "<f8", (n, 3))
        point_ids = take(n, "<i8", (n,))
        records.append(ReferenceRecord(
            image_id=ent["id"],
            intrinsics=CameraIntrinsics.from_json(ent["intrinsics"]),
            pose=Pose.from_json(ent),
            keypoints=keypoints, responses=responses,
            descriptors=descriptors, descriptor_type=desc_type,
            assigned=assigned, world=world, point_ids=point_ids))
    return ReferenceMap(records=records, metadata=header["metadata"])


# Degradation experiments -------------------------------------------------

def _filter_record(rec: ReferenceRecord, keep: np.ndarray) -> ReferenceRecord:
    return ReferenceRecord(
        image_id=rec.image_id, intrinsics=rec.intrinsics, pose=rec.pose,
        keypoints=rec.keypoints[keep].copy(),
        responses=rec.responses[keep].copy(),
        descriptors=rec.descriptors[keep].copy(),
        descriptor_type=rec.descriptor_type,
        assigned=rec.assigned[keep].copy(),
        world=rec.world[keep].copy(),
        point_ids=rec.point_ids[keep].copy())


def degrade_reduce_keypoints(refmap: ReferenceMap, fraction: float,
                             seed: int) -> ReferenceMap:
    """Remove floor(fraction * n_i) assigned map points per image, uniformly
    at random, equally across images; seeded and reproducible."""
    if not (0 <= fraction < 1):
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    out = []
    for rec in refmap.records:
        idx = np.flatnonzero(rec.assigned)
        k = int(np.floor(fraction * len(idx)))
        keep = np.ones(rec.n_keypoints, dtype=bool)
        if k > 0:
            drop = rng.choice(idx, size=k, replace=False)
            keep[drop] = False
        out.append(_filter_record(rec, keep))
    meta = dict(refmap.metadata)
    meta["degradations"] = list(meta.get("degradations", [])) + [
        {"kind": "reduce_keypoints", "fraction": fraction, "seed": seed}]
    return ReferenceMap(records=out, metadata=meta)


def degrade_shift_positions(refmap: ReferenceMap, shift_m: float,
                            seed: int) -> ReferenceMap:
    """Shift stored 3D positions by exactly shift_m along one world axis.

    All assigned points across the map are partitioned into thirds by a
    seeded shuffle (x, y, z respectively); the sign of each shift is
    random per point. Untouched fields stay bit-identical.
    """
    if shift_m < 0:
        raise ValueError(f"shift_m must be >= 0, got {shift_m}")
    rng = np.random.default_rng(seed)
    locs = [(ri, pi) for ri, rec in enumerate(refmap.records)
            for pi in np.flatnonzero(rec.assigned)]
    order = rng.permutation(len(locs))
    n = len(locs)
    third = n // 3
    remainder = n - 3 * third
    sizes = [third + (1 if i < remainder else 0) for i in range(3)]
    out = [_filter_record(rec, np.ones(rec.n_keypoints, dtype=bool))
           for rec in refmap.records]
    if shift_m > 0:
        pos = 0
        for axis, size in enumerate(sizes):
            for oi in order[pos:pos + size]:
                ri, pi = locs[oi]
                sign = 1.0 if rng.random() < 0.5 else -1.0
                out[ri].world[pi, axis] += sign * shift_m
            pos += size
    meta = dict(refmap.metadata)
    meta["degradations"] = list(meta.get("degradations", [])) + [
        {"kind": "shift_positions", "shift_m": shift_m, "seed": seed}]
    return ReferenceMap(records=out, metadata=meta)


@dataclass
class MapStatistics:
    per_image: list[dict]
    mean_keypoints: float
    mean_assigned: float
    mean_ratio: float


def map_statistics(refmap: ReferenceMap) -> MapStatistics:
    """Per-image and aggregate keypoint/assignment counts."""
    per_image = []
    for rec in refmap.records:
        n, a = rec.n_keypoints, rec.n_assigned
        per_image.append({
            "image": rec.image_id,
            "keypoints": n,
            "assigned": a,
            "ratio": (a / n) if n else 0.0,
        })
    if not per_image:
        return MapStatistics([], 0.0, 0.0, 0.0)
    return MapStatistics(
        per_image=per_image,
        mean_keypoints=float(np.mean([r["keypoints"] for r in per_image])),
        mean_assigned=float(np.mean([r["assigned"] for r in per_image])),
        mean_ratio=float(np.mean([r["ratio"] for r in per_image])),
    )
