"""Synthetic scenes with exact visibility and projection oracles.

Scenes are collections of textured axis-aligned rectangles, which keeps
every oracle an analytic ray/segment-rectangle intersection: trustworthy
ground truth for HPR, virtual-image assignment and end-to-end
localization at desk scale. The standard suite (wall, two-walls, room,
two-floor, park) ships with fixed seeds so tests have stable targets.

World frame is z-up. Cameras look with +z forward, +y image-down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at, project_many, \
    transform_to_camera
from .images import write_gray
from .pointcloud_io import DatasetManifest, ImageRecord, PointCloud, \
    save_manifest, save_ply

_AXIS_UV = {0: (1, 2), 1: (0, 2), 2: (0, 1)}

# Texture scale constants: high-contrast random blocks with brighter
# grid lines, tuned so the corner detector has plenty to latch onto.
_BLOCK_M = 0.25
_LINE_M = 1.0
_LINE_HALF_WIDTH_M = 0.03


@dataclass(frozen=True)
class Surface:
    """Axis-aligned rectangle: `axis` is the constant coordinate's index."""

    axis: int
    coord: float
    u_range: tuple[float, float]
    v_range: tuple[float, float]
    texture_seed: int = 0

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")
        if not (self.u_range[0] < self.u_range[1]
                and self.v_range[0] < self.v_range[1]):
            raise ValueError("surface must have positive area")

    @property
    def area(self) -> float:
        return (self.u_range[1] - self.u_range[0]) * \
            (self.v_range[1] - self.v_range[0])


def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic [0, 1) hash of integer lattice coordinates."""
    h = (i.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ j.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
         ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(31)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def texture_value(surface: Surface, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Grayscale texture (uint8) at surface-local coordinates."""
    bi = np.floor(np.asarray(u) / _BLOCK_M).astype(np.int64)
    bj = np.floor(np.asarray(v) / _BLOCK_M).astype(np.int64)
    val = np.where(_hash01(bi, bj, surface.texture_seed) < 0.5, 40, 215)
    on_line = (np.abs(u - np.round(u / _LINE_M) * _LINE_M) < _LINE_HALF_WIDTH_M) \
        | (np.abs(v - np.round(v / _LINE_M) * _LINE_M) < _LINE_HALF_WIDTH_M)
    return np.where(on_line, 255, val).astype(np.uint8)


@dataclass
class SceneSpec:
    name: str
    seed: int
    surfaces: list[Surface]
    density: float                     # points per square meter
    intrinsics: CameraIntrinsics
    reference_poses: list[Pose]
    query_poses: list[Pose]
    jitter_m: float = 0.0              # optional isotropic point noise

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if not self.surfaces:
            raise ValueError("scene needs at least one surface")


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    cloud: PointCloud
    images: dict[str, np.ndarray]      # name -> uint8 grayscale
    manifest: DatasetManifest

    def surfaces(self) -> list[Surface]:
        return self.spec.surfaces


def _surface_points(surface: Surface, density: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Deterministic stratified sample of n = round(area * density) points."""
    w = surface.u_range[1] - surface.u_range[0]
    h = surface.v_range[1] - surface.v_range[0]
    n = int(round(surface.area * density))
    if n == 0:
        return np.zeros((0, 3))
    nu = max(1, int(round(math.sqrt(n * w / h))))
    nv = int(math.ceil(n / nu))
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv))
    iu, iv = iu.ravel(), iv.ravel()
    u = surface.u_range[0] + (iu + rng.random(len(iu))) * (w / nu)
    v = surface.v_range[0] + (iv + rng.random(len(iv))) * (h / nv)
    if len(u) > n:  # drop the surplus stratum cells uniformly
        sel = rng.permutation(len(u))[:n]
        sel.sort()
        u, v = u[sel], v[sel]
    pts = np.empty((len(u), 3))
    ua, va = _AXIS_UV[surface.axis]
    pts[:, surface.axis] = surface.coord
    pts[:, ua] = u
    pts[:, va] = v
    return pts


def _ray_hits(surfaces, origins, dirs, eps=1e-9):
    """Nearest ray-rectangle hit per ray.

    origins: (3,) or (n, 3); dirs: (n, 3). Returns (t, surface_index, hit):
    t is inf and surface_index -1 where nothing is hit.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), (n, 3))
    best_t = np.full(n, np.inf)
    best_s = np.full(n, -1, dtype=np.int64)
    for si, s in enumerate(surfaces):
        d_a = dirs[:, s.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (s.coord - origins[:, s.axis]) / d_a
        valid = (np.abs(d_a) > 1e-15) & (t > eps) & (t < best_t)
        if not np.any(valid):
            continue
        ua, va = _AXIS_UV[s.axis]
        hu = origins[valid, ua] + t[valid] * dirs[valid, ua]
        hv = origins[valid, va] + t[valid] * dirs[valid, va]
        inside = (hu >= s.u_range[0]) & (hu <= s.u_range[1]) \
            & (hv >= s.v_range[0]) & (hv <= s.v_range[1])
        idx = np.flatnonzero(valid)[inside]
        best_t[idx] = t[valid][inside]
        best_s[idx] = si
    hit = np.where(np.isfinite(best_t[:, None]),
                   origins + best_t[:, None] * dirs, np.nan)
    return best_t, best_s, hit


def render_image(surfaces, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Rasterize the scene by exact per-pixel ray casting; nearest surface wins."""
    w, h = intr.width, intr.height
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    d_cam = np.stack([(us.ravel() - intr.cx) / intr.fx,
                      (vs.ravel() - intr.cy) / intr.fy,
                      np.ones(w * h)], axis=1)
    R = pose.R
    dirs = d_cam @ R           # R^T applied row-wise
    center = pose.center()
    _, sidx, hits = _ray_hits(surfaces, center, dirs)
    img = np.zeros(w * h, dtype=np.uint8)
    for si, s in enumerate(surfaces):
        m = sidx == si
        if not np.any(m):
            continue
        ua, va = _AXIS_UV[s.axis]
        img[m] = texture_value(s, hits[m, ua], hits[m, va])
    return img.reshape(h, w)


def generate(spec: SceneSpec) -> SyntheticDataset:
    """Materialize a scene: sampled cloud, rendered images, manifest.

    Deterministic for a fixed spec (one seeded generator drives sampling).
    Manifest paths follow the layout written by `write_dataset`.
    """
    rng = np.random.default_rng(spec.seed)
    parts = [_surface_points(s, spec.density, rng) for s in spec.surfaces]
    points = np.vstack([p for p in parts if len(p)]) if parts else np.zeros((0, 3))
    if spec.jitter_m > 0:
        points = points + rng.normal(0.0, spec.jitter_m, size=points.shape)

    colors = np.zeros_like(points, dtype=np.uint8)
    offset = 0
    for s, p in zip(spec.surfaces, parts):
        k = len(p)
        ua, va = _AXIS_UV[s.axis]
        tex = texture_value(s, p[:, ua], p[:, va])
        colors[offset:offset + k] = tex[:, None]
        offset += k
    cloud = PointCloud(points=points, colors=colors)

    images = {}
    references = []
    queries = []
    for i, pose in enumerate(spec.reference_poses):
        name = f"ref_{i:03d}.pgm"
        images[name] = render_image(spec.surfaces, pose, spec.intrinsics)
        references.append(ImageRecord(name, spec.intrinsics, pose))
    for i, pose in enumerate(spec.query_poses):
        name = f"query_{i:03d}.pgm"
        images[name] = render_image(spec.surfaces, pose, spec.intrinsics)
        queries.append(ImageRecord(name, spec.intrinsics, pose))
    manifest = DatasetManifest(cloud_path=Path("cloud.ply"),
                               references=references, queries=queries)
    return SyntheticDataset(spec=spec, cloud=cloud, images=images,
                            manifest=manifest)


def write_dataset(dataset: SyntheticDataset, out_dir) -> Path:
    """Write cloud.ply (binary), one PGM per image, and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(dataset.cloud, out / "cloud.ply", format="binary")
    for name, img in dataset.images.items():
        write_gray(img, out / name)
    dataset.manifest.root = out
    dataset.manifest.cloud_path = Path("cloud.ply")
    path = out / "manifest.json"
    save_manifest(dataset.manifest, path)
    return path


# Exact oracles ---------------------------------------------------------

def oracle_visibility(dataset: SyntheticDataset, pose: Pose,
                      intr: CameraIntrinsics,
                      endpoint_epsilon: float = 1e-6) -> np.ndarray:
    """Exact per-point visibility: inside the frustum and the open segment
    from the camera center to the point hits no surface (hits within
    endpoint_epsilon meters of the point itself do not count; the point
    lies on its own surface)."""
    points = dataset.cloud.points
    p_cam = transform_to_camera(pose, points)
    uv, in_front = project_many(intr, p_cam)
    in_frustum = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)

    center = pose.center()
    vis = in_frustum.copy()
    ids = np.flatnonzero(in_frustum)
    if len(ids) == 0:
        return vis
    seg = points[ids] - center
    seg_len = np.linalg.norm(seg, axis=1)
    t, _, _ = _ray_hits(dataset.spec.surfaces, center, seg, eps=1e-9)
    occluded = t < 1.0 - endpoint_epsilon / np.maximum(seg_len, 1e-12)
    vis[ids[occluded]] = False
    return vis


def oracle_keypoint_3d(dataset: SyntheticDataset, pose: Pose,
                       intr: CameraIntrinsics, kp) -> np.ndarray | None:
    """Exact hit point of the keypoint's pixel ray, or None if it misses."""
    u, v = float(kp[0]), float(kp[1])
    d_cam = np.array([[(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]])
    dirs = d_cam @ pose.R
    t, sidx, hit = _ray_hits(dataset.spec.surfaces, pose.center(), dirs)
    if sidx[0] < 0:
        return None
    return hit[0]


def frustum_mask(cloud: PointCloud, pose: Pose,
                 intr: CameraIntrinsics) -> np.ndarray:
    """Points with positive depth projecting inside the image."""
    p_cam = transform_to_camera(pose, cloud.points)
    uv, in_front = project_many(intr, p_cam)
    return in_front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)


# Standard scene suite ---------------------------------------------------

def _box(x0, x1, y0, y1, z0, z1, seed0):
    """Six inward-facing rectangles of an axis-aligned box."""
    return [
        Surface(2, z0, (x0, x1), (y0, y1), texture_seed=seed0 + 0),   # floor
        Surface(2, z1, (x0, x1), (y0, y1), texture_seed=seed0 + 1),   # ceiling
        Surface(1, y0, (x0, x1), (z0, z1), texture_seed=seed0 + 2),
        Surface(1, y1, (x0, x1), (z0, z1), texture_seed=seed0 + 3),
        Surface(0, x0, (y0, y1), (z0, z1), texture_seed=seed0 + 4),
        Surface(0, x1, (y0, y1), (z0, z1), texture_seed=seed0 + 5),
    ]


def _intr(width=96, height=72, f=60.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def _ring_poses(center, radius, z, n, rng, look_out=True, jitter=0.0):
    poses = []
    for i in range(n):
        a = 2 * math.pi * i / n
        pos = np.array([center[0] + radius * math.cos(a),
                        center[1] + radius * math.sin(a), z])
        if jitter > 0:
            pos = pos + rng.uniform(-jitter, jitter, 3)
        direction = np.array([math.cos(a), math.sin(a), 0.0])
        target = pos + (direction if look_out else -direction) * 2.0
        poses.append(look_at(pos, target))
    return poses


def scene_wall(seed: int = 1, density: float = 100.0) -> SceneSpec:
    """Single 4x3 m wall seen frontally from a short camera line."""
    wall = Surface(1, 2.0, (-2.0, 2.0), (-1.5, 1.5), texture_seed=7)
    rng = np.random.default_rng(seed + 1000)
    refs = [look_at((x, -1.0, 0.0), (x, 2.0, 0.0)) for x in (-0.8, 0.0, 0.8)]
    queries = [look_at((x + rng.uniform(-0.1, 0.1), -1.1, 0.05), (x, 2.0, 0.0))
               for x in (-0.4, 0.4)]
    return SceneSpec("wall", seed, [wall], density, _intr(), refs, queries)


def scene_two_walls(seed: int = 1, density: float = 100.0) -> SceneSpec:
    """Near wall fully occluding a far wall from the reference line."""
    near = Surface(1, 2.0, (-2.0, 2.0), (-1.5, 1.5), texture_seed=11)
    far = Surface(1, 4.0, (-2.0, 2.0), (-1.5, 1.5), texture_seed=12)
    rng = np.random.default_rng(seed + 1000)
    refs = [look_at((x, -1.0, 0.0), (x, 2.0, 0.0)) for x in (-0.6, 0.0, 0.6)]
    queries = [look_at((rng.uniform(-0.3, 0.3), -1.05, 0.0), (0.0, 2.0, 0.0))]
    return SceneSpec("two-walls", seed, [near, far], density, _intr(),
                     refs, queries)


def scene_room(seed: int = 1, density: float = 300.0, n_refs: int = 12,
               n_queries: int = 6, width: int = 96, height: int = 72,
               f: float = 60.0) -> SceneSpec:
    """Closed 5x5x2.5 m textured room, cameras on an inward ring."""
    surfaces = _box(0.0, 5.0, 0.0, 5.0, 0.0, 2.5, seed0=20)
    rng = np.random.default_rng(seed + 2000)
    center = (2.5, 2.5)
    refs = []
    for i in range(n_refs):
        a = 2 * math.pi * i / n_refs
        pos = np.array([center[0] + 0.9 * math.cos(a),
                        center[1] + 0.9 * math.sin(a),
                        1.1 + 0.15 * math.sin(3 * a)])
        target = np.array([center[0] + 4.0 * math.cos(a),
                           center[1] + 4.0 * math.sin(a), 1.2])
        refs.append(look_at(pos, target))
    queries = []
    for i in range(n_queries):
        a = 2 * math.pi * (i + 0.5) / n_queries
        pos = np.array([center[0] + 0.7 * math.cos(a) + rng.uniform(-0.1, 0.1),
                        center[1] + 0.7 * math.sin(a) + rng.uniform(-0.1, 0.1),
                        1.15 + rng.uniform(-0.05, 0.05)])
        target = np.array([center[0] + 4.0 * math.cos(a),
                           center[1] + 4.0 * math.sin(a),
                           1.2 + rng.uniform(-0.1, 0.1)])
        queries.append(look_at(pos, target))
    return SceneSpec("room", seed, surfaces, density,
                     _intr(width, height, f), refs, queries)


def scene_two_floor(seed: int = 1, density: float = 300.0) -> SceneSpec:
    """Two stacked 5x5 m floors sharing a slab; cameras on both floors.

    Vertical occlusion analog of a multi-storey building: without HPR the
    other floor's points bleed through the slab into every virtual image.
    """
    x0, x1, y0, y1 = 0.0, 5.0, 0.0, 5.0
    surfaces = [
        Surface(2, 0.0, (x0, x1), (y0, y1), texture_seed=40),    # ground floor
        Surface(2, 2.5, (x0, x1), (y0, y1), texture_seed=41),    # shared slab
        Surface(2, 5.0, (x0, x1), (y0, y1), texture_seed=42),    # roof
        Surface(1, y0, (x0, x1), (0.0, 5.0), texture_seed=43),
        Surface(1, y1, (x0, x1), (0.0, 5.0), texture_seed=44),
        Surface(0, x0, (y0, y1), (0.0, 5.0), texture_seed=45),
        Surface(0, x1, (y0, y1), (0.0, 5.0), texture_seed=46),
    ]
    rng = np.random.default_rng(seed + 3000)
    refs = _ring_poses((2.5, 2.5), 0.9, 1.1, 6, rng) \
        + _ring_poses((2.5, 2.5), 0.9, 3.6, 6, rng)
    queries = _ring_poses((2.5, 2.5), 0.7, 1.2, 2, rng, jitter=0.08) \
        + _ring_poses((2.5, 2.5), 0.7, 3.7, 2, rng, jitter=0.08)
    return SceneSpec("two-floor", seed, surfaces, density, _intr(), refs, queries)


def scene_park(seed: int = 1, density: float = 150.0) -> SceneSpec:
    """Open ground with sparse free-standing obstacle walls."""
    surfaces = [
        Surface(2, 0.0, (-8.0, 8.0), (-8.0, 8.0), texture_seed=60),
        Surface(1, 3.0, (-2.0, 2.0), (0.0, 2.0), texture_seed=61),
        Surface(0, -4.0, (-1.0, 3.0), (0.0, 2.5), texture_seed=62),
        Surface(1, -5.0, (2.0, 6.0), (0.0, 1.5), texture_seed=63),
    ]
    rng = np.random.default_rng(seed + 4000)
    refs = _ring_poses((0.0, 0.0), 5.5, 1.4, 8, rng, look_out=False)
    queries = _ring_poses((0.0, 0.0), 5.0, 1.45, 3, rng, look_out=False,
                          jitter=0.1)
    return SceneSpec("park", seed, surfaces, density, _intr(), refs, queries)


SCENE_BUILDERS = {
    "wall": scene_wall,
    "two-walls": scene_two_walls,
    "room": scene_room,
    "two-floor": scene_two_floor,
    "park": scene_park,
}


def build_scene(name: str, seed: int = 1, density: float | None = None,
                **kwargs) -> SceneSpec:
    if name not in SCENE_BUILDERS:
        raise ValueError(f"unknown scene {name!r}; "
                         f"choose from {sorted(SCENE_BUILDERS)}")
    if density is not None:
        kwargs["density"] = density
    return SCENE_BUILDERS[name](seed=seed, **kwargs)
