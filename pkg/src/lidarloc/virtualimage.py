"""LiDAR virtual image: the visibility-filtered cloud splatted through a camera.

Each occupied pixel remembers which 3D point produced it (original world
position, not the shell-compressed one), its camera-frame depth, and the
exact subpixel location it projected to. Keypoints detected in the real
reference image are later assigned 3D positions by looking up the nearest
occupied pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_many, transform_to_camera
from .pointcloud_io import PointCloud


@dataclass
class VirtualImage:
    """Per-pixel point identity, depth (camera z, meters), world position and
    subpixel projection. point_id == -1 marks an empty pixel."""

    width: int
    height: int
    point_id: np.ndarray    # (h, w) int64, -1 empty
    depth: np.ndarray       # (h, w) float64, +inf empty
    world: np.ndarray       # (h, w, 3) float64
    subpixel: np.ndarray    # (h, w, 2) float64

    def occupancy(self) -> np.ndarray:
        return self.point_id >= 0

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.point_id >= 0))


def render_virtual_image(cloud: PointCloud | np.ndarray, mask: np.ndarray,
                         pose: Pose, intr: CameraIntrinsics,
                         splat_radius: float = 1.0) -> VirtualImage:
    """Splat visible points into a z-buffered pixel grid.

    Every visible point with depth > 0 whose subpixel projection lands
    inside the image claims all integer pixels within splat_radius of that
    subpixel location. Conflicts resolve to the smallest depth, ties to the
    smallest point id, which makes rendering fully deterministic.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != len(points):
        raise ValueError(f"mask length {len(mask)} != cloud size {len(points)}")
    w, h = intr.width, intr.height

    vimg = VirtualImage(
        width=w, height=h,
        point_id=np.full((h, w), -1, dtype=np.int64),
        depth=np.full((h, w), np.inf),
        world=np.zeros((h, w, 3)),
        subpixel=np.zeros((h, w, 2)),
    )
    ids = np.flatnonzero(mask)
    if len(ids) == 0:
        return vimg

    p_cam = transform_to_camera(pose, points[ids])
    uv, in_front = project_many(intr, p_cam)
    inside = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < w) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    ids = ids[inside]
    if len(ids) == 0:
        return vimg
    uv = uv[inside]
    depth = p_cam[inside, 2]

    # Candidate integer pixels: offsets around floor(uv) wide enough to
    # cover [u - r, u + r], then an exact circle test.
    r = float(splat_radius)
    k = int(np.ceil(r))
    offsets = np.arange(-k, k + 2)
    base = np.floor(uv).astype(np.int64)
    du = base[:, 0, None] + offsets[None, :]   # (n, m) candidate u
    dv = base[:, 1, None] + offsets[None, :]   # (n, m) candidate v
    n, m = du.shape
    cu = np.repeat(du[:, :, None], m, axis=2)      # (n, m, m)
    cv = np.repeat(dv[:, None, :], m, axis=1)
    dist2 = (cu - uv[:, 0, None, None]) ** 2 + (cv - uv[:, 1, None, None]) ** 2
    ok = (dist2 <= r * r + 1e-12) & (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)

    src, ou, ov = np.nonzero(ok)
    if len(src) == 0:
        return vimg
    flat_pix = cv[src, ou, ov] * w + cu[src, ou, ov]
    cand_depth = depth[src]
    cand_id = ids[src]

    # Deterministic z-buffer: order by (pixel, depth, point id), keep the
    # first entry of each pixel group.
    order = np.lexsort((cand_id, cand_depth, flat_pix))
    flat_sorted = flat_pix[order]
    first = np.ones(len(flat_sorted), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]

    py, px = np.divmod(flat_pix[win], w)
    winner_ids = cand_id[win]
    vimg.point_id[py, px] = winner_ids
    vimg.depth[py, px] = cand_depth[win]
    vimg.world[py, px] = points[winner_ids]
    vimg.subpixel[py, px] = uv[src[win]]
    return vimg


def lookup_3d(vimg: VirtualImage, kp, search_radius: float = 2.0):
    """Nearest occupied pixel to a keypoint, or None.

    Candidates are the integer pixels within search_radius of the keypoint;
    among the occupied ones the winner minimizes the Euclidean distance from
    the keypoint to the stored subpixel location, ties broken by smallest
    point id. Returns (point_id, world_position) or None.

    Raises ValueError for an out-of-bounds keypoint; that is a caller bug,
    detected keypoints always lie inside their image.
    """
    u, v = float(kp[0]), float(kp[1])
    if not (0 <= u < vimg.width and 0 <= v < vimg.height):
        raise ValueError(f"keypoint ({u}, {v}) outside image "
                         f"{vimg.width}x{vimg.height}")
    r = float(search_radius)
    k = int(np.ceil(r))
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    lo_u, hi_u = max(0, u0 - k), min(vimg.width - 1, u0 + k + 1)
    lo_v, hi_v = max(0, v0 - k), min(vimg.height - 1, v0 + k + 1)
    if lo_u > hi_u or lo_v > hi_v:
        return None
    us = np.arange(lo_u, hi_u + 1)
    vs = np.arange(lo_v, hi_v + 1)
    gu, gv = np.meshgrid(us, vs)
    in_range = (gu - u) ** 2 + (gv - v) ** 2 <= r * r + 1e-12
    occupied = vimg.point_id[gv, gu] >= 0
    sel = in_range & occupied
    if not np.any(sel):
        return None
    su, sv = gu[sel], gv[sel]
    d2 = np.sum((vimg.subpixel[sv, su] - (u, v)) ** 2, axis=1)
    pids = vimg.point_id[sv, su]
    best = np.lexsort((pids, d2))[0]
    return int(pids[best]), vimg.world[sv[best], su[best]].copy()


def dump_debug(vimg: VirtualImage, path_prefix) -> None:
    """Inspection dump: normalized depth map as PGM plus a sidecar .npz
    table of occupied pixels (pixel coords, point id, world position)."""
    from .images import write_gray

    prefix = Path(path_prefix)
    occ = vimg.occupancy()
    depth_img = np.zeros((vimg.height, vimg.width), dtype=np.uint8)
    if np.any(occ):
        d = vimg.depth[occ]
        lo, hi = d.min(), d.max()
        scale = 254.0 / (hi - lo) if hi > lo else 0.0
        depth_img[occ] = 255 - np.clip((vimg.depth[occ] - lo) * scale, 0, 254)
    write_gray(depth_img, prefix.with_suffix(".pgm"))
    py, px = np.nonzero(occ)
    np.savez(
        prefix.with_suffix(".npz"),
        pixel=np.column_stack([px, py]).astype(np.int64),
        point_id=vimg.point_id[py, px],
        depth=vimg.depth[py, px],
        world=vimg.world[py, px],
        subpixel=vimg.subpixel[py, px],
    )
