"""Hidden point removal for wide-area clouds seen from one camera.

A registered LiDAR cloud covers whole buildings, so the classical
flip-and-convex-hull visibility trick cannot be applied directly: the
virtual sphere would have to dwarf the scene. Instead the cloud is first
compressed radially into a thin spherical shell centered on the camera.
The compression preserves every point's direction exactly and maps radii
monotonically, so visibility ordering along each viewing ray survives,
while the resulting object-scale shell is exactly what flip-and-hull
handles well.

The visibility mask is a superset-of-visible heuristic: points whose
flipped image lands on the convex hull are kept. It is not exact
visibility; the exact oracle for synthetic scenes lives in `synth`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import Pose, transform_to_camera
from .pointcloud_io import PointCloud

# Degeneracy guards for the compression math (divisions in the radius
# remapping and the per-point normalization).
EPSILON_RADIUS = 1e-6
EPSILON_ORIGIN = 1e-6

# Plane-side tolerance for hull membership. Shell compression bounds all
# coordinates to about unit scale, which is what makes a fixed absolute
# tolerance meaningful here.
HULL_PLANE_TOL = 1e-12


class DegenerateCloud(ValueError):
    """Cloud cannot be shell-compressed (flat radius range or point at origin)."""


class DegenerateGeometry(ValueError):
    """Input points are coplanar/collinear; no 3D hull exists."""


@dataclass(frozen=True)
class ShellParams:
    """Inner/outer radii of the normalized target shell. t = s_max - s_min."""

    s_min: float = 0.9
    s_max: float = 1.0

    def __post_init__(self):
        if not (0 < self.s_min < self.s_max):
            raise ValueError(
                f"require 0 < s_min < s_max, got ({self.s_min}, {self.s_max})")

    @property
    def t(self) -> float:
        return self.s_max - self.s_min


def shell_compress(points_cam: np.ndarray, params: ShellParams) -> np.ndarray:
    """Radially remap camera-frame points into the shell [s_min, s_max].

    A point at radius r maps to radius ((r - r_min)/(r_max - r_min)) * t
    + s_min along its original direction, so the nearest point lands on the
    inner surface and the farthest on the outer one. Directions are
    preserved exactly and radial order strictly.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    if points_cam.ndim != 2 or points_cam.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got {points_cam.shape}")
    radii = np.linalg.norm(points_cam, axis=1)
    if len(radii) < 2:
        raise DegenerateCloud("need at least 2 points to define a radius range")
    if np.any(radii < EPSILON_ORIGIN):
        raise DegenerateCloud(
            f"{int(np.sum(radii < EPSILON_ORIGIN))} points within "
            f"{EPSILON_ORIGIN} of the camera center")
    r_min = radii.min()
    r_max = radii.max()
    if r_max - r_min < EPSILON_RADIUS:
        raise DegenerateCloud(
            f"radius range {r_max - r_min:.3g} below {EPSILON_RADIUS}; "
            "all points are equidistant from the camera")
    comp = (radii - r_min) / (r_max - r_min) * params.t + params.s_min
    return points_cam * (comp / radii)[:, None]


def spherical_flip(points: np.ndarray, flip_radius: float) -> np.ndarray:
    """Reflect points over the sphere of radius flip_radius: r -> 2*R - r."""
    points = np.asarray(points, dtype=np.float64)
    radii = np.linalg.norm(points, axis=1)
    return points * ((2.0 * flip_radius - radii) / radii)[:, None]


def convex_hull_3d(points: np.ndarray) -> np.ndarray:
    """Ids (ascending) of the points that are vertices of the 3D convex hull.

    Deterministic for a fixed input order. Points within HULL_PLANE_TOL of a
    hull facet plane count as hull vertices too, which errs toward keeping
    points. Raises DegenerateGeometry for coplanar or collinear input.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got {points.shape}")
    if len(points) < 4:
        raise DegenerateGeometry(f"need at least 4 points, got {len(points)}")
    try:
        # Qc reports near-coplanar non-vertex points so the facet tolerance
        # rule below can promote them.
        hull = ConvexHull(points, qhull_options="Qc")
    except QhullError as e:
        raise DegenerateGeometry(f"qhull failed (degenerate input?): {e}") from e

    on_hull = np.zeros(len(points), dtype=bool)
    on_hull[hull.vertices] = True
    if len(hull.coplanar):
        cand = hull.coplanar[:, 0]
        facet = hull.coplanar[:, 1]
        normals = hull.equations[facet, :3]
        offsets = hull.equations[facet, 3]
        dist = np.einsum("ij,ij->i", points[cand], normals) + offsets
        on_hull[cand[np.abs(dist) <= HULL_PLANE_TOL]] = True
    return np.flatnonzero(on_hull)


def hidden_point_removal(cloud: PointCloud | np.ndarray, pose: Pose,
                         params: ShellParams = ShellParams(),
                         flip_radius_factor: float = 10.0,
                         max_range: float | None = None) -> np.ndarray:
    """Visibility mask (bool per point id) for a world-frame cloud and camera.

    Pipeline: world-to-camera transform, shell compression, spherical flip
    with radius flip_radius_factor * s_max, then convex hull over the
    flipped points plus the origin; a point is marked visible iff its
    flipped image is a hull vertex.

    max_range, when set, pre-marks points farther than that many meters
    from the camera as hidden and excludes them from the hull (speed knob;
    default processes the full registered cloud).
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if flip_radius_factor <= 1.0:
        raise ValueError("flip_radius_factor must exceed 1 so the flip sphere "
                         "encloses the shell")
    p_cam = transform_to_camera(pose, points)
    mask = np.zeros(len(points), dtype=bool)

    active = np.arange(len(points))
    if max_range is not None:
        radii = np.linalg.norm(p_cam, axis=1)
        active = np.flatnonzero(radii <= max_range)
        if len(active) == 0:
            return mask
        p_cam = p_cam[active]

    compressed = shell_compress(p_cam, params)
    flipped = spherical_flip(compressed, flip_radius_factor * params.s_max)
    with_origin = np.vstack([flipped, np.zeros(3)])
    hull_ids = convex_hull_3d(with_origin)
    hull_ids = hull_ids[hull_ids < len(flipped)]
    mask[active[hull_ids]] = True
    return mask
