"""Classical local features: corner detection, binary descriptors, matching.

The built-in feature is a min-eigenvalue corner detector with per-grid-cell
top-k selection for spatial uniformity, described by a 256-bit binary
string of smoothed-intensity comparisons on a fixed pattern. Everything is
deterministic for a fixed input. Externally computed features (including
float descriptors) can replace the built-in ones through the container
format implemented at the bottom of this module, so the pipeline itself is
feature-agnostic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Pose

DESCRIPTOR_BITS = 256
PATCH_RADIUS = 8

# Fixed comparison pattern: 256 offset pairs drawn once from an isotropic
# Gaussian clipped to the patch. The seed is part of the descriptor
# definition; changing it invalidates every stored descriptor.
_PATTERN_SEED = 0x5EED
_pat_rng = np.random.default_rng(_PATTERN_SEED)
_PATTERN = np.clip(
    np.round(_pat_rng.normal(0.0, PATCH_RADIUS / 2.5, size=(DESCRIPTOR_BITS, 4))),
    -PATCH_RADIUS, PATCH_RADIUS).astype(np.int64)
del _pat_rng

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSet:
    """Keypoints and descriptors of one image.

    keypoints: (n, 2) float64 subpixel (u, v); responses: (n,) float64;
    descriptors: (n, 32) uint8 packed bits for binary descriptor_type, or
    (n, d) float32 for imported float features.
    """

    image_id: str
    keypoints: np.ndarray
    responses: np.ndarray
    descriptors: np.ndarray
    descriptor_type: str = "binary"   # "binary" | "float"

    def __post_init__(self):
        if self.descriptor_type not in ("binary", "float"):
            raise FeatureError(f"unknown descriptor type {self.descriptor_type!r}")
        if len(self.keypoints) != len(self.descriptors):
            raise FeatureError("keypoints/descriptors length mismatch")

    def __len__(self):
        return len(self.keypoints)

    @property
    def descriptor_dim(self) -> int:
        if self.descriptor_type == "binary":
            return self.descriptors.shape[1] * 8
        return self.descriptors.shape[1]


@dataclass
class MatchSet:
    """One-to-one keypoint index pairs with descriptor distances."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.idx_a)

    def transposed(self) -> "MatchSet":
        return MatchSet(self.idx_b.copy(), self.idx_a.copy(), self.distance.copy())


def _corner_response(image: np.ndarray) -> np.ndarray:
    """Min-eigenvalue of the smoothed structure tensor (Shi-Tomasi)."""
    img = ndimage.gaussian_filter(image.astype(np.float64) / 255.0, 1.0)
    gy, gx = np.gradient(img)
    ixx = ndimage.gaussian_filter(gx * gx, 1.5)
    iyy = ndimage.gaussian_filter(gy * gy, 1.5)
    ixy = ndimage.gaussian_filter(gx * gy, 1.5)
    half_tr = 0.5 * (ixx + iyy)
    root = np.sqrt(np.maximum(0.25 * (ixx - iyy) ** 2 + ixy ** 2, 0.0))
    return half_tr - root


def _subpixel_peak(resp: np.ndarray, v: int, u: int) -> tuple[float, float]:
    # 1D parabola fit per axis on the 3x3 neighborhood.
    du = dv = 0.0
    c = resp[v, u]
    l, r = resp[v, u - 1], resp[v, u + 1]
    den = l - 2 * c + r
    if den < -1e-18:
        du = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
    t, b = resp[v - 1, u], resp[v + 1, u]
    den = t - 2 * c + b
    if den < -1e-18:
        dv = float(np.clip(0.5 * (t - b) / den, -0.5, 0.5))
    return u + du, v + dv


def detect_and_describe(image: np.ndarray, image_id: str = "",
                        max_features: int = 1000, grid_cells: int = 8,
                        min_response: float = 1e-4) -> FeatureSet:
    """Detect corners and compute 256-bit binary descriptors.

    Local maxima of the corner response are ranked per grid cell (top-k per
    cell, k sized so the grid can fill max_features) to spread keypoints
    across the image, then globally capped at max_features. A flat image
    yields an empty set. Deterministic for fixed input.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise FeatureError(f"expected a non-empty 2D grayscale image, "
                           f"got shape {image.shape}")
    h, w = image.shape
    resp = _corner_response(image)

    border = PATCH_RADIUS + 1
    if h <= 2 * border or w <= 2 * border:
        return _empty_set(image_id)
    interior = np.zeros_like(resp, dtype=bool)
    interior[border:h - border, border:w - border] = True

    is_max = (resp == ndimage.maximum_filter(resp, size=3)) \
        & (resp > min_response) & interior
    vs, us = np.nonzero(is_max)
    if len(us) == 0:
        return _empty_set(image_id)
    scores = resp[vs, us]

    # Per-cell top-k for spatial uniformity.
    g = max(1, int(grid_cells))
    cell = (vs * g // h) * g + (us * g // w)
    k_per_cell = max(1, int(np.ceil(max_features / (g * g))))
    # Sort by (cell, -score, v, u) and keep the first k of each cell.
    order = np.lexsort((us, vs, -scores, cell))
    cell_sorted = cell[order]
    rank = np.arange(len(order))
    starts = np.searchsorted(cell_sorted, np.unique(cell_sorted), side="left")
    within = rank - np.repeat(starts, np.diff(np.append(starts, len(order))))
    keep = order[within < k_per_cell]
    if len(keep) > max_features:
        sub = np.lexsort((us[keep], vs[keep], -scores[keep]))[:max_features]
        keep = keep[sub]

    # Stable output order: by image position.
    keep = keep[np.lexsort((us[keep], vs[keep]))]
    kps = np.array([_subpixel_peak(resp, v, u) for v, u in zip(vs[keep], us[keep])])
    descs = _describe(image, vs[keep], us[keep])
    return FeatureSet(image_id=image_id, keypoints=kps,
                      responses=scores[keep].astype(np.float64),
                      descriptors=descs)


def _empty_set(image_id: str) -> FeatureSet:
    return FeatureSet(image_id=image_id,
                      keypoints=np.zeros((0, 2)),
                      responses=np.zeros(0),
                      descriptors=np.zeros((0, DESCRIPTOR_BITS // 8), dtype=np.uint8))


def _describe(image: np.ndarray, vs: np.ndarray, us: np.ndarray) -> np.ndarray:
    sm = ndimage.gaussian_filter(image.astype(np.float64), 2.0)
    a = sm[vs[:, None] + _PATTERN[None, :, 1], us[:, None] + _PATTERN[None, :, 0]]
    b = sm[vs[:, None] + _PATTERN[None, :, 3], us[:, None] + _PATTERN[None, :, 2]]
    bits = (a < b)
    return np.packbits(bits, axis=1)


RETRIEVAL_SIZE = 32  # global descriptor is a 32x32 normalized thumbnail


def global_descriptor(image: np.ndarray) -> np.ndarray:
    """Compact whole-image descriptor for retrieval: downsampled, blurred,
    intensity-normalized thumbnail, flattened and L2-normalized."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    gy = (np.arange(RETRIEVAL_SIZE) + 0.5) * h / RETRIEVAL_SIZE - 0.5
    gx = (np.arange(RETRIEVAL_SIZE) + 0.5) * w / RETRIEVAL_SIZE - 0.5
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    small = ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    small = ndimage.gaussian_filter(small, 1.0)
    small -= small.mean()
    std = small.std()
    if std > 1e-9:
        small /= std
    vec = small.ravel()
    n = np.linalg.norm(vec)
    if n < 1e-12:
        return np.full(vec.size, 1.0 / np.sqrt(vec.size))
    return vec / n


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, m) Hamming distances between packed-bit descriptor rows."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int32)
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT[x].sum(axis=2).astype(np.int32)


def _distance_matrix(a: FeatureSet, b: FeatureSet) -> np.ndarray:
    if a.descriptor_type == "binary":
        return hamming_matrix(a.descriptors, b.descriptors).astype(np.float64)
    da = a.descriptors.astype(np.float64)
    db = b.descriptors.astype(np.float64)
    d2 = np.sum(da * da, axis=1)[:, None] + np.sum(db * db, axis=1)[None, :] \
        - 2.0 * (da @ db.T)
    return np.sqrt(np.maximum(d2, 0.0))


def match(a: FeatureSet, b: FeatureSet, ratio: float = 0.8) -> MatchSet:
    """Mutual nearest neighbors passing Lowe's ratio test in both directions.

    A pair survives iff each side is the other's nearest neighbor and
    nearest/second-nearest < ratio on both sides. The ratio test is skipped
    when the opposing set has fewer than 2 descriptors; a zero second-best
    distance (duplicate descriptors) rejects the pair as ambiguous. The
    result is injective both ways and symmetric under swapping a and b.
    """
    if a.descriptor_type != b.descriptor_type:
        raise FeatureError(f"descriptor type mismatch: "
                           f"{a.descriptor_type} vs {b.descriptor_type}")
    empty = MatchSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                     np.zeros(0))
    if len(a) == 0 or len(b) == 0:
        return empty
    d = _distance_matrix(a, b)

    def nearest(dist):  # argmin with lowest-index ties, plus second-best value
        best = np.argmin(dist, axis=1)
        n = dist.shape[1]
        if n < 2:
            return best, dist[np.arange(len(best)), best], None
        part = np.partition(dist, 1, axis=1)
        return best, part[:, 0], part[:, 1]

    ab, d1_ab, d2_ab = nearest(d)
    ba, d1_ba, d2_ba = nearest(d.T)

    ia = np.arange(len(a))
    mutual = ba[ab] == ia
    keep = mutual.copy()
    if d2_ab is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            keep &= np.where(d2_ab > 0, d1_ab < ratio * d2_ab, False)
    if d2_ba is not None:
        rb = np.where(d2_ba > 0, d1_ba < ratio * d2_ba, False)
        keep &= rb[ab]
    idx_a = ia[keep]
    idx_b = ab[keep]
    return MatchSet(idx_a.astype(np.int64), idx_b.astype(np.int64),
                    d[idx_a, idx_b])


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform from camera a's frame to camera b's frame."""
    Ra, ta = a.R, a.t
    Rb, tb = b.R, b.t
    R = Rb @ Ra.T
    return Pose.from_matrix(R, tb - R @ ta)


def epipolar_inliers(matches: MatchSet, a: FeatureSet, b: FeatureSet,
                     a_pose: Pose, b_pose: Pose,
                     a_intr: CameraIntrinsics, b_intr: CameraIntrinsics,
                     threshold_px: float = 3.0,
                     min_baseline: float = 1e-9) -> MatchSet:
    """Keep matches consistent with the known relative pose.

    Inlier test: symmetric epipolar distance (max of the two point-to-
    epiline distances) below threshold_px. With zero baseline the epipolar
    geometry is undefined, so all matches are retained.
    """
    if len(matches) == 0:
        return matches
    rel = relative_pose(a_pose, b_pose)
    t = rel.t
    if np.linalg.norm(t) < min_baseline:
        return MatchSet(matches.idx_a.copy(), matches.idx_b.copy(),
                        matches.distance.copy())
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    E = tx @ rel.R
    F = np.linalg.inv(b_intr.K).T @ E @ np.linalg.inv(a_intr.K)

    xa = np.column_stack([a.keypoints[matches.idx_a], np.ones(len(matches))])
    xb = np.column_stack([b.keypoints[matches.idx_b], np.ones(len(matches))])
    la = xa @ F.T          # epiline of a-point in image b
    lb = xb @ F            # epiline of b-point in image a
    val = np.abs(np.einsum("ij,ij->i", xb, la))
    da = val / np.hypot(la[:, 0], la[:, 1])
    db = val / np.hypot(lb[:, 0], lb[:, 1])
    keep = np.maximum(da, db) < threshold_px
    return MatchSet(matches.idx_a[keep], matches.idx_b[keep],
                    matches.distance[keep])


# Feature container format (see docs/formats.md):
#   magic 'LLFEAT01' | u16 version | u8 type (0 binary, 1 float) |
#   u32 dim (bits for binary, components for float) | u32 count |
#   u16 id_len | image id utf-8 | keypoints f8 | responses f8 | descriptors
_FEAT_MAGIC = b"LLFEAT01"
_FEAT_VERSION = 1


class FeatureFormatError(ValueError):
    pass


def export_features(fs: FeatureSet, path) -> None:
    dim = fs.descriptor_dim
    ident = fs.image_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(struct.pack("<HBIIH", _FEAT_VERSION,
                            0 if fs.descriptor_type == "binary" else 1,
                            dim, len(fs), len(ident)))
        f.write(ident)
        f.write(np.ascontiguousarray(fs.keypoints, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(fs.responses, dtype="<f8").tobytes())
        if fs.descriptor_type == "binary":
            f.write(np.ascontiguousarray(fs.descriptors, dtype=np.uint8).tobytes())
        else:
            f.write(np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes())


def import_features(path) -> FeatureSet:
    data = open(path, "rb").read()
    if len(data) < 8 + struct.calcsize("<HBIIH"):
        raise FeatureFormatError(f"{path}: truncated header")
    if data[:8] != _FEAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {data[:8]!r}")
    version, typ, dim, count, id_len = struct.unpack_from("<HBIIH", data, 8)
    if version != _FEAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if typ not in (0, 1):
        raise FeatureFormatError(f"{path}: unknown descriptor type {typ}")
    off = 8 + struct.calcsize("<HBIIH")
    image_id = data[off:off + id_len].decode("utf-8")
    off += id_len
    desc_type = "binary" if typ == 0 else "float"
    if desc_type == "binary":
        if dim % 8:
            raise FeatureFormatError(f"{path}: binary dim {dim} not a multiple of 8")
        desc_bytes = count * (dim // 8)
        desc_dtype, desc_shape = np.uint8, (count, dim // 8)
    else:
        desc_bytes = count * dim * 4
        desc_dtype, desc_shape = np.dtype("<f4"), (count, dim)
    need = off + count * 16 + count * 8 + desc_bytes
    if len(data) < need:
        raise FeatureFormatError(f"{path}: truncated payload "
                                 f"({len(data)} < {need} bytes)")
    kps = np.frombuffer(data, dtype="<f8", count=count * 2,
                        offset=off).reshape(count, 2).copy()
    off += count * 16
    resp = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
    off += count * 8
    descs = np.frombuffer(data, dtype=desc_dtype,
                          count=desc_shape[0] * desc_shape[1],
                          offset=off).reshape(desc_shape).copy()
    return FeatureSet(image_id=image_id, keypoints=kps, responses=resp,
                      descriptors=descs, descriptor_type=desc_type)
