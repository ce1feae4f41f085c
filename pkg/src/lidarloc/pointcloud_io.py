"""Point-cloud and dataset-metadata ingestion in bit-exact file formats.

Supports PLY 1.0 in ``ascii`` and ``binary_little_endian`` flavors with
float32/float64 x, y, z and optional uchar red/green/blue per vertex.
Unknown fixed-size vertex properties are skipped by size; big-endian files
and list properties in the vertex element are rejected outright so the
parser stays small and bit-exactness stays testable.

The dataset manifest is a JSON file tying one cloud to posed reference and
query images; see docs/formats.md for the schema.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose

logger = logging.getLogger(__name__)

# Quaternions further than this from unit norm are rejected rather than
# silently normalized; smaller deviations are treated as serialization noise.
QUAT_NORM_REJECT = 1e-3


class PlyError(ValueError):
    """Base PLY parsing failure; carries the byte offset of the problem."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class PlyHeaderError(PlyError):
    pass


class PlyLayoutError(PlyError):
    """Header parsed, but the element/property layout is unsupported."""


class PlyTruncatedError(PlyError):
    pass


class ManifestError(ValueError):
    pass


_PLY_SCALAR_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}

_PLY_TO_NUMPY = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PointCloud:
    """Registered LiDAR map: (n, 3) float64 points, optional (n, 3) uint8 colors.

    The stable integer id of a point is its array index. ``dropped_nonfinite``
    counts points removed at load time because of NaN/Inf coordinates.
    """

    points: np.ndarray
    colors: np.ndarray | None = None
    dropped_nonfinite: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8)
            if self.colors.shape != self.points.shape:
                raise ValueError("colors must match points in shape")

    def __len__(self):
        return len(self.points)


def _drop_nonfinite(points, colors):
    finite = np.all(np.isfinite(points), axis=1)
    dropped = int(len(points) - finite.sum())
    if dropped:
        logger.warning("dropped %d non-finite points while loading cloud", dropped)
        points = points[finite]
        if colors is not None:
            colors = colors[finite]
    return points, colors, dropped


def _parse_ply_header(data: bytes, path):
    """Returns (fmt, n_vertices, properties, payload_offset)."""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise PlyHeaderError(f"{path}: missing 'ply' magic", 0)
    if end < 0:
        raise PlyHeaderError(f"{path}: missing 'end_header'", len(data))
    header = data[:end].decode("ascii", errors="replace")
    payload_offset = end + len(b"end_header\n")

    fmt = None
    n_vertices = None
    properties = []  # (name, ply_type) of the vertex element
    in_vertex = False
    seen_vertex = False
    offset = 0
    for line in header.splitlines():
        line_offset = offset
        offset += len(line) + 1
        tokens = line.strip().split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "ply":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise PlyHeaderError(f"{path}: bad format line", line_offset)
            fmt = tokens[1]
            if fmt == "binary_big_endian":
                raise PlyLayoutError(
                    f"{path}: binary_big_endian is not supported", line_offset)
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyHeaderError(f"{path}: unknown format '{fmt}'", line_offset)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyHeaderError(f"{path}: bad element line", line_offset)
            if tokens[1] == "vertex":
                if seen_vertex:
                    raise PlyLayoutError(f"{path}: duplicate vertex element", line_offset)
                in_vertex = True
                seen_vertex = True
                try:
                    n_vertices = int(tokens[2])
                except ValueError:
                    raise PlyHeaderError(f"{path}: bad vertex count", line_offset)
                if n_vertices < 0:
                    raise PlyHeaderError(f"{path}: negative vertex count", line_offset)
            else:
                if not seen_vertex:
                    # Non-vertex payload would precede the vertices; skipping
                    # it needs knowledge we do not have.
                    raise PlyLayoutError(
                        f"{path}: element '{tokens[1]}' precedes vertex element",
                        line_offset)
                in_vertex = False
        elif tokens[0] == "property":
            if not in_vertex:
                continue  # trailing elements are never read
            if tokens[1] == "list":
                raise PlyLayoutError(
                    f"{path}: list property in vertex element", line_offset)
            if len(tokens) != 3:
                raise PlyHeaderError(f"{path}: bad property line", line_offset)
            ptype, name = tokens[1], tokens[2]
            if ptype not in _PLY_SCALAR_SIZES:
                raise PlyLayoutError(
                    f"{path}: unknown property type '{ptype}'", line_offset)
            properties.append((name, ptype))
        elif tokens[0] == "end_header":
            break
        else:
            raise PlyHeaderError(f"{path}: unrecognized header line '{line}'",
                                 line_offset)

    if fmt is None:
        raise PlyHeaderError(f"{path}: missing format line", payload_offset)
    if n_vertices is None:
        raise PlyLayoutError(f"{path}: no vertex element", payload_offset)
    names = [n for n, _ in properties]
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise PlyLayoutError(f"{path}: vertex element lacks '{coord}'",
                                 payload_offset)
        if properties[names.index(coord)][1] not in ("float", "float32",
                                                     "double", "float64"):
            raise PlyLayoutError(f"{path}: '{coord}' must be float32/float64",
                                 payload_offset)
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    if has_rgb:
        for c in ("red", "green", "blue"):
            if properties[names.index(c)][1] not in ("uchar", "uint8"):
                has_rgb = False
    return fmt, n_vertices, properties, payload_offset, has_rgb


def load_ply(path) -> PointCloud:
    """Load an ASCII or binary-little-endian PLY point cloud.

    Point order in the file is preserved (minus dropped non-finite points);
    malformed input raises a PlyError subclass carrying a byte offset.
    """
    path = Path(path)
    data = path.read_bytes()
    fmt, n, properties, payload_offset, has_rgb = _parse_ply_header(data, path)
    names = [p[0] for p in properties]

    if fmt == "binary_little_endian":
        dtype = np.dtype([(f"f{i}", "<" + _PLY_TO_NUMPY[t])
                          for i, (_, t) in enumerate(properties)])
        need = n * dtype.itemsize
        if len(data) - payload_offset < need:
            raise PlyTruncatedError(
                f"{path}: payload holds {(len(data) - payload_offset) // max(dtype.itemsize, 1)}"
                f" of {n} declared vertices", len(data))
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=payload_offset)
        cols = {name: rec[f"f{i}"] for i, name in enumerate(names)}
    else:
        text = data[payload_offset:].decode("ascii", errors="replace")
        rows = text.split("\n")
        values = []
        consumed = 0
        for row in rows:
            if consumed == n:
                break
            stripped = row.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) < len(properties):
                raise PlyTruncatedError(
                    f"{path}: vertex row {consumed} has {len(parts)} of "
                    f"{len(properties)} values", payload_offset)
            values.append(parts[:len(properties)])
            consumed += 1
        if consumed < n:
            raise PlyTruncatedError(
                f"{path}: payload holds {consumed} of {n} declared vertices",
                len(data))
        arr = np.asarray(values, dtype=np.float64) if values else \
            np.zeros((0, len(properties)))
        cols = {name: arr[:, i] for i, name in enumerate(names)}

    points = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    colors = None
    if has_rgb:
        colors = np.column_stack([cols["red"], cols["green"], cols["blue"]])
        colors = colors.astype(np.uint8)
    points, colors, dropped = _drop_nonfinite(points, colors)
    return PointCloud(points=points, colors=colors, dropped_nonfinite=dropped)


def save_ply(cloud: PointCloud, path, format: str = "binary") -> None:
    """Write a cloud as PLY. Binary mode preserves float64 bits exactly;
    ASCII mode prints 17 significant digits (round-trip exact for float64).
    """
    if format not in ("ascii", "binary"):
        raise ValueError(f"format must be 'ascii' or 'binary', got {format!r}")
    path = Path(path)
    has_rgb = cloud.colors is not None
    fmt_name = "ascii" if format == "ascii" else "binary_little_endian"
    lines = ["ply", f"format {fmt_name} 1.0", f"element vertex {len(cloud)}"]
    ctype = "double"
    lines += [f"property {ctype} x", f"property {ctype} y", f"property {ctype} z"]
    if has_rgb:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        if format == "binary":
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if has_rgb:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(len(cloud), dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = cloud.points.T
            if has_rgb:
                rec["red"], rec["green"], rec["blue"] = cloud.colors.T
            f.write(rec.tobytes())
        else:
            out = []
            for i in range(len(cloud)):
                x, y, z = cloud.points[i]
                row = f"{x:.17g} {y:.17g} {z:.17g}"
                if has_rgb:
                    r, g, b = cloud.colors[i]
                    row += f" {r} {g} {b}"
                out.append(row)
            f.write(("\n".join(out) + ("\n" if out else "")).encode("ascii"))


@dataclass(frozen=True)
class ImageRecord:
    """One posed image within a dataset."""

    image: str                       # path relative to the manifest
    intrinsics: CameraIntrinsics
    pose: Pose | None                # ground truth may be absent for queries

    def image_path(self, root: Path) -> Path:
        return root / self.image


@dataclass
class DatasetManifest:
    """Validated dataset: one cloud, posed references, queries."""

    cloud_path: Path
    references: list[ImageRecord]
    queries: list[ImageRecord]
    root: Path = field(default_factory=Path)

    def reference_by_id(self, image_id: str) -> ImageRecord:
        for r in self.references:
            if r.image == image_id:
                return r
        raise KeyError(image_id)


def _parse_record(obj: dict, idx: int, kind: str, require_pose: bool) -> ImageRecord:
    for key in ("image", "intrinsics"):
        if key not in obj:
            raise ManifestError(f"{kind}[{idx}]: missing field '{key}'")
    pose = None
    if "q" in obj or "t" in obj:
        for key in ("q", "t"):
            if key not in obj:
                raise ManifestError(f"{kind}[{idx}]: missing field '{key}'")
        q = np.asarray(obj["q"], dtype=np.float64)
        t = np.asarray(obj["t"], dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ManifestError(f"{kind}[{idx}]: q must be a 4-array and t a 3-array")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUAT_NORM_REJECT:
            raise ManifestError(
                f"{kind}[{idx}]: quaternion norm {norm:.6g} deviates from 1 "
                f"by more than {QUAT_NORM_REJECT}")
        pose = Pose(q, t)  # normalizes the residual drift
    elif require_pose:
        raise ManifestError(f"{kind}[{idx}]: missing pose fields 'q'/'t'")
    try:
        intr = CameraIntrinsics.from_json(obj["intrinsics"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{kind}[{idx}]: bad intrinsics: {e}") from e
    return ImageRecord(image=str(obj["image"]), intrinsics=intr, pose=pose)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load and fully validate a dataset manifest JSON.

    All referenced files must exist (poses are checked for unit quaternions,
    image names for uniqueness). Paths are resolved relative to the manifest.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON: {e}") from e
    for key in ("cloud", "references", "queries"):
        if key not in obj:
            raise ManifestError(f"{path}: missing field '{key}'")
    root = path.parent
    references = [_parse_record(r, i, "references", require_pose=True)
                  for i, r in enumerate(obj["references"])]
    queries = [_parse_record(r, i, "queries", require_pose=False)
               for i, r in enumerate(obj["queries"])]
    names = [r.image for r in references] + [r.image for r in queries]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ManifestError(f"{path}: duplicate image names: {sorted(dupes)}")
    cloud_path = root / str(obj["cloud"])
    if check_files:
        missing = [str(p) for p in [cloud_path]
                   + [r.image_path(root) for r in references + queries]
                   if not Path(p).exists()]
        if missing:
            raise ManifestError(f"{path}: missing referenced files: {missing}")
    return DatasetManifest(cloud_path=cloud_path, references=references,
                           queries=queries, root=root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    def rec_json(r: ImageRecord) -> dict:
        out = {"image": r.image, "intrinsics": r.intrinsics.to_json()}
        if r.pose is not None:
            out.update(r.pose.to_json())
        return out

    path = Path(path)
    obj = {
        "cloud": str(Path(manifest.cloud_path).relative_to(path.parent)
                     if Path(manifest.cloud_path).is_absolute() else manifest.cloud_path),
        "references": [rec_json(r) for r in manifest.references],
        "queries": [rec_json(r) for r in manifest.queries],
    }
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
