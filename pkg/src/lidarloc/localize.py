"""Online query localization against a built reference map.

Pipeline per query: retrieve top-k reference images with a compact global
descriptor, match query features against each retrieved image, lift the
matches that land on assigned map points into 2D-3D correspondences,
solve robust P3P/RANSAC, refine with damped least squares, and score the
estimate against ground truth at a ladder of (meters, degrees)
thresholds. Everything is seeded and deterministic end to end.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .features import (RETRIEVAL_SIZE, FeatureSet, detect_and_describe,
                       global_descriptor, match)
from .geometry import (CameraIntrinsics, Pose, Z_MIN, pose_error,
                       project_many, rotvec_to_matrix, transform_to_camera)
from .refmap import ReferenceMap, ReferenceRecord

# The seven evaluation thresholds: (translation m, rotation deg).
DEFAULT_THRESHOLDS = ((0.01, 1.0), (0.03, 1.0), (0.05, 1.0), (0.10, 1.0),
                      (0.10, 10.0), (0.25, 10.0), (1.0, 10.0))


class DegenerateCorrespondences(ValueError):
    """Minimal P3P sample is unusable (collinear points, zero-area triangle)."""


@dataclass(frozen=True)
class ThresholdSet:
    """Ordered (translation m, rotation deg) pairs, increasing in dominance."""

    pairs: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        pairs = tuple((float(t), float(r)) for t, r in self.pairs)
        if not pairs:
            raise ValueError("threshold set must be non-empty")
        for (t1, r1), (t2, r2) in zip(pairs, pairs[1:]):
            if t2 < t1 or r2 < r1 or (t2 == t1 and r2 == r1):
                raise ValueError(
                    "thresholds must strictly increase in (translation, "
                    f"rotation) dominance order; {(t1, r1)} -> {(t2, r2)}")
        object.__setattr__(self, "pairs", pairs)

    def labels(self) -> list[str]:
        return [f"{t:g}m/{r:g}deg" for t, r in self.pairs]


@dataclass
class LocalizationResult:
    query_id: str
    pose: Pose | None                  # None = Failure (unlocalized)
    n_correspondences: int
    n_inliers: int
    retrieved: list[str] = field(default_factory=list)
    timing_s: dict = field(default_factory=dict)

    @property
    def localized(self) -> bool:
        return self.pose is not None


@dataclass(frozen=True)
class LocalizeConfig:
    top_k: int = 10
    match_ratio: float = 0.8
    px_threshold: float = 3.0
    max_iters: int = 10000
    confidence: float = 0.999
    min_inliers: int = 12
    seed: int = 0
    max_features: int = 1000
    grid_cells: int = 8
    min_response: float = 1e-4

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "top_k", "match_ratio", "px_threshold", "max_iters",
            "confidence", "min_inliers", "seed", "max_features",
            "grid_cells", "min_response")}


# Retrieval --------------------------------------------------------------

@dataclass
class RetrievalIndex:
    image_ids: list[str]
    descriptors: np.ndarray  # (n, 1024) unit rows


def build_retrieval_index(images: dict[str, np.ndarray]) -> RetrievalIndex:
    ids = sorted(images)
    if not ids:
        return RetrievalIndex(image_ids=[],
                              descriptors=np.zeros((0, RETRIEVAL_SIZE ** 2)))
    descs = np.stack([global_descriptor(images[i]) for i in ids])
    return RetrievalIndex(image_ids=ids, descriptors=descs)


def index_from_map(refmap: ReferenceMap) -> RetrievalIndex | None:
    """Retrieval index from the descriptors stored in the map, if any."""
    ids = [r.image_id for r in refmap.records if r.retrieval is not None]
    if not ids:
        return None
    ids.sort()
    descs = np.stack([refmap.record(i).retrieval for i in ids])
    return RetrievalIndex(image_ids=ids, descriptors=descs)


def retrieve(index: RetrievalIndex, query_descriptor: np.ndarray,
             k: int) -> list[str]:
    """Top-k reference ids by descriptor distance, ties by image id."""
    if not index.image_ids:
        return []
    d = np.linalg.norm(index.descriptors - query_descriptor[None, :], axis=1)
    order = sorted(range(len(d)), key=lambda i: (d[i], index.image_ids[i]))
    return [index.image_ids[i] for i in order[:max(0, int(k))]]


# Minimal solver ----------------------------------------------------------

def solve_p3p(world: np.ndarray, pixels: np.ndarray,
              intr: CameraIntrinsics) -> list[Pose]:
    """All physically valid P3P solutions for 3 correspondences.

    Solves Grunert's distance system: the quartic's coefficients are
    assembled by polynomial arithmetic (no hand-transcribed closed form),
    roots polished by Newton steps, each root converted to point distances
    and an exact 3-point absolute orientation. Returned poses reproject
    the three input points to within solver precision (~1e-9 px); callers
    should still gate on their own tolerance.
    """
    world = np.asarray(world, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    if world.shape != (3, 3) or pixels.shape != (3, 2):
        raise ValueError("solve_p3p needs exactly 3 correspondences")

    cross = np.cross(world[1] - world[0], world[2] - world[0])
    scale = max(np.linalg.norm(world[1] - world[0]),
                np.linalg.norm(world[2] - world[0]), 1e-300)
    if np.linalg.norm(cross) < 1e-10 * scale * scale:
        raise DegenerateCorrespondences("world points are (near-)collinear")

    rays = np.column_stack([(pixels[:, 0] - intr.cx) / intr.fx,
                            (pixels[:, 1] - intr.cy) / intr.fy,
                            np.ones(3)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    a = np.linalg.norm(world[1] - world[2])
    b = np.linalg.norm(world[0] - world[2])
    c = np.linalg.norm(world[0] - world[1])
    if min(a, b, c) < 1e-12:
        raise DegenerateCorrespondences("duplicate world points")
    cos_a = float(rays[1] @ rays[2])
    cos_b = float(rays[0] @ rays[2])
    cos_g = float(rays[0] @ rays[1])

    A_r = (a * a) / (b * b)
    B_r = (c * c) / (b * b)
    q1 = A_r - B_r
    # u(v) numerator N, shared denominator D, and the second constraint E;
    # the quartic is N^2 - 2 cos_g N D + E D^2 = 0 (descending powers).
    N = np.array([q1 - 1.0, -2.0 * q1 * cos_b, q1 + 1.0])
    D = np.array([-2.0 * cos_a, 2.0 * cos_g])
    E = np.array([-B_r, 2.0 * B_r * cos_b, 1.0 - B_r])
    quartic = np.polymul(N, N) - 2.0 * cos_g * np.polymul(N, D) \
        + np.polymul(E, np.polymul(D, D))

    roots = np.roots(quartic)
    dq = np.polyder(quartic)
    poses = []
    seen = []
    for r in roots:
        if abs(r.imag) > 1e-6 * (1.0 + abs(r.real)):
            continue
        v = float(r.real)
        for _ in range(3):  # Newton polish on the real line
            f = float(np.polyval(quartic, v))
            fp = float(np.polyval(dq, v))
            if abs(fp) < 1e-300:
                break
            v -= f / fp
        if v <= 0:
            continue
        den = 2.0 * (cos_g - v * cos_a)
        if abs(den) < 1e-12:
            continue
        u = float(np.polyval(N, v)) / den
        s1_sq = 1.0 + v * v - 2.0 * v * cos_b
        if s1_sq <= 0:
            continue
        s1 = b / math.sqrt(s1_sq)
        s2, s3 = u * s1, v * s1
        if s1 <= 0 or s2 <= 0 or s3 <= 0:
            continue
        cam_pts = rays * np.array([s1, s2, s3])[:, None]
        pose = _absolute_orientation(world, cam_pts)
        key = (round(v, 9), round(u, 9))
        if key in seen:
            continue
        seen.append(key)
        poses.append(pose)
    return poses


def _absolute_orientation(world: np.ndarray, cam: np.ndarray) -> Pose:
    """Exact rigid transform mapping 3 world points onto 3 camera points."""
    wc = world.mean(axis=0)
    cc = cam.mean(axis=0)
    H = (world - wc).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    S = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ S @ U.T
    return Pose.from_matrix(R, cc - R @ wc)


def _reprojection_errors(pose: Pose, world: np.ndarray, pixels: np.ndarray,
                         intr: CameraIntrinsics) -> np.ndarray:
    uv, valid = project_many(intr, transform_to_camera(pose, world))
    err = np.linalg.norm(uv - pixels, axis=1)
    err[~valid] = np.inf
    return err


def ransac_pnp(world: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics,
               px_threshold: float = 3.0, max_iters: int = 10000,
               confidence: float = 0.999, seed: int = 0,
               min_inliers: int = 12, refine: bool = True):
    """Seeded RANSAC over P3P minimal samples.

    Returns (pose, inlier index array) or None on failure (a value, not an
    error: an unlocalized query counts against recall). The reported
    inliers are recomputed under the final refined pose, so every reported
    inlier reprojects within px_threshold of its pixel.
    """
    world = np.asarray(world, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(world)
    if n < 4:
        raise ValueError(f"ransac_pnp needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)

    best_count = 0
    best_pose = None
    iters_needed = max_iters
    it = 0
    while it < min(max_iters, iters_needed):
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            candidates = solve_p3p(world[sample], pixels[sample], intr)
        except DegenerateCorrespondences:
            continue
        for pose in candidates:
            if np.max(_reprojection_errors(pose, world[sample],
                                           pixels[sample], intr)) > 1e-6:
                continue
            err = _reprojection_errors(pose, world, pixels, intr)
            count = int(np.count_nonzero(err < px_threshold))
            if count > best_count:
                best_count = count
                best_pose = pose
                w = count / n
                if w >= 1.0:
                    iters_needed = 0
                elif w > 0:
                    denom = math.log(max(1e-12, 1.0 - w ** 3))
                    iters_needed = min(
                        max_iters,
                        int(math.ceil(math.log(max(1e-12, 1.0 - confidence))
                                      / denom)))
    if best_pose is None or best_count < min_inliers:
        return None

    err = _reprojection_errors(best_pose, world, pixels, intr)
    inliers = np.flatnonzero(err < px_threshold)
    pose = best_pose
    if refine and len(inliers) >= 3:
        pose = refine_pose(pose, world[inliers], pixels[inliers], intr)
        err = _reprojection_errors(pose, world, pixels, intr)
        new_inliers = np.flatnonzero(err < px_threshold)
        if len(new_inliers) >= min_inliers:
            inliers = new_inliers
        else:  # refinement degraded the consensus; keep the RANSAC pose
            pose = best_pose
    if len(inliers) < min_inliers:
        return None
    return pose, inliers


# Nonlinear refinement -----------------------------------------------------

def reprojection_jacobian(pose: Pose, world: np.ndarray, pixels: np.ndarray,
                          intr: CameraIntrinsics):
    """Residuals r (2n,) and Jacobian J (2n, 6) of the reprojection error.

    Local parameterization: delta = (rotation increment w, translation
    increment dt) applied as R' = exp([w]x) R, t' = t + dt. Rows come in
    (du, dv) pairs per correspondence.
    """
    p_cam = transform_to_camera(pose, world)
    z = p_cam[:, 2]
    if np.any(z <= Z_MIN):
        raise ValueError("point at or behind the camera during refinement")
    uv, _ = project_many(intr, p_cam)
    r = (uv - pixels).ravel()

    n = len(world)
    J = np.zeros((2 * n, 6))
    x, y = p_cam[:, 0], p_cam[:, 1]
    inv_z = 1.0 / z
    # d(uv)/d(p_cam)
    du = np.stack([intr.fx * inv_z, np.zeros(n), -intr.fx * x * inv_z ** 2], axis=1)
    dv = np.stack([np.zeros(n), intr.fy * inv_z, -intr.fy * y * inv_z ** 2], axis=1)
    # d(p_cam)/d(w) = -[R p]x, with R p = p_cam - t
    rp = p_cam - pose.t
    dpdw = np.zeros((n, 3, 3))
    dpdw[:, 0, 1] = rp[:, 2]
    dpdw[:, 0, 2] = -rp[:, 1]
    dpdw[:, 1, 0] = -rp[:, 2]
    dpdw[:, 1, 2] = rp[:, 0]
    dpdw[:, 2, 0] = rp[:, 1]
    dpdw[:, 2, 1] = -rp[:, 0]
    J[0::2, :3] = np.einsum("nk,nkj->nj", du, dpdw)
    J[1::2, :3] = np.einsum("nk,nkj->nj", dv, dpdw)
    J[0::2, 3:] = du
    J[1::2, 3:] = dv
    return r, J


def refine_pose(initial: Pose, world: np.ndarray, pixels: np.ndarray,
                intr: CameraIntrinsics, max_iters: int = 50,
                convergence_tol: float = 1e-12) -> Pose:
    """Damped least-squares minimization of total squared reprojection error.

    Levenberg-Marquardt over the 6-parameter local pose increment; the
    final cost never exceeds the initial cost (the best iterate is
    returned). Terminates on step norm below convergence_tol or max_iters.
    """
    world = np.asarray(world, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)

    def cost_of(p: Pose) -> float:
        p_cam = transform_to_camera(p, world)
        if np.any(p_cam[:, 2] <= Z_MIN):
            return float("inf")
        uv, _ = project_many(intr, p_cam)
        return float(np.sum((uv - pixels) ** 2))

    pose = initial
    cost = cost_of(pose)
    best_pose, best_cost = pose, cost
    lam = 1e-3
    for _ in range(max_iters):
        if not np.isfinite(cost):
            break
        r, J = reprojection_jacobian(pose, world, pixels, intr)
        g = J.T @ r
        H = J.T @ J
        if np.linalg.norm(g) < 1e-15:
            break
        stepped = False
        for _ in range(10):  # inner damping search
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12),
                                        -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = Pose.from_matrix(rotvec_to_matrix(delta[:3]) @ pose.R,
                                    pose.t + delta[3:])
            cand_cost = cost_of(cand)
            if cand_cost < cost:
                pose, cost = cand, cand_cost
                if cost < best_cost:
                    best_pose, best_cost = pose, cost
                lam = max(lam / 10, 1e-12)
                stepped = True
                break
            lam *= 10
        if not stepped:
            break
        if np.linalg.norm(delta) < convergence_tol:
            break
    return best_pose


# End-to-end query processing ---------------------------------------------

def _record_feature_set(rec: ReferenceRecord) -> FeatureSet:
    return FeatureSet(image_id=rec.image_id, keypoints=rec.keypoints,
                      responses=rec.responses, descriptors=rec.descriptors,
                      descriptor_type=rec.descriptor_type)


def localize_query(refmap: ReferenceMap, index: RetrievalIndex | None,
                   query_id: str, intr: CameraIntrinsics,
                   image: np.ndarray | None = None,
                   feature_set: FeatureSet | None = None,
                   config: LocalizeConfig = LocalizeConfig()) -> LocalizationResult:
    """Localize one query image (or precomputed FeatureSet) against the map.

    Matches against the top-k retrieved references (all references when no
    retrieval descriptor is available), keeps matches landing on assigned
    map points, deduplicates per query keypoint by best descriptor
    distance, then solves seeded RANSAC-P3P with refinement.
    """
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    if feature_set is None:
        if image is None:
            raise ValueError("need an image or a feature set for the query")
        feature_set = detect_and_describe(
            image, image_id=query_id, max_features=config.max_features,
            grid_cells=config.grid_cells, min_response=config.min_response)
    timing["detect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if index is not None and image is not None:
        retrieved = retrieve(index, global_descriptor(image), config.top_k)
        known = {r.image_id for r in refmap.records}
        retrieved = [r for r in retrieved if r in known]
    else:
        retrieved = [r.image_id for r in refmap.records]
    timing["retrieve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    # query keypoint -> (descriptor distance, world point); keep the best.
    best: dict[int, tuple[float, np.ndarray]] = {}
    for rid in retrieved:
        rec = refmap.record(rid)
        if rec.n_assigned == 0 or len(feature_set) == 0:
            continue
        m = match(feature_set, _record_feature_set(rec), config.match_ratio)
        for qi, ri, dist in zip(m.idx_a, m.idx_b, m.distance):
            if not rec.assigned[ri]:
                continue
            qi = int(qi)
            if qi not in best or dist < best[qi][0]:
                best[qi] = (float(dist), rec.world[ri])
    timing["match"] = time.perf_counter() - t0

    n_corr = len(best)
    result = LocalizationResult(query_id=query_id, pose=None,
                                n_correspondences=n_corr, n_inliers=0,
                                retrieved=list(retrieved), timing_s=timing)
    if n_corr < 4:
        return result

    qids = sorted(best)
    world = np.stack([best[q][1] for q in qids])
    pixels = feature_set.keypoints[qids]
    t0 = time.perf_counter()
    solved = ransac_pnp(world, pixels, intr,
                        px_threshold=config.px_threshold,
                        max_iters=config.max_iters,
                        confidence=config.confidence,
                        seed=config.seed, min_inliers=config.min_inliers)
    timing["pnp"] = time.perf_counter() - t0
    if solved is None:
        return result
    pose, inliers = solved
    result.pose = pose
    result.n_inliers = int(len(inliers))
    return result


@dataclass
class EvalReport:
    thresholds: ThresholdSet
    recalls: list[float]               # fraction per threshold
    mean_rre_deg: float | None         # over localized queries
    n_queries: int
    n_localized: int
    per_query: list[dict]

    def to_json(self) -> dict:
        return {
            "thresholds": [list(p) for p in self.thresholds.pairs],
            "recalls": self.recalls,
            "mean_rre_deg": self.mean_rre_deg,
            "n_queries": self.n_queries,
            "n_localized": self.n_localized,
            "per_query": self.per_query,
        }


def evaluate(results: list[LocalizationResult], truths: dict[str, Pose],
             thresholds: ThresholdSet = ThresholdSet()) -> EvalReport:
    """Recall at every threshold plus the mean relative rotation error.

    A query passes a threshold iff both its translation and rotation
    errors are strictly below it; failures never pass. RRE averages over
    localized queries only. Queries without ground truth are skipped.
    """
    scored = [r for r in results if r.query_id in truths]
    per_query = []
    passes = np.zeros((len(scored), len(thresholds.pairs)), dtype=bool)
    rres = []
    n_localized = 0
    for i, res in enumerate(scored):
        entry = {"query": res.query_id, "localized": res.localized,
                 "n_correspondences": res.n_correspondences,
                 "n_inliers": res.n_inliers}
        if res.localized:
            n_localized += 1
            t_err, r_err = pose_error(res.pose, truths[res.query_id])
            entry["translation_error_m"] = t_err
            entry["rotation_error_deg"] = r_err
            rres.append(r_err)
            for j, (tt, rt) in enumerate(thresholds.pairs):
                passes[i, j] = (t_err < tt) and (r_err < rt)
        per_query.append(entry)
    n = len(scored)
    recalls = [float(np.count_nonzero(passes[:, j])) / n if n else 0.0
               for j in range(len(thresholds.pairs))]
    return EvalReport(thresholds=thresholds, recalls=recalls,
                      mean_rre_deg=(float(np.mean(rres)) if rres else None),
                      n_queries=n, n_localized=n_localized,
                      per_query=per_query)
