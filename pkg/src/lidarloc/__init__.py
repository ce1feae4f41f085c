"""lidarloc: LiDAR/camera fusion into dense 3D reference maps plus
6-DoF visual localization of query images against them."""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose, pose_error, project, \
    transform_to_camera, viewing_direction
from .hpr import ShellParams, convex_hull_3d, hidden_point_removal, \
    shell_compress
from .pointcloud_io import DatasetManifest, PointCloud, load_manifest, \
    load_ply, save_ply
from .virtualimage import VirtualImage, lookup_3d, render_virtual_image
from .features import FeatureSet, MatchSet, detect_and_describe, \
    epipolar_inliers, export_features, import_features, match
from .rir import ReductionReport, global_similarity, reduce_references
from .refmap import BuildConfig, ReferenceMap, build_reference_map, \
    degrade_reduce_keypoints, degrade_shift_positions, load_map, \
    map_statistics, save_map, validate_map
from .localize import LocalizationResult, LocalizeConfig, RetrievalIndex, \
    ThresholdSet, build_retrieval_index, evaluate, localize_query, \
    ransac_pnp, refine_pose, retrieve, solve_p3p

__all__ = [
    "CameraIntrinsics", "Pose", "pose_error", "project",
    "transform_to_camera", "viewing_direction",
    "ShellParams", "convex_hull_3d", "hidden_point_removal", "shell_compress",
    "DatasetManifest", "PointCloud", "load_manifest", "load_ply", "save_ply",
    "VirtualImage", "lookup_3d", "render_virtual_image",
    "FeatureSet", "MatchSet", "detect_and_describe", "epipolar_inliers",
    "export_features", "import_features", "match",
    "ReductionReport", "global_similarity", "reduce_references",
    "BuildConfig", "ReferenceMap", "build_reference_map",
    "degrade_reduce_keypoints", "degrade_shift_positions", "load_map",
    "map_statistics", "save_map", "validate_map",
    "LocalizationResult", "LocalizeConfig", "RetrievalIndex", "ThresholdSet",
    "build_retrieval_index", "evaluate", "localize_query", "ransac_pnp",
    "refine_pose", "retrieve", "solve_p3p",
]
