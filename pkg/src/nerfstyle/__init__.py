"""Stylized neural radiance fields with a hypernetwork-predicted appearance branch."""

from .config import RunConfig
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DataError,
    DependencyError,
    NerfStyleError,
    NumericError,
    SetupError,
)
from .estimators import GeometryReconstructor, SceneStylizer
from .evaluation import ConsistencyReport, NovelViewPath, consistency_score, geometric_warp, psnr
from .field import FieldSpec, RadianceField
from .hyper import HyperNetwork, count_appearance_params
from .renderer import SampleStrategy, composite, render, render_image
from .scene_io import CameraIntrinsics, CameraPose, MultiViewScene, parse_colmap
from .style_codec import FeatureExtractor, StyleVAE, encode_style
from .trainer import PatchSpec, TrainConfig, run_stage, train_geometry, train_style

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "CheckpointMismatchError",
    "ConfigError",
    "ConsistencyReport",
    "DataError",
    "DependencyError",
    "FeatureExtractor",
    "FieldSpec",
    "GeometryReconstructor",
    "HyperNetwork",
    "MultiViewScene",
    "NerfStyleError",
    "NovelViewPath",
    "NumericError",
    "PatchSpec",
    "RadianceField",
    "RunConfig",
    "SampleStrategy",
    "SceneStylizer",
    "SetupError",
    "StyleVAE",
    "TrainConfig",
    "composite",
    "consistency_score",
    "count_appearance_params",
    "encode_style",
    "geometric_warp",
    "parse_colmap",
    "psnr",
    "render",
    "render_image",
    "run_stage",
    "train_geometry",
    "train_style",
]
