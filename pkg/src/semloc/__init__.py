"""Semantic HD-map localization with a synthetic closed-loop simulator."""

__version__ = "0.1.0"

from .config import PipelineConfig, WorldGenConfig, load_run_config, load_world_config  # noqa: F401
from .geometry import CameraModel, EulerPose, Pose  # noqa: F401
from .initializer import default_grid  # noqa: F401
from .pipeline import PipelineResult, init_success_rate, run_pipeline, run_sequence  # noqa: F401
from .posegraph import GraphConfig  # noqa: F401
from .rpe import Trajectory, compute_rpe, load_trajectory, save_trajectory  # noqa: F401
