"""RGB-D SLAM over a 4D (space-time) Gaussian splat map for dynamic scenes."""

from .camera import CameraPose, Intrinsics
from .gaussians import (
    Gaussian3DConditional,
    Gaussian4D,
    GaussianMap,
    build_covariance,
    condition_at_time,
    eval_density,
)
from .info import Anchor, FileTrackProvider, OracleTrackProvider, TrackRecord, select_anchors
from .keyframing import Keyframe, covisibility, maintain_window, should_insert_keyframe
from .mapping import MappingConfig, insert_gaussians, iso_regularizer, optimize_window, prune_gaussians
from .metrics import TrajectoryPair, ate_rmse, psnr, ssim
from .renderer import RenderedFrame, RenderGradients, project_conditional, render, render_gradients
from .simulator import SceneSpec, default_scene_spec, generate
from .tracking import FilterThresholds, TrackingResult, estimate_pose, filter_tracks, replenish_anchors

__version__ = "0.1.0"
