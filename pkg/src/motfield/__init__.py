"""motfield: differentiable depth / motion-field estimation engine.

A network-free numpy library implementing a two-stage projection pipeline
(forward splat + per-pixel inverse warp), the full self-supervised loss
stack, a global-context attention block, and a contrastive sample
consensus regularizer, verified by direct gradient-based optimization on
synthetic rigid scenes.
"""

from .grid import Grid, read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from .autodiff import ParamBlock, Var, grad, finite_diff
from .geometry import Intrinsics, RigidMotion, TotalMotionField, compose_total
from .warp import WarpResult, forward_warp, inverse_warp
from .losses import LossWeights, LossReport, total_loss
from .csac import ConsensusConfig, ConsensusResult, DetectionBox, csac_loss, segment
from .attention import DamWeights, DamPair, dam_forward
from .scenegen import Scene, GroundTruth, render
from .optimize import PhasePlan, SceneInputs, init_params, run_schedule
from .evalmetrics import DepthMetrics, depth_metrics, iou, mean_iou, trajectory_errors

__all__ = [
    "ConsensusConfig",
    "ConsensusResult",
    "DamPair",
    "DamWeights",
    "DepthMetrics",
    "DetectionBox",
    "Grid",
    "GroundTruth",
    "Intrinsics",
    "LossReport",
    "LossWeights",
    "ParamBlock",
    "PhasePlan",
    "RigidMotion",
    "Scene",
    "SceneInputs",
    "TotalMotionField",
    "Var",
    "WarpResult",
    "compose_total",
    "csac_loss",
    "dam_forward",
    "depth_metrics",
    "finite_diff",
    "forward_warp",
    "grad",
    "init_params",
    "inverse_warp",
    "iou",
    "mean_iou",
    "read_pfm",
    "read_pgm",
    "read_ppm",
    "render",
    "run_schedule",
    "segment",
    "total_loss",
    "trajectory_errors",
    "write_pfm",
    "write_pgm",
    "write_ppm",
]

__version__ = "0.1.0"
