"""Stereo matching with depth-aware hierarchy and disparity attention, plus the WRDE metric."""
from .geometry import (
    DepthMap,
    DisparityMap,
    NormalizedDepthMap,
    StereoCalibration,
    depth_to_disparity,
    disparity_to_depth,
    disparity_to_pointcloud,
    normalize_depth_from_metric,
    normalize_depth_labels,
)
from .metrics import (
    BinnedErrorCurve,
    MetricError,
    MetricReport,
    WrdeConfig,
    bin_errors,
    compare_models,
    d1_rate,
    epe,
    evaluate_disparity,
    pixel_error_rate,
    relative_depth_error,
    segment_means,
    wrde,
    wrde_weights,
)
from .model import DVANet, ModelConfig, count_parameters, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
