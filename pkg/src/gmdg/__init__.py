"""Gradient-map guided domain generalization for cross-modal MRI segmentation."""
__version__ = "0.1.0"

from .gmr_core import GradientMap, correlate_1d, gradient_magnitude, gmr, histogram_equalize  # noqa: E402
from .pitta import AdaptationConfig, PITTAAdapter, adapt_image  # noqa: E402
from .train import TrainConfig, compute_class_prior, train  # noqa: E402
from .estimators import GradientMapTransformer, GMRSegmenter, SliceScaler  # noqa: E402

__all__ = [
    "GradientMap", "correlate_1d", "gradient_magnitude", "gmr", "histogram_equalize",
    "AdaptationConfig", "PITTAAdapter", "adapt_image",
    "TrainConfig", "compute_class_prior", "train",
    "GradientMapTransformer", "GMRSegmenter", "SliceScaler",
]
