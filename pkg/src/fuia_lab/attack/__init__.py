"""Federated unlearning inversion attacks and the MUIA baseline."""

from .fuia import fuia_class, fuia_client, fuia_sample
from .inference import DiscriminationScores, infer_class, infer_labels
from .inversion import (
    InversionConfig,
    ReconstructionResult,
    cosine_objective,
    invert_client,
    invert_sample,
    match_images,
    muia_baseline,
    random_init,
)
from .separation import (
    GradientEstimate,
    separate_gradients,
    target_gradient_client,
    target_gradient_sample,
)
from .tv import tv

__all__ = [
    "DiscriminationScores",
    "GradientEstimate",
    "InversionConfig",
    "ReconstructionResult",
    "cosine_objective",
    "fuia_class",
    "fuia_client",
    "fuia_sample",
    "infer_class",
    "infer_labels",
    "invert_client",
    "invert_sample",
    "match_images",
    "muia_baseline",
    "random_init",
    "separate_gradients",
    "target_gradient_client",
    "target_gradient_sample",
    "tv",
]
