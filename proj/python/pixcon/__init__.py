"""Python bindings for the pixcon segmentation library."""

from ._pixcon import (
    IGNORE,
    PixconError,
    batch_loss,
    check_loss_gradients,
    config_keys,
    cross_entropy,
    cross_image_loss,
    generate_synthetic,
    miou,
    run_pipeline,
    threshold_scores,
    within_image_loss,
)

__all__ = [
    "IGNORE",
    "PixconError",
    "batch_loss",
    "check_loss_gradients",
    "config_keys",
    "cross_entropy",
    "cross_image_loss",
    "generate_synthetic",
    "miou",
    "run_pipeline",
    "threshold_scores",
    "within_image_loss",
]
