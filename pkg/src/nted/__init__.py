"""Factored texture-attention kernel, a toy pose-guided renderer and appearance editing."""

from .kernel import (
    FeatureMap,
    Projection,
    account_cost,
    distribute,
    extract,
    materialize_deformation,
    nted_warp,
    vanilla_attention,
)

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "Projection",
    "account_cost",
    "distribute",
    "extract",
    "materialize_deformation",
    "nted_warp",
    "vanilla_attention",
]
