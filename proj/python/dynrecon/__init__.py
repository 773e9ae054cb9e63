"""Online dynamic 3D reconstruction: tracking, motion scaffolds and Gaussian splatting."""

from ._core import (
    Error,
    ate_rmse,
    config_keys,
    default_config,
    psnr,
    read_depth,
    read_image,
    read_mask,
    read_trajectory,
    render,
    report,
    resolve_config,
    run,
    ssim,
    synthesize,
    umeyama_align,
)

__all__ = [
    "Error",
    "ate_rmse",
    "config_keys",
    "default_config",
    "psnr",
    "read_depth",
    "read_image",
    "read_mask",
    "read_trajectory",
    "render",
    "report",
    "resolve_config",
    "run",
    "ssim",
    "synthesize",
    "umeyama_align",
]
