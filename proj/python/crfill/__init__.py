"""Attention-free gated-convolution inpainting with contextual reconstruction training."""

from ._crfill import (
    Generator,
    blob_mask,
    config_keys,
    irregular_mask,
    l1_error,
    psnr,
    run_cli,
    square_mask,
    ssim,
    synth_texture,
    train,
)

__all__ = [
    "Generator",
    "blob_mask",
    "config_keys",
    "irregular_mask",
    "l1_error",
    "psnr",
    "run_cli",
    "square_mask",
    "ssim",
    "synth_texture",
    "train",
]
