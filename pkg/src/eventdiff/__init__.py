"""Event-guided video frame interpolation with a hybrid autoencoder and latent diffusion."""

from .events import Event, EventStream, VoxelGrid, scer, split_events, voxelize
from .metrics import MetricReport, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "Event", "EventStream", "VoxelGrid", "scer", "split_events", "voxelize",
    "MetricReport", "psnr", "ssim",
]
