"""Image denoising with a quadtree mixture of autoregressive models fitted by variational Bayes."""
from .context import NeighborTemplate, make_template, node_stats
from .denoiser import DenoiseResult, OptimizerConfig, denoise
from .image import add_gaussian_noise, compute_metrics, gaussian_filter, load_image, save_image
from .quadtree import build_tmax, decode_map_segmentation
from .vb import ModelConfig, PosteriorState, run_vb, vb_sweep

__version__ = "0.1.0"

__all__ = [
    "NeighborTemplate", "make_template", "node_stats",
    "DenoiseResult", "OptimizerConfig", "denoise",
    "add_gaussian_noise", "compute_metrics", "gaussian_filter", "load_image", "save_image",
    "build_tmax", "decode_map_segmentation",
    "ModelConfig", "PosteriorState", "run_vb", "vb_sweep",
]
