"""Analytic pixel gradient against central differences.

With a single region the analytic gradient is exact everywhere.  With a
deeper tree it is exact only where no pixel in another leaf uses the
perturbed pixel as a neighbour; the script shows both regimes.
"""
import numpy as np

from qtdenoise.context import node_stats
from qtdenoise.denoiser import init_posterior
from qtdenoise.gradient import exact_pixels, fd_gradient, full_gradient
from qtdenoise.quadtree import build_tmax
from qtdenoise.vb import ModelConfig, vb_sweep

rng = np.random.default_rng(0)
observed = rng.uniform(0, 255, (16, 16))
v = observed + rng.normal(scale=3.0, size=observed.shape)

for d_max in (0, 2):
    cfg = ModelConfig(sigma2=25.0, K=4, D=10, d_max=d_max)
    tree = build_tmax(16, 16, d_max, 2)
    post = vb_sweep(tree, node_stats(observed, tree, cfg.template), init_posterior(observed, tree, cfg), cfg)
    ana = full_gradient(v, observed, tree, post, cfg.template, cfg)
    fd = fd_gradient(v, observed, tree, post, cfg, step=1e-3)
    rel = np.abs(ana - fd) / np.maximum(np.maximum(np.abs(ana), np.abs(fd)), 1e-6)
    mask = exact_pixels(tree, cfg.template)
    print(f"d_max={d_max}: max rel. error {rel[mask].max():.1e} on {mask.sum()} exact pixels, "
          f"{rel[~mask].max() if (~mask).any() else 0:.1e} elsewhere")
