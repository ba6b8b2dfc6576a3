import os

import numpy as np
import pytest

from qtdenoise.context import make_template, node_stats
from qtdenoise.denoiser import init_posterior
from qtdenoise.quadtree import build_tmax
from qtdenoise.vb import ModelConfig, vb_sweep

DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_problem(seed=0, size=16, d_max=2, K=4, D=4, sigma=5.0, sweeps=3):
    """Random textured image with a warmed-up posterior on a shallow tree."""
    r = np.random.default_rng(seed)
    clean = 100 + 30 * np.sin(np.arange(size)[:, None] / 3.0) + 20 * r.standard_normal((size, size))
    noisy = clean + sigma * r.standard_normal((size, size))
    cfg = ModelConfig(sigma2=sigma ** 2, K=K, D=D, d_max=d_max, template=make_template(D))
    tree = build_tmax(size, size, d_max, 2)
    stats = node_stats(noisy, tree, cfg.template)
    post = init_posterior(noisy, tree, cfg)
    for _ in range(sweeps):
        post = vb_sweep(tree, stats, post, cfg)
    return noisy, tree, stats, post, cfg


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
