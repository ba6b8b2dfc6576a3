"""The alternating denoiser: gradient ascent on the pixels, one VB sweep per step."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .context import node_stats, reference_matrix
from .gradient import GradientPlan, full_gradient
from .image import as_image
from .quadtree import SegmentationMap, TreeMax, build_tmax, decode_map_segmentation
from .vb import (ModelConfig, PosteriorState, VBNumericalError, conjugate_posterior,
                 objective, vb_sweep)

__all__ = [
    "OptimizerConfig",
    "DenoiseResult",
    "step_size",
    "grid_blocks",
    "init_posterior",
    "denoise",
    "write_trace",
    "run_metadata",
    "dump_metadata",
]

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    """Step schedule ``step_c0 * sigma / (1 + step_c1 * t)`` and stopping rules."""

    step_c0: float = 0.1
    step_c1: float = 0.05
    max_iters: int = 150
    patience: int = 10
    vb_sweeps_per_step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.step_c0 < 0 or self.step_c1 < 0:
            raise ValueError("step_c0 and step_c1 must be nonnegative")
        if self.vb_sweeps_per_step < 1:
            raise ValueError("vb_sweeps_per_step must be >= 1")


@dataclass
class DenoiseResult:
    """Output of :func:`denoise`.

    ``restored`` is the iterate with the best objective in ``trace`` (a list
    of ``(iteration, objective, step_size)``); ``posterior`` is the
    variational state that accompanied it.
    """

    restored: np.ndarray
    posterior: PosteriorState
    trace: list
    segmentation: SegmentationMap
    iterations_run: int
    stopped_early: bool
    tree: TreeMax
    diverged: bool = False
    best_iteration: int = -1
    notes: dict = field(default_factory=dict)


def step_size(t: int, sigma: float, config: OptimizerConfig) -> float:
    return config.step_c0 * sigma / (1.0 + config.step_c1 * t)


def _splits(n: int, parts: int):
    base = n // parts
    edges = [i * base for i in range(parts)] + [n]
    return [(edges[i], edges[i + 1] - edges[i]) for i in range(parts)]


def grid_blocks(height: int, width: int, K: int):
    """Partition the image into ``K`` rectangles laid out on a grid.

    The grid is ``r x (K // r)`` with ``r`` the largest divisor of ``K`` not
    exceeding ``sqrt(K)``; leftover rows and columns go to the last block of
    each axis.  Returns ``(top, left, height, width)`` tuples in raster order.
    """
    r = max(d for d in range(1, math.isqrt(K) + 1) if K % d == 0)
    c = K // r
    if height > width:
        r, c = c, r
    if r > height or c > width:
        raise ValueError(f"cannot split a {height}x{width} image into {r}x{c} blocks")
    return [(t, l, bh, bw) for t, bh in _splits(height, r) for l, bw in _splits(width, c)]


def init_posterior(observed, tree: TreeMax, config: ModelConfig) -> PosteriorState:
    """Initial ``q(theta, tau, pi)``: label ``k`` is fitted to block ``k`` of the
    observed image with the conjugate update, and ``alpha' = alpha``.

    The tree fields stay empty; the first VB action is the ``q(z, T)`` update.
    """
    v = as_image(observed)
    if v.shape != tree.shape:
        raise ValueError(f"image shape {v.shape} does not match tree {tree.shape}")
    h, w = v.shape
    D = config.D
    V = reference_matrix(v, config.template).reshape(h, w, D)
    blocks = grid_blocks(h, w, config.K)
    K = config.K
    lam_p = np.empty((K, D, D))
    lam_inv = np.empty((K, D, D))
    mu_p = np.empty((K, D))
    a_p = np.empty(K)
    b_p = np.empty(K)
    for k, (t, l, bh, bw) in enumerate(blocks):
        Vk = V[t:t + bh, l:l + bw].reshape(-1, D)
        vk = v[t:t + bh, l:l + bw].ravel()
        lam_p[k], lam_inv[k], mu_p[k], a_p[k], b_p[k] = conjugate_posterior(
            config, vk.size, Vk.T @ Vk, Vk.T @ vk, float(vk @ vk))
    return PosteriorState(alpha_prime=config.alpha.copy(), lambda_prime=lam_p,
                          lambda_prime_inv=lam_inv, mu_prime=mu_p, a_prime=a_p, b_prime=b_p)


def denoise(observed, model: ModelConfig, opt: OptimizerConfig | None = None,
            callback=None) -> DenoiseResult:
    """Restore ``observed`` by alternating gradient ascent and VB.

    The pixels start at the observation.  After initialising the posterior
    and one VB sweep, each iteration takes a gradient step, recomputes the
    node statistics, runs ``vb_sweeps_per_step`` sweeps and records the
    objective.  The loop stops after ``max_iters`` iterations or once
    ``patience`` consecutive iterations fail to beat the best objective.

    ``callback(t, v, objective)`` is called after every iteration if given.
    """
    opt = opt or OptimizerConfig()
    vobs = as_image(observed)
    h, w = vobs.shape
    template = model.template
    tree = build_tmax(h, w, model.d_max, model.min_leaf_dim)
    plan = GradientPlan(tree, template)
    sigma = model.sigma

    v = vobs.copy()
    stats = node_stats(v, tree, template)
    post = vb_sweep(tree, stats, init_posterior(vobs, tree, model), model)

    trace = []
    best_obj, best_v, best_post, best_t = -math.inf, v, post, -1
    stale = 0
    stopped_early = diverged = False
    for t in range(opt.max_iters):
        eta = step_size(t, sigma, opt)
        try:
            grad = full_gradient(v, vobs, tree, post, template, model, plan)
            v_new = v + eta * grad
            stats = node_stats(v_new, tree, template)
            post_new = post
            for _ in range(opt.vb_sweeps_per_step):
                post_new = vb_sweep(tree, stats, post_new, model)
            obj = objective(v_new, vobs, tree, stats, post_new, model)
        except (VBNumericalError, FloatingPointError) as exc:
            log.warning("stopping at iteration %d: %s", t, exc)
            diverged = True
            break
        v, post = v_new, post_new
        trace.append((t, obj, eta))
        if callback is not None:
            callback(t, v, obj)
        if obj > best_obj:
            best_obj, best_v, best_post, best_t = obj, v, post, t
            stale = 0
        else:
            stale += 1
            if stale >= opt.patience:
                stopped_early = True
                break
    log.debug("denoise finished after %d iterations (best %d)", len(trace), best_t)

    return DenoiseResult(
        restored=best_v.copy(), posterior=best_post, trace=trace,
        segmentation=decode_map_segmentation(tree, best_post), iterations_run=len(trace),
        stopped_early=stopped_early, tree=tree, diverged=diverged, best_iteration=best_t,
        notes={"objective_evaluated": "after VB sweep"})


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "objective", "step_size"])
        for t, obj, eta in trace:
            wr.writerow([t, repr(float(obj)), repr(float(eta))])


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def run_metadata(model: ModelConfig, opt: OptimizerConfig, result: DenoiseResult | None = None,
                 **extra) -> dict:
    """Config echo plus run outcome, suitable for ``json.dump``."""
    m = {k: _jsonable(v) for k, v in asdict(model).items() if k != "template"}
    m["template_offsets"] = [list(o) for o in model.template.offsets]
    m["boundary_pad"] = model.template.boundary_pad
    meta = {"model": m, "optimizer": asdict(opt), "seed": opt.seed}
    if result is not None:
        meta.update(iterations_run=result.iterations_run, stopped_early=result.stopped_early,
                    diverged=result.diverged, best_iteration=result.best_iteration,
                    **result.notes)
    meta.update({k: _jsonable(v) for k, v in extra.items()})
    return meta


def dump_metadata(meta: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
