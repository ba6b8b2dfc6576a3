"""Analytic gradient of the denoising objective with respect to the pixels,
and a finite-difference harness to check it.

For fixed variational posterior the objective is

    ln p(v' | v) + sum_s q(s leaf) sum_k pi'_{s,k} ( -a'_k / (2 b'_k) ||v_s - V_s mu'_k||^2
                                                     - 1/2 Tr{V_s^T V_s Lambda'_k^-1} ) + const

and its derivative at pixel (i, j) sums over the nodes on the pixel's path,
with reverse references zeroed outside each node.  Pixels in *other* nodes
that reference (i, j) across a node boundary are not part of that sum, so
the analytic and numerical gradients agree exactly only where the reverse
window of a pixel stays inside its deepest ``L_max`` leaf (or leaves the
image).
"""
from __future__ import annotations

import struct

import numpy as np

from .context import NeighborTemplate, node_stats, reference_matrix, reference_vector, reverse_reference
from .quadtree import TreeMax, path_of_pixel
from .vb import ModelConfig, PosteriorState, surrogate_objective

__all__ = [
    "GradientPlan",
    "pixel_gradient",
    "full_gradient",
    "central_difference",
    "fd_gradient",
    "exact_pixels",
    "write_gradient",
    "read_gradient",
]


def pixel_gradient(image, observed, i: int, j: int, tree: TreeMax, posterior: PosteriorState,
                   template: NeighborTemplate, config: ModelConfig) -> float:
    """Derivative of the objective with respect to ``v[i, j]``, evaluated directly
    from reference and reverse-reference vectors on each node of the path."""
    v = np.asarray(image, dtype=np.float64)
    vobs = np.asarray(observed, dtype=np.float64)
    grad = (vobs[i, j] - v[i, j]) / config.sigma2
    ref = reference_vector(v, i, j, template)
    c = posterior.a_prime / posterior.b_prime
    for s in path_of_pixel(tree, i, j):
        rvec, rmat = reverse_reference(v, tree.region(s), i, j, template)
        inner = 0.0
        for k in range(posterior.K):
            mu = posterior.mu_prime[k]
            bracket = v[i, j] - (ref + rvec) @ mu + mu @ rmat @ mu
            inner += posterior.resp[s, k] * (
                -c[k] * bracket - np.trace(rmat @ posterior.lambda_prime_inv[k]))
        grad += posterior.leaf_prob[s] * inner
    if not np.isfinite(grad):
        raise FloatingPointError(f"gradient at pixel ({i}, {j}) is not finite")
    return float(grad)


class GradientPlan:
    """Index tables for :func:`full_gradient` that depend only on the tree and
    the template.

    For every template slot ``d`` and pixel ``p`` whose reverse position
    ``p_d = p - offset_d`` lies in the image, ``lca[d]`` is the deepest node
    containing both ``p`` and ``p_d``.  The nodes of ``path(p)`` that see
    ``p_d`` as in-node are exactly the ancestors of that node.
    """

    def __init__(self, tree: TreeMax, template: NeighborTemplate):
        self.tree = tree
        self.template = template
        h, w = tree.shape
        ii, jj = np.mgrid[0:h, 0:w]
        nad = tree.node_at_depth.reshape(tree.node_at_depth.shape[0], -1)
        self.src, self.dst, self.lca = [], [], []
        for r, cc in template.reverse_offsets:
            pi, pj = ii + r, jj + cc
            ok = ((pi >= 0) & (pi < h) & (pj >= 0) & (pj < w)).ravel()
            p = np.flatnonzero(ok)
            q = (pi * w + pj).ravel()[ok]
            lca = np.zeros(p.size, dtype=np.int64)
            for depth in range(nad.shape[0]):
                same = (nad[depth, p] == nad[depth, q]) & (nad[depth, p] >= 0)
                lca = np.where(same, nad[depth, p], lca)
            self.src.append(p)
            self.dst.append(q)
            self.lca.append(lca)
        self.leaf = tree.leaf_map.ravel()

    def cumulative_weights(self, posterior: PosteriorState) -> np.ndarray:
        """``sum`` of ``q(s' leaf) pi'_{s'}`` over ``s'`` from the root down to each node."""
        tree = self.tree
        cw = posterior.leaf_prob[:, None] * posterior.resp
        for level in tree.levels:
            internal = level[~tree.is_leaf[level]]
            if internal.size:
                cw[tree.children[internal]] += cw[internal][:, None, :]
        return cw


def full_gradient(image, observed, tree: TreeMax, posterior: PosteriorState,
                  template: NeighborTemplate, config: ModelConfig,
                  plan: GradientPlan | None = None) -> np.ndarray:
    """Gradient of the objective at every pixel, shape ``(h, w)``."""
    v = np.asarray(image, dtype=np.float64)
    vobs = np.asarray(observed, dtype=np.float64)
    if plan is None or plan.tree is not tree or plan.template != template:
        plan = GradientPlan(tree, template)
    V = reference_matrix(v, template)
    vf = v.ravel()
    mu = posterior.mu_prime
    c = posterior.a_prime / posterior.b_prime
    cw = plan.cumulative_weights(posterior)

    E = vf[:, None] - V @ mu.T  # prediction residual per pixel and label
    grad = (vobs - v).ravel() / config.sigma2
    grad -= np.einsum("pk,pk->p", cw[plan.leaf], E * c[None, :])
    for d in range(template.D - 1):
        src, dst, lca = plan.src[d], plan.dst[d], plan.lca[d]
        Vd = V[dst]
        H = E[dst] * (c * mu[:, d])[None, :] - Vd @ posterior.lambda_prime_inv[:, :, d].T
        grad[src] += np.einsum("pk,pk->p", cw[lca], H)
    grad = grad.reshape(v.shape)
    if not np.all(np.isfinite(grad)):
        i, j = np.argwhere(~np.isfinite(grad))[0]
        raise FloatingPointError(f"gradient at pixel ({i}, {j}) is not finite")
    return grad


def exact_pixels(tree: TreeMax, template: NeighborTemplate) -> np.ndarray:
    """Mask of pixels whose in-image reverse positions all share the pixel's ``L_max`` leaf.

    At these pixels :func:`full_gradient` is the exact derivative of
    :func:`~qtdenoise.vb.surrogate_objective`.
    """
    h, w = tree.shape
    ok = np.ones((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            leaf = tree.leaf_map[i, j]
            for r, c in template.reverse_offsets:
                pi, pj = i + r, j + c
                if 0 <= pi < h and 0 <= pj < w and tree.leaf_map[pi, pj] != leaf:
                    ok[i, j] = False
                    break
    return ok


def central_difference(func, image, step: float = 1e-3, pixels=None) -> np.ndarray:
    """Central differences of scalar ``func(image)`` at each pixel (or at ``pixels``).

    Entries not listed in ``pixels`` are NaN.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    v = np.array(image, dtype=np.float64)
    out = np.full(v.shape, np.nan)
    if pixels is None:
        pixels = np.ndindex(*v.shape)
    for i, j in pixels:
        orig = v[i, j]
        v[i, j] = orig + step
        fp = func(v)
        v[i, j] = orig - step
        fm = func(v)
        v[i, j] = orig
        out[i, j] = (fp - fm) / (2.0 * step)
    return out


def fd_gradient(image, observed, tree: TreeMax, posterior: PosteriorState,
                config: ModelConfig, step: float = 1e-3, pixels=None) -> np.ndarray:
    """Finite-difference gradient of the surrogate objective at fixed posterior,
    recomputing node statistics for every perturbed image."""
    template = config.template

    def objective(v):
        return surrogate_objective(v, observed, posterior, node_stats(v, tree, template), config)

    return central_difference(objective, image, step, pixels)


_MAGIC = b"QTGRAD01"


def write_gradient(grad, path) -> None:
    """Binary dump: 8-byte magic, uint32 height, uint32 width, float64 data (little endian)."""
    g = np.ascontiguousarray(grad, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", *g.shape))
        fh.write(g.tobytes())


def read_gradient(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != _MAGIC:
            raise ValueError(f"{path}: not a gradient dump")
        h, w = struct.unpack("<II", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)
