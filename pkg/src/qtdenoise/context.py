"""Causal neighbourhood templates and the autoregressive sufficient statistics.

A template lists ``D - 1`` causal offsets (raster order); the reference
vector of a pixel holds the neighbours at those offsets followed by a
constant 1.  Neighbours outside the image read ``boundary_pad``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadtree import Region, TreeMax

__all__ = [
    "NeighborTemplate",
    "RegionStats",
    "NodeStats",
    "make_template",
    "reference_vector",
    "reference_matrix",
    "reverse_reference",
    "region_stats",
    "node_stats",
    "format_template",
    "parse_template",
    "load_template",
]

_BUILTIN_OFFSETS = {
    2: ((0, -1),),
    4: ((0, -1), (-1, 1), (-1, 0)),
    10: ((0, -1), (0, -2), (-1, -2), (-1, -1), (-1, 0), (-1, 1), (-1, 2), (-2, -1), (-2, 0)),
}


@dataclass(frozen=True)
class NeighborTemplate:
    """Ordered causal offsets ``(row, col)``; the constant slot is implicit and last."""

    offsets: tuple
    boundary_pad: float = 128.0

    def __post_init__(self):
        offs = tuple((int(r), int(c)) for r, c in self.offsets)
        object.__setattr__(self, "offsets", offs)
        for r, c in offs:
            if not (r < 0 or (r == 0 and c < 0)):
                raise ValueError(f"offset ({r}, {c}) is not causal in raster order")
        if len(set(offs)) != len(offs):
            raise ValueError(f"duplicate offsets in template {offs}")

    @property
    def D(self) -> int:
        return len(self.offsets) + 1

    @property
    def reverse_offsets(self) -> tuple:
        """Point reflections ``(-r, -c)``: where the pixels that reference us live."""
        return tuple((-r, -c) for r, c in self.offsets)

    @property
    def margin(self) -> int:
        return max([abs(v) for off in self.offsets for v in off], default=0)


def make_template(D: int, boundary_pad: float = 128.0) -> NeighborTemplate:
    """Built-in template of dimension ``D`` (2, 4 or 10)."""
    try:
        offs = _BUILTIN_OFFSETS[D]
    except KeyError:
        raise ValueError(
            f"no built-in template for D={D} (choose from {sorted(_BUILTIN_OFFSETS)}, "
            "or pass custom offsets to NeighborTemplate)") from None
    return NeighborTemplate(offs, float(boundary_pad))


def reference_vector(image, i: int, j: int, template: NeighborTemplate) -> np.ndarray:
    """Regressor of pixel ``(i, j)``: neighbour values then the constant 1."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"pixel ({i}, {j}) outside {h}x{w} image")
    out = np.empty(template.D)
    for d, (r, c) in enumerate(template.offsets):
        ii, jj = i + r, j + c
        out[d] = img[ii, jj] if (0 <= ii < h and 0 <= jj < w) else template.boundary_pad
    out[-1] = 1.0
    return out


def reference_matrix(image, template: NeighborTemplate) -> np.ndarray:
    """All reference vectors in raster order, shape ``(h * w, D)``."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    m = template.margin
    padded = np.pad(img, m, mode="constant", constant_values=template.boundary_pad)
    V = np.empty((h * w, template.D))
    for d, (r, c) in enumerate(template.offsets):
        V[:, d] = padded[m + r:m + r + h, m + c:m + c + w].ravel()
    V[:, -1] = 1.0
    return V


def reverse_reference(image, region: Region, i: int, j: int, template: NeighborTemplate):
    """Reverse reference vector and matrix of ``(i, j)`` within ``region``.

    Slot ``d`` corresponds to the pixel ``p_d = (i, j) - offset_d`` that reads
    ``v[i, j]`` through template slot ``d``.  The vector holds ``v[p_d]`` and
    matrix row ``d`` holds ``reference_vector(p_d)``; both are zero when
    ``p_d`` falls outside the region, and the constant slot/row is zero.
    """
    region = Region(*region)
    if not region.contains(i, j):
        raise IndexError(f"pixel ({i}, {j}) outside node region {tuple(region)}")
    img = np.asarray(image, dtype=np.float64)
    D = template.D
    vec = np.zeros(D)
    mat = np.zeros((D, D))
    for d, (r, c) in enumerate(template.reverse_offsets):
        pi, pj = i + r, j + c
        if region.contains(pi, pj):
            vec[d] = img[pi, pj]
            mat[d] = reference_vector(img, pi, pj, template)
    return vec, mat


@dataclass(frozen=True)
class RegionStats:
    """Sufficient statistics ``V^T V``, ``V^T v``, ``v^T v`` and pixel count of one region."""

    n: int
    gram: np.ndarray
    cross: np.ndarray
    sqnorm: float


def region_stats(image, region: Region, template: NeighborTemplate) -> RegionStats:
    img = np.asarray(image, dtype=np.float64)
    region = Region(*region)
    h, w = img.shape
    if (region.top < 0 or region.left < 0 or region.bottom > h or region.right > w
            or region.height < 1 or region.width < 1):
        raise ValueError(f"region {tuple(region)} exceeds {h}x{w} image")
    V = reference_matrix(img, template).reshape(h, w, -1)
    V = V[region.top:region.bottom, region.left:region.right].reshape(-1, template.D)
    v = img[region.top:region.bottom, region.left:region.right].ravel()
    return RegionStats(region.area, V.T @ V, V.T @ v, float(v @ v))


class NodeStats:
    """Stacked :class:`RegionStats` for every node of a tree.

    Leaf statistics are accumulated from pixels; each internal node is the sum
    of its four children, which is exact because reference vectors are read
    image-globally.
    """

    def __init__(self, n, gram, cross, sqnorm):
        self.n = n
        self.gram = gram
        self.cross = cross
        self.sqnorm = sqnorm

    def __len__(self):
        return self.n.size

    def __getitem__(self, s) -> RegionStats:
        return RegionStats(int(self.n[s]), self.gram[s], self.cross[s], float(self.sqnorm[s]))


def node_stats(image, tree: TreeMax, template: NeighborTemplate, V=None) -> NodeStats:
    """Statistics of all nodes of ``tree`` for ``image``."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != tree.shape:
        raise ValueError(f"image shape {img.shape} does not match tree {tree.shape}")
    if V is None:
        V = reference_matrix(img, template)
    v = img.ravel()
    D = template.D
    S = tree.n_nodes

    order = np.argsort(tree.leaf_map.ravel(), kind="stable")
    sorted_leaf = tree.leaf_map.ravel()[order]
    starts = np.flatnonzero(np.r_[True, sorted_leaf[1:] != sorted_leaf[:-1]])
    leaf_ids = sorted_leaf[starts]
    Vs, vs = V[order], v[order]

    gram = np.zeros((S, D, D))
    cross = np.zeros((S, D))
    sqnorm = np.zeros(S)
    gram[leaf_ids] = np.add.reduceat(Vs[:, :, None] * Vs[:, None, :], starts, axis=0)
    cross[leaf_ids] = np.add.reduceat(Vs * vs[:, None], starts, axis=0)
    sqnorm[leaf_ids] = np.add.reduceat(vs * vs, starts)

    for level in reversed(tree.levels[:-1]):
        internal = level[~tree.is_leaf[level]]
        if internal.size:
            kids = tree.children[internal]
            gram[internal] = gram[kids].sum(axis=1)
            cross[internal] = cross[kids].sum(axis=1)
            sqnorm[internal] = sqnorm[kids].sum(axis=1)
    return NodeStats(tree.area.astype(np.float64), gram, cross, sqnorm)


def format_template(template: NeighborTemplate) -> str:
    lines = [f"{r} {c}" for r, c in template.offsets]
    lines.append(f"pad {template.boundary_pad!r}")
    return "\n".join(lines) + "\n"


def parse_template(text: str) -> NeighborTemplate:
    """Parse ``dr dc`` lines plus an optional ``pad <value>`` line."""
    offsets, pad = [], 128.0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "pad" and len(parts) == 2:
                pad = float(parts[1])
            elif len(parts) == 2:
                offsets.append((int(parts[0]), int(parts[1])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"template line {lineno}: cannot parse {raw!r}") from None
    if not offsets:
        raise ValueError("template lists no offsets")
    return NeighborTemplate(tuple(offsets), pad)


def load_template(path) -> NeighborTemplate:
    with open(path) as fh:
        return parse_template(fh.read())
