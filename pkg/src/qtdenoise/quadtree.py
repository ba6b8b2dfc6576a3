"""Complete quadtree over the image grid, pixel paths and MAP segmentation decoding."""
from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image

__all__ = [
    "Region",
    "TreeMax",
    "SegmentationMap",
    "build_tmax",
    "path_of_pixel",
    "split_prior",
    "tree_log_prior",
    "decode_map_segmentation",
    "label_palette",
    "save_segmentation",
]


class Region(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, i: int, j: int) -> bool:
        return self.top <= i < self.bottom and self.left <= j < self.right


class TreeMax:
    """The full quadtree ``T_max`` stored as flat per-node arrays.

    Nodes are numbered in breadth-first order, so every parent precedes its
    children and ``levels[d]`` lists the nodes at depth ``d``.

    Attributes
    ----------
    top, left, height, width, depth : ndarray of int, shape (n_nodes,)
    parent : ndarray of int
        Parent index, ``-1`` for the root.
    children : ndarray of int, shape (n_nodes, 4)
        Child indices (top-left, top-right, bottom-left, bottom-right) or ``-1``.
    is_leaf : ndarray of bool
        Membership in ``L_max``.
    leaf_map : ndarray of int, shape (height, width)
        The ``L_max`` leaf that contains each pixel.
    node_at_depth : ndarray of int, shape (n_levels, height, width)
        Node at each depth on the pixel's path, ``-1`` below its leaf.
    """

    def __init__(self, shape, d_max, min_leaf_dim, top, left, height, width, depth,
                 parent, children):
        self.shape = tuple(shape)
        self.d_max = d_max
        self.min_leaf_dim = min_leaf_dim
        self.top = top
        self.left = left
        self.height = height
        self.width = width
        self.depth = depth
        self.parent = parent
        self.children = children
        self.is_leaf = children[:, 0] < 0
        self.root = 0
        n_levels = int(depth.max()) + 1
        self.levels = [np.flatnonzero(depth == d) for d in range(n_levels)]

        h, w = self.shape
        self.node_at_depth = np.full((n_levels, h, w), -1, dtype=np.int64)
        for s in range(self.n_nodes):
            self.node_at_depth[depth[s], top[s]:top[s] + height[s], left[s]:left[s] + width[s]] = s
        self.leaf_map = np.empty((h, w), dtype=np.int64)
        for s in np.flatnonzero(self.is_leaf):
            self.leaf_map[top[s]:top[s] + height[s], left[s]:left[s] + width[s]] = s
        for arr in (top, left, height, width, depth, parent, children, self.is_leaf,
                    self.node_at_depth, self.leaf_map):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.depth.size

    @property
    def max_depth(self) -> int:
        """Depth actually reached (at most ``d_max``)."""
        return len(self.levels) - 1

    @property
    def internal(self) -> np.ndarray:
        return np.flatnonzero(~self.is_leaf)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)

    @property
    def area(self) -> np.ndarray:
        return self.height * self.width

    def region(self, s: int) -> Region:
        return Region(int(self.top[s]), int(self.left[s]), int(self.height[s]), int(self.width[s]))

    def __repr__(self):
        return (f"TreeMax(shape={self.shape}, nodes={self.n_nodes}, "
                f"leaves={int(self.is_leaf.sum())}, depth={self.max_depth})")


def build_tmax(height: int, width: int, d_max: int = 30, min_leaf_dim: int = 2) -> TreeMax:
    """Build ``T_max`` by recursive four-way splitting.

    A node splits iff ``depth < d_max`` and both its height and width exceed
    ``min_leaf_dim``.  Odd sizes split into ceil/floor halves, with the ceil
    part going to the top rows and the left columns.
    """
    if height < 1 or width < 1:
        raise ValueError(f"image must be at least 1x1, got {height}x{width}")
    if d_max < 0:
        raise ValueError(f"d_max must be nonnegative, got {d_max}")
    if min_leaf_dim < 1:
        raise ValueError(f"min_leaf_dim must be >= 1, got {min_leaf_dim}")

    top, left, hh, ww, depth, parent = [0], [0], [height], [width], [0], [-1]
    children = []
    s = 0
    while s < len(depth):
        h, w, d = hh[s], ww[s], depth[s]
        if d < d_max and h > min_leaf_dim and w > min_leaf_dim:
            h0, w0 = (h + 1) // 2, (w + 1) // 2
            kids = []
            for dt, dl, ch, cw in ((0, 0, h0, w0), (0, w0, h0, w - w0),
                                   (h0, 0, h - h0, w0), (h0, w0, h - h0, w - w0)):
                kids.append(len(depth))
                top.append(top[s] + dt)
                left.append(left[s] + dl)
                hh.append(ch)
                ww.append(cw)
                depth.append(d + 1)
                parent.append(s)
            children.append(kids)
        else:
            children.append([-1, -1, -1, -1])
        s += 1

    as_int = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return TreeMax((height, width), d_max, min_leaf_dim, as_int(top), as_int(left), as_int(hh),
                   as_int(ww), as_int(depth), as_int(parent),
                   np.asarray(children, dtype=np.int64).reshape(-1, 4))


def path_of_pixel(tree: TreeMax, i: int, j: int) -> list[int]:
    """Nodes containing pixel ``(i, j)``, ordered from the root downwards."""
    h, w = tree.shape
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"pixel ({i}, {j}) outside {h}x{w} image")
    col = tree.node_at_depth[:, i, j]
    return [int(s) for s in col if s >= 0]


def split_prior(tree: TreeMax, g) -> np.ndarray:
    """Per-node split probabilities, forced to 0 on ``L_max``.

    ``g`` is a scalar applied to every internal node or a per-node array.
    """
    g = np.broadcast_to(np.asarray(g, dtype=np.float64), (tree.n_nodes,)).copy()
    if np.any((g < 0) | (g > 1)):
        raise ValueError("split probabilities must lie in [0, 1]")
    g[tree.is_leaf] = 0.0
    return g


def tree_log_prior(tree: TreeMax, internal_nodes, g) -> float:
    """Log of ``prod_{I_T} g_s * prod_{L_T} (1 - g_s)`` for the subtree with
    the given internal-node set (which must be parent-closed and contain the
    root unless empty)."""
    gs = split_prior(tree, g)
    internal = set(int(s) for s in internal_nodes)
    leaves = [tree.root] if not internal else [
        int(c) for s in internal for c in tree.children[s] if int(c) not in internal]
    with np.errstate(divide="ignore"):
        return float(sum(np.log(gs[s]) for s in internal)
                     + sum(np.log1p(-gs[s]) for s in leaves))


@dataclass
class SegmentationMap:
    """Decoded MAP tree and per-leaf labels.

    Attributes
    ----------
    leaves : ndarray of int
        Chosen leaf nodes, which tile the image.
    leaf_labels : ndarray of int
        Label of each chosen leaf (aligned with ``leaves``).
    leaf_index : ndarray of int, shape (height, width)
        Chosen leaf covering each pixel.
    labels : ndarray of int, shape (height, width)
    """

    leaves: np.ndarray
    leaf_labels: np.ndarray
    leaf_index: np.ndarray
    labels: np.ndarray


def decode_map_segmentation(tree: TreeMax, posterior) -> SegmentationMap:
    """MAP tree under ``q(T)`` by bottom-up dynamic programming, plus the
    argmax label of each chosen leaf.

    Ties prefer stopping (the coarser segmentation) and the smallest label.
    """
    log_split = np.asarray(posterior.log_g_prime, dtype=np.float64)
    log_stop = np.asarray(posterior.log_1m_g_prime, dtype=np.float64)
    resp = np.asarray(posterior.resp)
    if log_split.shape != (tree.n_nodes,) or resp.shape[0] != tree.n_nodes:
        raise ValueError(
            f"posterior has {log_split.shape[0]} nodes but tree has {tree.n_nodes}")

    best = np.zeros(tree.n_nodes)
    split = np.zeros(tree.n_nodes, dtype=bool)
    for level in reversed(tree.levels):
        internal = level[~tree.is_leaf[level]]
        leaf = level[tree.is_leaf[level]]
        best[leaf] = log_stop[leaf]
        if internal.size:
            go = log_split[internal] + best[tree.children[internal]].sum(axis=1)
            stay = log_stop[internal]
            split[internal] = go > stay
            best[internal] = np.where(split[internal], go, stay)

    chosen = []
    stack = [tree.root]
    while stack:
        s = stack.pop()
        if split[s]:
            stack.extend(int(c) for c in reversed(tree.children[s]))
        else:
            chosen.append(s)
    leaves = np.array(sorted(chosen), dtype=np.int64)
    leaf_labels = np.argmax(resp[leaves], axis=1)

    leaf_index = np.empty(tree.shape, dtype=np.int64)
    labels = np.empty(tree.shape, dtype=np.int64)
    for s, k in zip(leaves, leaf_labels):
        r = tree.region(s)
        leaf_index[r.top:r.bottom, r.left:r.right] = s
        labels[r.top:r.bottom, r.left:r.right] = k
    return SegmentationMap(leaves, leaf_labels, leaf_index, labels)


def label_palette() -> np.ndarray:
    """Fixed 256-entry RGB palette; successive labels are spread in hue."""
    pal = np.empty((256, 3), dtype=np.uint8)
    for k in range(256):
        hue = (k * 0.6180339887498949) % 1.0
        sat = 0.55 + 0.45 * ((k // 7) % 2)
        val = 0.6 + 0.4 * ((k // 3) % 2)
        pal[k] = np.round(np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255)
    return pal


def save_segmentation(seg: SegmentationMap, tree: TreeMax, png_path, csv_path=None) -> None:
    """Write the label map as a palette PNG (index = label mod 256) and,
    optionally, the ``leaf_node,top,left,height,width,label`` sidecar CSV."""
    im = Image.fromarray((seg.labels % 256).astype(np.uint8), mode="P")
    im.putpalette(label_palette().ravel().tolist())
    im.save(png_path, format="PNG")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["leaf_node", "top", "left", "height", "width", "label"])
            for s, k in zip(seg.leaves, seg.leaf_labels):
                r = tree.region(s)
                wr.writerow([int(s), r.top, r.left, r.height, r.width, int(k)])
