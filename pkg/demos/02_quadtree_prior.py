"""The complete quadtree and its split prior.

Shows the node layout for an odd-sized image, checks that the prior sums to
one over every pruned subtree, and prints how likely each depth is to be cut.
"""
import itertools
import math

import numpy as np

from qtdenoise.quadtree import build_tmax, path_of_pixel, tree_log_prior

tree = build_tmax(13, 10, d_max=3, min_leaf_dim=2)
print(tree)
for s in tree.children[tree.root]:
    print("  child", int(s), tuple(tree.region(int(s))))
print("path of pixel (12, 9):", path_of_pixel(tree, 12, 9))


def subtrees(t, s=0):
    yield frozenset()
    if not t.is_leaf[s]:
        for combo in itertools.product(*[list(subtrees(t, int(c))) for c in t.children[s]]):
            yield frozenset({s}).union(*combo)


small = build_tmax(8, 8, 2, 2)
all_trees = list(subtrees(small))
for g in (0.25, 0.75):
    total = math.fsum(math.exp(tree_log_prior(small, T, g)) for T in all_trees)
    sizes = np.array([len(T) for T in all_trees])
    probs = np.array([math.exp(tree_log_prior(small, T, g)) for T in all_trees])
    print(f"g={g}: {len(all_trees)} subtrees, total prior {total:.15f}, "
          f"expected internal nodes {probs @ sizes:.3f}")
