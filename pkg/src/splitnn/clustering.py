"""Feature clustering: Pearson distances, complete linkage, dendrogram cuts.

Features (columns), not data points, are clustered. Distances come from
pairwise-complete Pearson correlations so missing cells never enter the
statistic; the merge tree is built with complete linkage and flattened by
thresholding merge heights at a fraction of the maximum height.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ShapeMismatchError

SIGNED = "signed"  # distance 1 - r, range [0, 2]
ABSOLUTE = "absolute"  # distance 1 - |r|, range [0, 1]


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative feature-feature distances with zero diagonal."""

    size: int
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.shape != (self.size, self.size):
            raise ShapeMismatchError("distance matrix shape mismatch")
        if not np.isfinite(v).all() or (v < 0).any():
            raise ValueError("distances must be finite and nonnegative")
        if (np.diag(v) != 0).any() or not np.array_equal(v, v.T):
            raise ValueError("distance matrix must be symmetric with zero diagonal")


@dataclass(frozen=True)
class MergeRecord:
    left: int
    right: int
    height: float
    new_id: int


@dataclass(frozen=True)
class Dendrogram:
    """Full agglomerative merge history; leaf ids 0..d-1, internal d..2d-2."""

    n_leaves: int
    merges: tuple

    def __post_init__(self):
        if len(self.merges) != self.n_leaves - 1:
            raise ValueError("dendrogram must contain exactly d-1 merges")
        heights = [m.height for m in self.merges]
        if any(b < a for a, b in zip(heights, heights[1:])):
            raise ValueError("merge heights must be non-decreasing")
        children = [m.left for m in self.merges] + [m.right for m in self.merges]
        if len(set(children)) != len(children):
            raise ValueError("a node may appear as a child only once")

    @property
    def max_height(self):
        return self.merges[-1].height if self.merges else 0.0


@dataclass(frozen=True)
class FeatureClustering:
    """Exhaustive disjoint partition of the d features into k clusters."""

    assignment: np.ndarray  # d, cluster id in [0, k)
    k: int
    cluster_sizes: np.ndarray  # k, member counts
    threshold_fraction: float

    def __post_init__(self):
        counts = np.bincount(self.assignment, minlength=self.k)
        if len(counts) != self.k or (counts < 1).any():
            raise ValueError("every cluster id in [0, k) must be used")
        if counts.sum() != len(self.assignment):
            raise ValueError("assignment must cover every feature exactly once")
        if not np.array_equal(counts, self.cluster_sizes):
            raise ValueError("cluster_sizes disagree with assignment")

    def members(self, cluster_id):
        return np.flatnonzero(self.assignment == cluster_id)

    def feature_groups(self):
        """Per-cluster feature index arrays, cluster id order."""
        return [self.members(i) for i in range(self.k)]


def trivial_clustering(d) -> FeatureClustering:
    """All d features in one cluster (the vanilla-network layout)."""
    return FeatureClustering(
        assignment=np.zeros(d, dtype=np.int64),
        k=1,
        cluster_sizes=np.array([d], dtype=np.int64),
        threshold_fraction=1.0,
    )


def correlation_distance(data: Dataset, rows, mode=SIGNED) -> DistanceMatrix:
    """Pearson correlation distance over pairwise-complete observations.

    For each feature pair the correlation uses only rows where both cells
    are observed. Pairs with fewer than 2 complete rows, or a constant
    column over the complete rows, get distance 1.0 (uncorrelated).
    """
    if mode not in (SIGNED, ABSOLUTE):
        raise ValueError(f"unknown distance mode {mode!r}")
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ShapeMismatchError("rows must be nonempty")
    x = data.features[rows]
    m = data.mask[rows]
    d = data.n_features
    values = np.zeros((d, d))
    for i in range(d):
        for j in range(i + 1, d):
            both = m[:, i] & m[:, j]
            n = int(both.sum())
            dist = 1.0
            if n >= 2:
                a = x[both, i]
                b = x[both, j]
                # exact constancy check, immune to fp cancellation
                if a.min() != a.max() and b.min() != b.max():
                    sa, sb = a.sum(), b.sum()
                    cov = n * (a * b).sum() - sa * sb
                    va = n * (a * a).sum() - sa * sa
                    vb = n * (b * b).sum() - sb * sb
                    r = cov / np.sqrt(va * vb)
                    r = min(1.0, max(-1.0, r))
                    dist = 1.0 - abs(r) if mode == ABSOLUTE else 1.0 - r
            values[i, j] = values[j, i] = max(dist, 0.0)
    return DistanceMatrix(size=d, values=values)


def complete_linkage(dist: DistanceMatrix) -> Dendrogram:
    """Agglomerate with max-linkage; ties pick the smallest (i, j) pair.

    Inter-cluster distance is the maximum pairwise member distance,
    maintained incrementally (the new cluster's distance to any other is
    the max of its children's). Merge heights are therefore monotone.
    """
    d = dist.size
    if d < 2:
        raise ShapeMismatchError("need at least 2 features to cluster")
    total = 2 * d - 1
    link = np.full((total, total), np.inf)
    link[:d, :d] = dist.values
    active = list(range(d))
    merges = []
    for step in range(d - 1):
        best = None
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                i, j = active[ai], active[bi]
                h = link[i, j]
                if best is None or h < best[0]:
                    best = (h, i, j)
        h, i, j = best
        new_id = d + step
        for k in active:
            if k != i and k != j:
                link[new_id, k] = link[k, new_id] = max(link[i, k], link[j, k])
        active.remove(i)
        active.remove(j)
        active.append(new_id)
        merges.append(MergeRecord(left=i, right=j, height=float(h), new_id=new_id))
    return Dendrogram(n_leaves=d, merges=tuple(merges))


def cut_dendrogram(tree: Dendrogram, threshold_fraction) -> FeatureClustering:
    """Flatten the tree at ``threshold_fraction`` x (maximum merge height).

    Exactly the merges with height <= threshold are applied (a prefix of
    the merge sequence, by monotonicity); the resulting connected
    components are the clusters, ids ordered by smallest member feature.
    """
    if not 0 < threshold_fraction <= 1:
        raise ValueError("threshold_fraction must be in (0, 1]")
    d = tree.n_leaves
    threshold = threshold_fraction * tree.max_height
    parent = list(range(2 * d - 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for merge in tree.merges:
        if merge.height <= threshold:
            root = find(merge.new_id)
            parent[find(merge.left)] = root
            parent[find(merge.right)] = root
        else:
            break
    groups = {}
    for leaf in range(d):
        groups.setdefault(find(leaf), []).append(leaf)
    ordered = sorted(groups.values(), key=lambda g: g[0])
    assignment = np.empty(d, dtype=np.int64)
    for cid, members in enumerate(ordered):
        assignment[members] = cid
    return FeatureClustering(
        assignment=assignment,
        k=len(ordered),
        cluster_sizes=np.array([len(g) for g in ordered], dtype=np.int64),
        threshold_fraction=float(threshold_fraction),
    )


def fraction_for_k(tree: Dendrogram, k_target) -> float:
    """Smallest grid fraction whose cut yields exactly k_target clusters.

    Scans the merge heights (the only fractions where k can change);
    raises if tied heights make k_target unattainable.
    """
    d = tree.n_leaves
    if not 1 <= k_target <= d:
        raise ValueError(f"k must be in [1, {d}]")
    maxh = tree.max_height
    if maxh == 0:
        if k_target == 1:
            return 1.0
        raise ValueError("all features identical; only k=1 is attainable")
    candidates = [h / maxh for h in sorted({m.height for m in tree.merges} | {0.0}) if h > 0]
    for frac in candidates:
        if cut_dendrogram(tree, frac).k == k_target:
            return frac
    # k_target may sit between merge heights (strictly below the first one)
    lowest = min(frac for frac in candidates)
    if cut_dendrogram(tree, lowest / 2).k == k_target:
        return lowest / 2
    raise ValueError(f"no threshold yields exactly k={k_target} (tied merge heights)")


def export_dendrogram(tree: Dendrogram, path):
    """One merge per line: 'left right height' (new ids implicit)."""
    lines = [f"{m.left} {m.right} {m.height:.17g}" for m in tree.merges]
    Path(path).write_text("\n".join(lines) + "\n")


def export_assignment(clustering: FeatureClustering, feature_names, path):
    """One feature per line: 'feature_name cluster_id'."""
    lines = [
        f"{name} {cid}" for name, cid in zip(feature_names, clustering.assignment)
    ]
    Path(path).write_text("\n".join(lines) + "\n")
