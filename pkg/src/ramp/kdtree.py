"""Nearest-obstacle-point index: a balanced k-d tree over cloud points.

Split rule: cycle through axes by depth, split at the median (stable
sort by coordinate, then index), bucket size 16.  Queries return exactly
the brute-force nearest neighbor; ties break to the lowest point index.
An index over an empty cloud answers every query with +inf distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF_SIZE = 16


@dataclass
class _Leaf:
    indices: np.ndarray


@dataclass
class _Split:
    axis: int
    value: float
    left: "_Split | _Leaf"
    right: "_Split | _Leaf"


class NearestIndex:
    """Spatial index over a flat (M, d) point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 and self.points.size > 0:
            raise ValueError("points must be (M, d)")
        self._root = None
        if len(self.points):
            self._root = self._build(np.arange(len(self.points), dtype=np.intp), 0)

    @property
    def empty(self) -> bool:
        return self._root is None

    def _build(self, idx: np.ndarray, depth: int):
        if len(idx) <= LEAF_SIZE:
            return _Leaf(np.sort(idx))
        axis = depth % self.points.shape[1]
        coords = self.points[idx, axis]
        order = np.lexsort((idx, coords))
        mid = len(idx) // 2
        split_value = float(coords[order[mid]])
        return _Split(
            axis,
            split_value,
            self._build(idx[order[:mid]], depth + 1),
            self._build(idx[order[mid:]], depth + 1),
        )

    def nearest(self, query: np.ndarray) -> tuple[np.ndarray | None, float, int]:
        """(point, distance, index) of the nearest cloud point.

        Empty index: (None, inf, -1).
        """
        if self._root is None:
            return None, np.inf, -1
        q = np.asarray(query, dtype=np.float64)
        best_d2, best_i = np.inf, -1
        stack = [self._root]
        while stack:
            node = stack.pop()
            if isinstance(node, _Leaf):
                diffs = self.points[node.indices] - q
                d2 = np.einsum("ij,ij->i", diffs, diffs)
                k = int(np.argmin(d2))  # first minimum = lowest index
                if d2[k] < best_d2 or (d2[k] == best_d2 and node.indices[k] < best_i):
                    best_d2, best_i = float(d2[k]), int(node.indices[k])
                continue
            delta = q[node.axis] - node.value
            near, far = (node.left, node.right) if delta < 0 else (node.right, node.left)
            # Equal plane distance can still hide a lower tied index.
            if delta * delta <= best_d2:
                stack.append(far)
            stack.append(near)
        return self.points[best_i], float(np.sqrt(best_d2)), best_i

    def nearest_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest lookup for (Q, d) queries.

        Returns (points (Q, d), distances (Q,)).  Computed as a blocked
        exact scan: identical results to :meth:`nearest` (lowest-index
        ties included), but throughput-friendly for the potential-field
        updates that query every waypoint of a candidate batch.
        """
        q = np.asarray(queries, dtype=np.float64)
        if self._root is None:
            return np.full_like(q, np.nan), np.full(len(q), np.inf)
        out_pts = np.empty_like(q)
        out_d = np.empty(len(q))
        for lo in range(0, len(q), 4096):
            block = q[lo : lo + 4096]
            diffs = block[:, None, :] - self.points[None, :, :]
            d2 = np.sum(diffs * diffs, axis=2)
            idx = np.argmin(d2, axis=1)
            rows = np.arange(len(block))
            out_pts[lo : lo + 4096] = self.points[idx]
            out_d[lo : lo + 4096] = np.sqrt(d2[rows, idx])
        return out_pts, out_d


def build_index(cloud: np.ndarray) -> NearestIndex:
    """Index over all points of an (n_obs, P, d) cloud; grouping ignored."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.size == 0:
        return NearestIndex(np.zeros((0, cloud.shape[-1] if cloud.ndim == 3 else 2)))
    return NearestIndex(cloud.reshape(-1, cloud.shape[-1]))
