"""Timestamp-pair edge sets and parameter-free change features.

An edge (t, k) with 1 <= t < k <= T names an ordered timestamp pair of a
length-T series.  Change features for an edge are plain later-minus-earlier
differences of the refined feature maps, taken per pyramid scale; the
operation owns no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EDGE_KINDS = ("adjacent", "cyclic", "dense")


def _expected_edges(kind: str, t_len: int) -> list[tuple[int, int]]:
    if kind == "adjacent":
        pairs = [(t, t + 1) for t in range(1, t_len)]
    elif kind == "cyclic":
        if t_len < 2:
            raise ValueError("cyclic edges need at least 2 timestamps")
        pairs = {(t, t + 1) for t in range(1, t_len)}
        pairs.add((1, t_len))
        pairs = list(pairs)
    elif kind == "dense":
        pairs = [(t, k) for t in range(1, t_len + 1) for k in range(t + 1, t_len + 1)]
    else:
        raise ValueError(f"unknown edge kind {kind!r}, expected one of {EDGE_KINDS}")
    return sorted(pairs)


@dataclass(frozen=True)
class EdgeSet:
    """Sorted, duplicate-free timestamp pairs of one kind over a length-T series."""

    kind: str
    t_len: int
    edges: tuple = field(default=())

    def __post_init__(self):
        if self.t_len < 1:
            raise ValueError("series length must be >= 1")
        expected = tuple(_expected_edges(self.kind, self.t_len)) if self.t_len >= 2 else ()
        if self.t_len == 1:
            if self.kind == "cyclic":
                raise ValueError("cyclic edges undefined for a single timestamp")
            expected = ()
        if tuple(self.edges) != expected:
            raise ValueError(
                f"edge list {self.edges} does not match {self.kind} over T={self.t_len}"
            )

    def __len__(self) -> int:
        return len(self.edges)

    def index_of(self, pair: tuple[int, int]) -> int:
        try:
            return self.edges.index(tuple(pair))
        except ValueError:
            raise KeyError(f"pair {pair} not in {self.kind} edge set over T={self.t_len}")

    @property
    def index_pairs(self) -> list[tuple[int, int]]:
        """0-based (t-1, k-1) array indices for each edge."""
        return [(t - 1, k - 1) for t, k in self.edges]

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "t": self.t_len, "edges": [list(e) for e in self.edges]}

    @staticmethod
    def from_jsonable(obj: dict) -> "EdgeSet":
        return EdgeSet(obj["kind"], int(obj["t"]), tuple(tuple(e) for e in obj["edges"]))


def build_edge_set(kind: str, t_len: int) -> EdgeSet:
    """Edge set of the requested kind; series must have at least 2 timestamps.

    Counts: adjacent T-1; dense T(T-1)/2; cyclic T for T >= 3 and 1 for T = 2
    (the wrap-around pair coincides with the single adjacent pair there, and
    edge sets hold no duplicates).  For T = 3 cyclic equals dense.
    """
    if t_len < 2:
        raise ValueError("edge sets need at least 2 timestamps")
    return EdgeSet(kind, t_len, tuple(_expected_edges(kind, t_len)))


def edge_difference(features: np.ndarray, earlier: int, later: int) -> np.ndarray:
    """later-minus-earlier difference of per-timestamp features (0-based indices)."""
    t_len = features.shape[0]
    for idx in (earlier, later):
        if not 0 <= idx < t_len:
            raise ValueError(f"timestamp index {idx} outside series of length {t_len}")
    return features[later] - features[earlier]


def change_pyramid(refined: list[np.ndarray], edges: EdgeSet) -> list[np.ndarray]:
    """Per-scale change features: stack of edge differences.

    refined[s] has shape (T, D_s, H_s, W_s); output[s] has shape
    (N, D_s, H_s, W_s) with rows following the edge set order.
    """
    out = []
    for level in refined:
        if level.shape[0] != edges.t_len:
            raise ValueError(
                f"pyramid level has {level.shape[0]} timestamps, edge set expects {edges.t_len}"
            )
        rows = [level[k] - level[t] for t, k in edges.index_pairs]
        out.append(np.stack(rows, axis=0) if rows else np.zeros((0,) + level.shape[1:]))
    return out


def change_pyramid_backward(
    d_change: list[np.ndarray], edges: EdgeSet, t_len: int
) -> list[np.ndarray]:
    """Route change-feature gradients back onto the refined pyramid.

    Each edge row contributes +g at its later timestamp and -g at its
    earlier one.
    """
    out = []
    for g in d_change:
        acc = np.zeros((t_len,) + g.shape[1:], dtype=np.float64)
        for n, (t, k) in enumerate(edges.index_pairs):
            acc[k] += g[n]
            acc[t] -= g[n]
        out.append(acc)
    return out
