"""Per-pixel pairwise Markov network MAP fusion of probabilistic outputs.

Every pixel owns an independent binary network over the T timestamps:
node potentials come from segmentation probabilities, (1-p, p); each edge
(t, k) carries a 2x2 table from its change probability c, c where the two
states differ and 1-c where they agree.  Decoding maximizes the product of
potentials, computed in log space.

Two exact decoders: a max-product chain sweep for adjacent edges, and
exhaustive enumeration of all 2^T assignments for arbitrary edge sets
(the wrap-around and all-pairs kinds contain cycles, and T stays desk
sized, so enumeration is the honest exact choice).  Ties break toward the
lexicographically smallest state vector: state 0 preferred, earliest
timestamp most significant.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .changefeat import EdgeSet, build_edge_set
from .objective import threshold_probs

PROB_EPS = 1e-6
T_MAX = 20

MODES = ("degenerate", "adjacent", "cyclic", "dense")


@dataclass
class PixelPotentials:
    """Raster of per-pixel potential tables.

    node: (T, 2, H, W) positive values, node[t, s] scores state s.
    edge: (N, 4, H, W) positive values, cells ordered (0,0),(0,1),(1,0),(1,1)
    over (state_t, state_k).
    """

    node: np.ndarray
    edge: np.ndarray
    edges: EdgeSet

    def __post_init__(self):
        if self.node.ndim != 4 or self.node.shape[1] != 2:
            raise ValueError("node tables must have shape (T, 2, H, W)")
        if self.edge.ndim != 4 or self.edge.shape[1] != 4:
            raise ValueError("edge tables must have shape (N, 4, H, W)")
        if self.node.shape[0] != self.edges.t_len:
            raise ValueError("node table count does not match the edge set's T")
        if self.edge.shape[0] != len(self.edges):
            raise ValueError("edge table count does not match the edge set")
        if self.node.min() <= 0 or self.edge.min() <= 0:
            raise ValueError("potentials must be strictly positive")
        if not (np.all(np.isfinite(self.node)) and np.all(np.isfinite(self.edge))):
            raise ValueError("potentials must be finite")


def build_potentials(
    seg_probs: np.ndarray, ch_probs: np.ndarray, edges: EdgeSet
) -> PixelPotentials:
    """Clamp probabilities to [PROB_EPS, 1 - PROB_EPS] and tabulate potentials."""
    seg_probs = np.asarray(seg_probs, dtype=np.float64)
    ch_probs = np.asarray(ch_probs, dtype=np.float64)
    if seg_probs.ndim != 3:
        raise ValueError("seg_probs must have shape (T, H, W)")
    if ch_probs.ndim != 3:
        raise ValueError("ch_probs must have shape (N, H, W)")
    if seg_probs.shape[0] != edges.t_len or ch_probs.shape[0] != len(edges):
        raise ValueError("probability stacks do not match the edge set")
    lo, hi = PROB_EPS, 1.0 - PROB_EPS
    p = np.clip(seg_probs, lo, hi)
    c = np.clip(ch_probs, lo, hi)
    node = np.stack([1.0 - p, p], axis=1)
    edge = np.stack([1.0 - c, c, c, 1.0 - c], axis=1)
    return PixelPotentials(node=node, edge=edge, edges=edges)


def _flatten(pot: PixelPotentials) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    t, _, h, w = pot.node.shape
    node = np.log(pot.node.reshape(t, 2, h * w))
    edge = np.log(pot.edge.reshape(pot.edge.shape[0], 4, h * w))
    return node, edge, (h, w)


def map_decode_chain(pot: PixelPotentials) -> tuple[np.ndarray, np.ndarray]:
    """Exact max-product sweep for adjacent edges.

    Runs the recursion from the last timestamp backwards, then reconstructs
    forward so ties resolve toward the lexicographically smallest states.
    Returns (states (T, H, W) uint8, per-pixel log-score (H, W)).
    """
    t_len = pot.node.shape[0]
    expected = [(t, t + 1) for t in range(1, t_len)]
    if list(pot.edges.edges) != expected:
        raise ValueError("chain decoding requires exactly the adjacent edge set")
    node, edge, (h, w) = _flatten(pot)
    m = h * w

    ## beta[s] = best log-score of the suffix starting here in state s
    beta = node[t_len - 1]
    ptrs = []
    for t in range(t_len - 2, -1, -1):
        cand = edge[t].reshape(2, 2, m) + beta[None, :, :]
        ## argmax over the successor state; first hit prefers state 0 on ties
        arg = cand.argmax(axis=1)
        best = np.take_along_axis(cand, arg[:, None, :], axis=1)[:, 0, :]
        ptrs.append(arg)
        beta = node[t] + best
    ptrs.reverse()

    states = np.empty((t_len, m), dtype=np.uint8)
    states[0] = beta.argmax(axis=0)
    score = np.take_along_axis(beta, states[0][None, :].astype(np.int64), axis=0)[0]
    cols = np.arange(m)
    for t in range(t_len - 1):
        states[t + 1] = ptrs[t][states[t].astype(np.int64), cols]
    return states.reshape(t_len, h, w), score.reshape(h, w)


def _assignment_matrix(t_len: int) -> np.ndarray:
    """(2^T, T) rows of states in lexicographic order, earliest timestamp
    most significant; row index = integer value of the state vector."""
    a = np.arange(2 ** t_len, dtype=np.int64)
    return (a[:, None] >> (t_len - 1 - np.arange(t_len))[None, :]) & 1


def map_decode_general(pot: PixelPotentials, t_max: int = T_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Exact MAP by scoring every assignment; works for any edge set.

    Scores are gathered per (assignment, pixel) and summed along a fixed
    small axis, so per-pixel results never depend on how pixels are
    chunked or tiled across workers.
    """
    t_len = pot.node.shape[0]
    if t_len > t_max:
        raise ValueError(f"series length {t_len} exceeds the enumeration cap {t_max}")
    node, edge, (h, w) = _flatten(pot)
    m = h * w

    assigns = _assignment_matrix(t_len)  # (A, T)
    n_assign = assigns.shape[0]
    pair_idx = pot.edges.index_pairs
    n_edges = len(pair_idx)
    t_rows = np.arange(t_len)[None, :]
    if n_edges:
        tt = np.array([p[0] for p in pair_idx])
        kk = np.array([p[1] for p in pair_idx])
        cells = 2 * assigns[:, tt] + assigns[:, kk]  # (A, N)
        e_rows = np.arange(n_edges)[None, :]

    best_idx = np.zeros(m, dtype=np.int64)
    best_score = np.full(m, -np.inf)
    ## chunk pixels to bound the (A, T, chunk) gather block
    chunk = max(1, (1 << 21) // (n_assign * max(t_len, n_edges, 1)))
    for start in range(0, m, chunk):
        sl = slice(start, min(start + chunk, m))
        score = node[:, :, sl][t_rows, assigns, :].sum(axis=1)
        if n_edges:
            score += edge[:, :, sl][e_rows, cells, :].sum(axis=1)
        idx = score.argmax(axis=0)  # first max = lexicographically smallest
        best_idx[sl] = idx
        best_score[sl] = np.take_along_axis(score, idx[None, :], axis=0)[0]

    states = assigns[best_idx].T.astype(np.uint8)  # (T, m)
    return states.reshape(t_len, h, w), best_score.reshape(h, w)


@dataclass
class MapSeries:
    """Fused binary building maps plus the change maps they induce."""

    states: np.ndarray  # (T, H, W) uint8
    mode: str
    edges: EdgeSet | None  # edges the decoder consumed (None for degenerate)
    map_score: np.ndarray  # (H, W) per-pixel log-score of the chosen assignment

    @property
    def t_len(self) -> int:
        return int(self.states.shape[0])

    def derived_change(self, t: int, k: int) -> np.ndarray:
        """Binary change map between timestamps t < k (1-based), by XOR."""
        if not 1 <= t < k <= self.t_len:
            raise ValueError(f"need 1 <= t < k <= {self.t_len}, got ({t}, {k})")
        return np.logical_xor(self.states[t - 1], self.states[k - 1]).astype(np.uint8)

    def __getitem__(self, pair: tuple[int, int]) -> np.ndarray:
        return self.derived_change(*pair)

    def change_maps(self) -> dict:
        if self.edges is None:
            return {}
        return {pair: self.derived_change(*pair) for pair in self.edges.edges}


def _degenerate_series(seg_probs: np.ndarray) -> MapSeries:
    states = threshold_probs(seg_probs)
    p = np.clip(seg_probs, PROB_EPS, 1.0 - PROB_EPS)
    score = np.log(np.where(states, p, 1.0 - p)).sum(axis=0)
    return MapSeries(states=states, mode="degenerate", edges=None, map_score=score)


def integrate(
    seg_probs: np.ndarray,
    ch_probs: np.ndarray | None,
    available: EdgeSet | None,
    mode: str,
    workers: int = 1,
    t_max: int = T_MAX,
) -> MapSeries:
    """Fuse probabilistic outputs into one consistent binary map series.

    mode picks the edges entering each pixel's network; they must be a
    subset of `available`, the edge set describing ch_probs' rows.  The
    degenerate mode ignores change evidence entirely and thresholds the
    segmentation probabilities at 0.5.  Results are identical for every
    worker count: the raster is tiled, pixels are independent.
    """
    seg_probs = np.asarray(seg_probs, dtype=np.float64)
    if seg_probs.ndim != 3:
        raise ValueError("seg_probs must have shape (T, H, W)")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if mode == "degenerate":
        return _degenerate_series(seg_probs)

    if ch_probs is None or available is None:
        raise ValueError(f"mode {mode!r} needs change probabilities and their edge set")
    ch_probs = np.asarray(ch_probs, dtype=np.float64)
    t_len = seg_probs.shape[0]
    wanted = build_edge_set(mode, t_len)
    try:
        rows = [available.index_of(pair) for pair in wanted.edges]
    except KeyError as exc:
        raise ValueError(
            f"mode {mode!r} requests edges beyond the available set: {exc}"
        ) from exc
    pot = build_potentials(seg_probs, ch_probs[rows], wanted)

    decode_chain = mode == "adjacent"
    h, w = seg_probs.shape[1:]
    if workers == 1 or h * w < 2 * workers:
        if decode_chain:
            states, score = map_decode_chain(pot)
        else:
            states, score = map_decode_general(pot, t_max=t_max)
        return MapSeries(states=states, mode=mode, edges=wanted, map_score=score)

    ## tile the flattened raster; each tile is decoded independently
    m = h * w
    node_flat = pot.node.reshape(t_len, 2, m)
    edge_flat = pot.edge.reshape(len(wanted), 4, m)
    bounds = np.linspace(0, m, workers + 1, dtype=np.int64)
    states = np.empty((t_len, m), dtype=np.uint8)
    score = np.empty(m)

    def run(i: int) -> None:
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        if lo == hi:
            return
        tile = PixelPotentials(
            node=node_flat[:, :, lo:hi].reshape(t_len, 2, 1, hi - lo),
            edge=edge_flat[:, :, lo:hi].reshape(len(wanted), 4, 1, hi - lo),
            edges=wanted,
        )
        if decode_chain:
            st, sc = map_decode_chain(tile)
        else:
            st, sc = map_decode_general(tile, t_max=t_max)
        states[:, lo:hi] = st.reshape(t_len, hi - lo)
        score[lo:hi] = sc.reshape(hi - lo)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(run, range(workers)))
    return MapSeries(
        states=states.reshape(t_len, h, w),
        mode=mode,
        edges=wanted,
        map_score=score.reshape(h, w),
    )
