"""Graph data model, file ingestion, bounded-hop shortest paths, and synthetic graphs.

On-disk formats are deliberately plain text:

* edge file: one undirected edge per line, ``src<TAB>dst<TAB>weight``,
  ``#`` starts a comment, each edge listed exactly once;
* feature file: headerless CSV, row ``v`` holds the attribute vector of
  vertex ``v`` (the row count defines the number of vertices);
* label file: first line ``K=<n_classes>``, then ``vertex,label`` rows;
  vertices absent from the file are unlabeled.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

THREADS_ENV = "GRAVEMBED_THREADS"


class GraphFormatError(ValueError):
    """Raised when an input file or edge set violates the graph contract."""


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise GraphFormatError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph with dense vertex indices 0..N-1.

    ``adjacency[v]`` is a tuple of ``(neighbor, weight)`` pairs sorted by
    neighbor index; the structure is symmetric and free of self-loops.
    ``labels[v]`` is a class index in ``0..n_classes-1`` or ``-1`` for
    unlabeled vertices.
    """

    features: np.ndarray
    adjacency: tuple
    labels: np.ndarray
    n_classes: int

    @property
    def n_vertices(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def neighbors(self, v: int):
        return self.adjacency[v]

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def has_edge(self, i: int, j: int) -> bool:
        return any(n == j for n, _ in self.adjacency[i])


def build_graph(features, edges, labels=None, n_classes: int = 0) -> Graph:
    """Validate and assemble a :class:`Graph` from raw parts.

    Parameters
    ----------
    features : array-like, shape (N, d)
        Attribute vectors; defines the vertex count N.
    edges : iterable of (i, j, w)
        Undirected edges, each listed once, with strictly positive finite
        weights.
    labels : array-like of int, optional
        Per-vertex class indices; ``-1`` (or omission) means unlabeled.
    n_classes : int
        Number of classes K; required (and >= 2) when any label is present.
    """
    feats = np.array(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise GraphFormatError("feature matrix must be 2-D with at least one row")
    if not np.isfinite(feats).all():
        raise GraphFormatError("feature matrix contains non-finite entries")
    n = feats.shape[0]

    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    seen: set[tuple[int, int]] = set()
    for i, j, w in edges:
        i, j, w = int(i), int(j), float(w)
        if i == j:
            raise GraphFormatError(f"self-loop on vertex {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(
                f"edge ({i}, {j}) references a vertex outside 0..{n - 1}"
            )
        if not (np.isfinite(w) and w > 0):
            raise GraphFormatError(f"edge ({i}, {j}) has non-positive weight {w}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise GraphFormatError(f"duplicate undirected edge ({i}, {j})")
        seen.add(key)
        adj[i].append((j, w))
        adj[j].append((i, w))
    for row in adj:
        row.sort()

    if labels is None:
        lab = np.full(n, -1, dtype=np.int64)
    else:
        lab = np.array(labels, dtype=np.int64)
        if lab.shape != (n,):
            raise GraphFormatError("labels must be one entry per vertex")
    if (lab >= 0).any():
        if n_classes < 2:
            raise GraphFormatError("labeled graphs need n_classes >= 2")
        if int(lab.max()) >= n_classes:
            raise GraphFormatError(
                f"label {int(lab.max())} exceeds declared class count {n_classes}"
            )
    else:
        n_classes = int(n_classes)

    return Graph(
        features=feats,
        adjacency=tuple(tuple(row) for row in adj),
        labels=lab,
        n_classes=int(n_classes),
    )


def weighted_degree(g: Graph, v: int) -> float:
    """Sum of incident edge weights of ``v``; 0 for an isolated vertex."""
    if not 0 <= v < g.n_vertices:
        raise IndexError(f"vertex {v} out of range 0..{g.n_vertices - 1}")
    return float(sum(w for _, w in g.adjacency[v]))


def weighted_degrees(g: Graph) -> np.ndarray:
    """Vector of weighted degrees for all vertices."""
    return np.array([sum(w for _, w in row) for row in g.adjacency], dtype=np.float64)


# ---------------------------------------------------------------------------
# Bounded-hop shortest paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathTable:
    """Hop-shortest paths for all ordered pairs within ``max_hops``.

    For every reachable ordered pair (i, j) the table stores one canonical
    shortest path: among all equal-hop paths, the lexicographically smallest
    vertex sequence. ``dist[i]`` maps target -> hop count, ``parent[i]`` maps
    target -> its predecessor on the stored path from i.
    """

    n_vertices: int
    max_hops: int
    dist: tuple
    parent: tuple

    def hop_distance(self, i: int, j: int):
        """Hop count of the stored path, or None when j is outside the radius."""
        return self.dist[i].get(j)

    def has_path(self, i: int, j: int) -> bool:
        return j in self.dist[i]

    def path(self, i: int, j: int):
        """Stored vertex sequence [i, ..., j], or None when unreachable."""
        if i == j:
            return [i]
        if j not in self.parent[i]:
            return None
        seq = [j]
        par = self.parent[i]
        while seq[-1] != i:
            seq.append(par[seq[-1]])
        seq.reverse()
        return seq

    def pairs(self):
        """Yield (i, j, hops) over all ordered reachable pairs with i != j."""
        for i in range(self.n_vertices):
            for j, h in self.dist[i].items():
                if j != i:
                    yield i, j, h

    def reachable_mask(self) -> np.ndarray:
        """Boolean N x N matrix; True where a path within max_hops exists (off-diagonal)."""
        mask = np.zeros((self.n_vertices, self.n_vertices), dtype=bool)
        for i in range(self.n_vertices):
            for j in self.dist[i]:
                if j != i:
                    mask[i, j] = True
        return mask


def _lexmin_bfs(adjacency, source: int, max_hops: int):
    """Single-source BFS keeping, per target, the lexicographically smallest
    shortest vertex sequence.

    Works level by level: the lexicographic order of paths at level d equals
    the order by (rank of best predecessor, own index), so full path
    comparisons reduce to integer rank comparisons.
    """
    dist = {source: 0}
    parent: dict[int, int] = {}
    rank = {source: 0}
    frontier = [source]
    for hops in range(1, max_hops + 1):
        discovered = set()
        for u in frontier:
            for v, _w in adjacency[u]:
                if v not in dist:
                    discovered.add(v)
        if not discovered:
            break
        for v in discovered:
            dist[v] = hops
        for v in discovered:
            parent[v] = min(
                (u for u, _w in adjacency[v] if dist.get(u) == hops - 1),
                key=rank.__getitem__,
            )
        level = sorted(discovered, key=lambda v: (rank[parent[v]], v))
        rank = {v: r for r, v in enumerate(level)}
        frontier = level
    return dist, parent


def all_pairs_paths(g: Graph, max_hops: int) -> PathTable:
    """Hop-shortest paths between all ordered pairs within ``max_hops``.

    Paths are selected by hop count (edge weights do not enter path
    selection); equal-hop ties are broken toward the lexicographically
    smallest vertex sequence, which makes the table deterministic.

    Per-source searches are independent; with ``GRAVEMBED_THREADS`` > 1 they
    run on a thread pool and are merged in source order, so the result does
    not depend on the thread count.
    """
    if max_hops < 1:
        raise ValueError("max_hops must be >= 1")
    sources = range(g.n_vertices)
    threads = _thread_count()
    if threads > 1 and g.n_vertices > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _lexmin_bfs(g.adjacency, s, max_hops), sources))
    else:
        results = [_lexmin_bfs(g.adjacency, s, max_hops) for s in sources]
    return PathTable(
        n_vertices=g.n_vertices,
        max_hops=max_hops,
        dist=tuple(r[0] for r in results),
        parent=tuple(r[1] for r in results),
    )


# ---------------------------------------------------------------------------
# File ingestion / serialization
# ---------------------------------------------------------------------------

def _read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected {width} feature columns, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: malformed feature value")
    if not rows:
        raise GraphFormatError(f"{path}: empty feature file")
    return np.array(rows, dtype=np.float64)


def _read_edges(path, n: int):
    edges = []
    seen = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected 'src dst weight', got {line!r}"
                )
            try:
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: malformed edge line {line!r}")
            if i == j:
                raise GraphFormatError(f"{path}:{lineno}: self-loop on vertex {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphFormatError(
                    f"{path}:{lineno}: vertex index outside 0..{n - 1} "
                    "(feature row count defines N)"
                )
            if not (np.isfinite(w) and w > 0):
                raise GraphFormatError(f"{path}:{lineno}: weight must be positive and finite")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphFormatError(
                    f"{path}:{lineno}: duplicate undirected edge ({i}, {j}), "
                    f"first listed on line {seen[key]}"
                )
            seen[key] = lineno
            edges.append((i, j, w))
    return edges


def _read_labels(path, n: int):
    labels = np.full(n, -1, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [(no, ln.strip()) for no, ln in enumerate(fh, start=1)]
    lines = [(no, ln) for no, ln in lines if ln]
    if not lines or not lines[0][1].startswith("K="):
        raise GraphFormatError(f"{path}: first line must declare 'K=<n_classes>'")
    try:
        k = int(lines[0][1][2:])
    except ValueError:
        raise GraphFormatError(f"{path}:1: malformed class count {lines[0][1]!r}")
    if k < 2:
        raise GraphFormatError(f"{path}: K must be >= 2, got {k}")
    for lineno, line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 2:
            raise GraphFormatError(f"{path}:{lineno}: expected 'vertex,label'")
        try:
            v, lab = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: malformed label line {line!r}")
        if not 0 <= v < n:
            raise GraphFormatError(f"{path}:{lineno}: vertex {v} outside 0..{n - 1}")
        if not 0 <= lab < k:
            raise GraphFormatError(
                f"{path}:{lineno}: label {lab} >= declared class count {k}"
            )
        if labels[v] >= 0:
            raise GraphFormatError(f"{path}:{lineno}: vertex {v} labeled twice")
        labels[v] = lab
    return labels, k


def load_graph(edge_path, feature_path, label_path=None) -> Graph:
    """Load a graph from an edge file, a feature file and an optional label file.

    The feature file defines the vertex count; every edge endpoint must fall
    inside that range. Duplicate undirected edges (in either orientation) are
    rejected, as are self-loops and non-positive weights. All format errors
    report the offending file and line number.
    """
    feats = _read_features(feature_path)
    n = feats.shape[0]
    edges = _read_edges(edge_path, n)
    if label_path is not None:
        labels, k = _read_labels(label_path, n)
    else:
        labels, k = None, 0
    return build_graph(feats, edges, labels=labels, n_classes=k)


def save_graph(g: Graph, edge_path, feature_path, label_path=None) -> None:
    """Write a graph back to the on-disk format.

    Floats are written with full round-trip precision so that
    ``load_graph(save_graph(g))`` reproduces ``g`` bit for bit.
    """
    with open(edge_path, "w", encoding="utf-8") as fh:
        for i in range(g.n_vertices):
            for j, w in g.adjacency[i]:
                if i < j:
                    fh.write(f"{i}\t{j}\t{w!r}\n")
    with open(feature_path, "w", encoding="utf-8") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if label_path is not None:
        if g.n_classes < 2:
            raise GraphFormatError("cannot write labels for an unlabeled graph")
        with open(label_path, "w", encoding="utf-8") as fh:
            fh.write(f"K={g.n_classes}\n")
            for v in range(g.n_vertices):
                if g.labels[v] >= 0:
                    fh.write(f"{v},{int(g.labels[v])}\n")


# ---------------------------------------------------------------------------
# Synthetic graphs
# ---------------------------------------------------------------------------

def generate_sbm(
    blocks: int,
    per_block: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    feature_shift: float,
    seed: int,
) -> Graph:
    """Stochastic block model with Gaussian per-class features.

    Vertices are grouped into ``blocks`` blocks of ``per_block`` vertices;
    each within-block pair is joined with probability ``p_in`` and each
    cross-block pair with probability ``p_out`` (unit edge weights). Features
    are standard normal around per-block means of norm ``feature_shift``
    placed on alternating signed coordinate axes (+axis, -axis, next axis,
    ...), so any two block means are orthogonal or antipodal and no pair is
    positively correlated. Labels are block indices. Deterministic for a
    fixed seed.
    """
    if blocks < 2:
        raise ValueError("generate_sbm needs at least 2 blocks")
    if per_block < 1:
        raise ValueError("per_block must be >= 1")
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")

    n = blocks * per_block
    labels = np.repeat(np.arange(blocks), per_block)
    rng = np.random.default_rng(seed)

    u = rng.random((n, n))
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    iu, ju = np.triu_indices(n, k=1)
    keep = u[iu, ju] < prob[iu, ju]
    edges = [(int(a), int(b), 1.0) for a, b in zip(iu[keep], ju[keep])]

    means = np.zeros((blocks, feature_dim))
    for k in range(blocks):
        means[k, (k // 2) % feature_dim] = feature_shift if k % 2 == 0 else -feature_shift
    feats = rng.standard_normal((n, feature_dim)) + means[labels]

    return build_graph(feats, edges, labels=labels, n_classes=blocks)
