"""Social ties: exact path products, an inductive approximator, and error metrics.

The exact tie from i to j multiplies, along the stored hop-shortest path,
the ratio ``wdeg(a) / max(wdeg(a), wdeg(b))`` for each consecutive edge
(a, b). Every ratio lies in (0, 1], so ties live in (0, 1] on reachable
pairs and are 0 elsewhere; they are directional because the ratio is not
symmetric in its endpoints.

The approximator replaces the path product with a logistic pair scorer over
structural endpoint statistics, which makes tie inference inductive: it can
score pairs on graphs never seen during fitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import ParamStore, Tensor, adam_step, glorot_init
from .graphs import Graph, PathTable, weighted_degrees

#: raw structural descriptor width: 4 vertex statistics + their 1-round
#: mean aggregation over neighbors
EMBED_DIM = 8

TIE_MODEL_VERSION = 1


class TieTrainingError(RuntimeError):
    """Tie model fitting is impossible on the given inputs."""


class TieModelFormatError(ValueError):
    """Persisted tie model is malformed or of an unsupported version."""


# ---------------------------------------------------------------------------
# Exact ties
# ---------------------------------------------------------------------------

def tie_exact(g: Graph, paths: PathTable, i: int, j: int) -> float:
    """Exact social tie of the ordered pair (i, j); 0 when j is outside the radius."""
    if i == j:
        raise ValueError("tie_exact is defined for ordered pairs with i != j")
    seq = paths.path(i, j)
    if seq is None:
        return 0.0
    wd = weighted_degrees(g)
    t = 1.0
    for a, b in zip(seq[:-1], seq[1:]):
        t *= wd[a] / max(wd[a], wd[b])
    return float(t)


def tie_matrix_exact(g: Graph, paths: PathTable) -> np.ndarray:
    """N x N matrix of exact ties; entry (i, j) follows the stored i -> j path.

    Computed incrementally along the per-source parent trees (the stored path
    of a vertex extends its parent's path by one edge), which keeps the cost
    linear in the number of reachable pairs.
    """
    n = g.n_vertices
    if paths.n_vertices != n:
        raise ValueError("path table does not match the graph")
    wd = weighted_degrees(g)
    out = np.zeros((n, n))
    for i in range(n):
        dist = paths.dist[i]
        parent = paths.parent[i]
        for j in sorted(dist, key=dist.__getitem__):
            if j == i:
                continue
            p = parent[j]
            base = 1.0 if p == i else out[i, p]
            out[i, j] = base * (wd[p] / max(wd[p], wd[j]))
    return out


def save_tie_matrix(path, matrix: np.ndarray) -> None:
    """Write a tie (or kernel) matrix as CSV with 12 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(",".join(f"{x:.12g}" for x in row) + "\n")


def load_tie_matrix(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


# ---------------------------------------------------------------------------
# Structural descriptors
# ---------------------------------------------------------------------------

def _clustering(g: Graph, v: int) -> float:
    nbrs = [u for u, _ in g.adjacency[v]]
    k = len(nbrs)
    if k < 2:
        return 0.0
    nbr_set = set(nbrs)
    links = 0
    for u in nbrs:
        for w, _ in g.adjacency[u]:
            if w > u and w in nbr_set:
                links += 1
    return 2.0 * links / (k * (k - 1))


def structural_features(g: Graph) -> np.ndarray:
    """Raw structural descriptors for every vertex, shape (N, 8).

    Columns 0..3: degree, weighted degree, local clustering coefficient,
    mean neighbor degree. Columns 4..7: the mean of the same four raw
    statistics over the vertex's neighbors (zeros for isolated vertices).
    """
    n = g.n_vertices
    wd = weighted_degrees(g)
    deg = np.array([g.degree(v) for v in range(n)], dtype=np.float64)
    clust = np.array([_clustering(g, v) for v in range(n)])
    mean_nbr_deg = np.array(
        [np.mean([deg[u] for u, _ in g.adjacency[v]]) if g.adjacency[v] else 0.0
         for v in range(n)]
    )
    base = np.column_stack([deg, wd, clust, mean_nbr_deg])
    agg = np.zeros_like(base)
    for v in range(n):
        nbrs = [u for u, _ in g.adjacency[v]]
        if nbrs:
            agg[v] = base[nbrs].mean(axis=0)
    return np.column_stack([base, agg])


def structural_embedding(g: Graph, v: int) -> np.ndarray:
    """Raw 8-dimensional structural descriptor of vertex ``v`` (un-normalized)."""
    if not 0 <= v < g.n_vertices:
        raise IndexError(f"vertex {v} out of range")
    return structural_features(g)[v]


# ---------------------------------------------------------------------------
# Inductive tie model
# ---------------------------------------------------------------------------

@dataclass
class TieModel:
    """Logistic pair scorer over normalized structural descriptors.

    Input per ordered pair: ``[emb(i), emb(j), hops(i, j) / H]`` (17 values),
    with both descriptors z-normalized by constants fitted on the training
    graph. Two affine layers with a rectified-linear hidden activation and a
    logistic output keep predictions in (0, 1) by construction.
    """

    hops: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def input_dim(self) -> int:
        return 2 * EMBED_DIM + 1

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.norm_mean) / self.norm_std

    def score(self, pair_rows: np.ndarray) -> np.ndarray:
        """Logistic score for a batch of assembled pair-feature rows."""
        if pair_rows.shape[1] != self.w1.shape[0]:
            raise ValueError(
                f"pair features have width {pair_rows.shape[1]}, "
                f"model expects {self.w1.shape[0]}"
            )
        h = np.maximum(pair_rows @ self.w1 + self.b1, 0.0)
        z = h @ self.w2 + self.b2
        return 1.0 / (1.0 + np.exp(-z[:, 0]))

    def to_json(self) -> str:
        doc = {
            "format": "gravembed-tie-model",
            "version": TIE_MODEL_VERSION,
            "hops": self.hops,
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TieModel":
        doc = json.loads(text)
        if doc.get("format") != "gravembed-tie-model":
            raise TieModelFormatError("not a tie model file")
        if doc.get("version") != TIE_MODEL_VERSION:
            raise TieModelFormatError(
                f"unsupported tie model version {doc.get('version')!r}"
            )
        return cls(
            hops=int(doc["hops"]),
            norm_mean=np.array(doc["norm_mean"]),
            norm_std=np.array(doc["norm_std"]),
            w1=np.array(doc["w1"]),
            b1=np.array(doc["b1"]),
            w2=np.array(doc["w2"]),
            b2=np.array(doc["b2"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "TieModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _pair_rows(model_hops, norm_emb: np.ndarray, pairs, hops) -> np.ndarray:
    rows = np.empty((len(pairs), 2 * EMBED_DIM + 1))
    rows[:, :EMBED_DIM] = norm_emb[[p[0] for p in pairs]]
    rows[:, EMBED_DIM:2 * EMBED_DIM] = norm_emb[[p[1] for p in pairs]]
    rows[:, -1] = np.asarray(hops, dtype=np.float64) / model_hops
    return rows


def tie_model_train(
    g: Graph,
    truth: np.ndarray,
    paths: PathTable,
    epochs: int,
    lr: float,
    seed: int,
    hidden: int = 64,
) -> TieModel:
    """Fit the pair scorer to minimize mean squared error against exact ties.

    Training pairs are all ordered reachable pairs within the hop radius;
    unreachable pairs are identically 0 by definition and are not learned.
    Full-batch Adam; deterministic for a fixed seed.
    """
    pairs = [(i, j) for i, j, _h in paths.pairs()]
    if not pairs:
        raise TieTrainingError("no reachable pairs within the hop radius")
    hops = [paths.dist[i][j] for i, j in pairs]

    raw = structural_features(g)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    norm = (raw - mean) / std

    x = _pair_rows(paths.max_hops, norm, pairs, hops)
    y = np.array([truth[i, j] for i, j in pairs])

    rng = np.random.default_rng(seed)
    d = x.shape[1]
    params = ParamStore()
    params.add("w1", glorot_init(rng, d, hidden, (d, hidden)))
    params.add("b1", glorot_init(rng, d, hidden, (hidden,)))
    params.add("w2", glorot_init(rng, hidden, 1, (hidden, 1)))
    params.add("b2", glorot_init(rng, hidden, 1, (1,)))

    x_t = Tensor(x)
    y_t = Tensor(y[:, None])
    for _ in range(epochs):
        h = autodiff.relu(autodiff.add(autodiff.matmul(x_t, params["w1"]), params["b1"]))
        pred = autodiff.sigmoid(autodiff.add(autodiff.matmul(h, params["w2"]), params["b2"]))
        err = autodiff.sub(pred, y_t)
        loss = autodiff.mean_all(autodiff.mul(err, err))
        loss.backward()
        adam_step(params, lr)

    return TieModel(
        hops=paths.max_hops,
        norm_mean=mean,
        norm_std=std,
        w1=params["w1"].data.copy(),
        b1=params["b1"].data.copy(),
        w2=params["w2"].data.copy(),
        b2=params["b2"].data.copy(),
    )


def tie_model_predict(model: TieModel, g: Graph, paths: PathTable, i: int, j: int) -> float:
    """Predicted tie for one ordered pair; unreachable pairs short-circuit to 0."""
    if i == j:
        return 0.0
    h = paths.hop_distance(i, j)
    if h is None:
        return 0.0
    norm = model.normalize(structural_features(g))
    row = _pair_rows(model.hops, norm, [(i, j)], [h])
    return float(model.score(row)[0])


def tie_model_matrix(model: TieModel, g: Graph, paths: PathTable) -> np.ndarray:
    """Predicted tie matrix on ``g``: scored on reachable pairs, 0 elsewhere."""
    n = g.n_vertices
    norm = model.normalize(structural_features(g))
    pairs = [(i, j) for i, j, _h in paths.pairs()]
    out = np.zeros((n, n))
    if not pairs:
        return out
    hops = [paths.dist[i][j] for i, j in pairs]
    scores = model.score(_pair_rows(model.hops, norm, pairs, hops))
    for (i, j), s in zip(pairs, scores):
        out[i, j] = s
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TieMetrics:
    """Absolute, squared and percentage errors between tie matrices.

    MAE and MSE run over every ordered off-diagonal pair; MAPE runs over the
    subset whose ground truth is at least 1e-8 (near-zero references blow up
    the percentage), and ``n_pairs_used`` reports that subset's size.
    """

    mae: float
    mse: float
    mape: float
    n_pairs_used: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "mape": self.mape,
            "n_pairs_used": self.n_pairs_used,
        }


def tie_metrics(pred: np.ndarray, truth: np.ndarray) -> TieMetrics:
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    n = pred.shape[0]
    off = ~np.eye(n, dtype=bool)
    err = np.abs(pred - truth)[off]
    mae = float(err.mean()) if err.size else 0.0
    mse = float((err * err).mean()) if err.size else 0.0
    mape_mask = off & (truth >= 1e-8)
    n_used = int(mape_mask.sum())
    if n_used:
        mape = float((np.abs(pred - truth)[mape_mask] / truth[mape_mask]).mean())
    else:
        mape = 0.0
    return TieMetrics(mae=mae, mse=mse, mape=mape, n_pairs_used=n_used)
