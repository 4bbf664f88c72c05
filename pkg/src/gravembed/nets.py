"""Force-gated encoder, group-force discriminator, and the training losses.

The encoder recomputes the force kernel on each layer's incoming latent
signal, so a vertex's receptive field follows the evolving similarities
instead of a fixed hop pattern. Gates are boolean and are treated as
constants during differentiation: gradients flow through the surviving
similarity-tie products only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import ParamStore, Tensor, glorot_init
from .forces import gate_mask, pairwise_similarity, similarity_matrix
from .graphs import Graph, PathTable


@dataclass(frozen=True)
class EncoderConfig:
    """Layer shapes and gating for the encoder.

    ``hidden_dims`` lists the aggregation layers; the final affine layer maps
    to ``output_dim`` with a hyperbolic-tangent squash, which keeps embedding
    entries in (-1, 1) and cosine similarities well-conditioned.
    """

    input_dim: int
    hidden_dims: tuple
    output_dim: int
    gate_threshold: float
    hops: int

    def __post_init__(self):
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2")
        if self.output_dim >= self.input_dim:
            raise ValueError("output_dim must be smaller than input_dim")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("all hidden dims must be >= 1")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate threshold must lie in [0, 1]")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Layer shapes for the group-force discriminator; input and output are both K."""

    input_dim: int
    hidden_dims: tuple
    output_dim: int

    def __post_init__(self):
        if self.input_dim != self.output_dim:
            raise ValueError("discriminator input and output dims must both equal K")
        if self.input_dim < 2:
            raise ValueError("discriminator needs K >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("all hidden dims must be >= 1")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]


def init_params(enc_cfg: EncoderConfig, disc_cfg: DiscriminatorConfig | None,
                rng: np.random.Generator) -> ParamStore:
    """Parameter stack: Glorot-uniform weights, zero biases.

    Zero biases keep the rectified-linear + softmax readout close to
    positively homogeneous, so class decisions survive the scale shift
    between tie-damped training signatures and unit-tie inductive ones.
    """
    params = ParamStore()
    dims = enc_cfg.layer_dims
    for p in range(1, len(dims)):
        fi, fo = dims[p - 1], dims[p]
        params.add(f"enc.w{p}", glorot_init(rng, fi, fo, (fi, fo)))
        params.add(f"enc.b{p}", np.zeros(fo))
    if disc_cfg is not None:
        dims = disc_cfg.layer_dims
        for r in range(1, len(dims)):
            fi, fo = dims[r - 1], dims[r]
            params.add(f"disc.w{r}", glorot_init(rng, fi, fo, (fi, fo)))
            params.add(f"disc.b{r}", np.zeros(fo))
    return params


@dataclass
class EncoderState:
    """Encoder output with per-layer latent tensors and the frozen gate patterns."""

    y: Tensor
    layers: list
    gates: list

    @property
    def values(self) -> np.ndarray:
        return self.y.data


def encoder_forward(
    params: ParamStore,
    g: Graph,
    ties: np.ndarray,
    paths: PathTable,
    cfg: EncoderConfig,
    frozen_gates: list | None = None,
    reach: np.ndarray | None = None,
) -> EncoderState:
    """Embed all vertices by force-gated aggregation.

    Per aggregation layer: rebuild the gated kernel on the incoming signal,
    add each vertex's own signal to its kernel-weighted neighbor sum, and
    apply an affine map with a rectified-linear activation. The final affine
    layer applies a hyperbolic tangent. ``frozen_gates`` replays previously
    recorded gate patterns (used by gradient checks, where the gate must not
    flip between perturbed evaluations).
    """
    if g.feature_dim != cfg.input_dim:
        raise ValueError(
            f"graph features have dim {g.feature_dim}, encoder expects {cfg.input_dim}"
        )
    if ties.shape != (g.n_vertices, g.n_vertices):
        raise ValueError("tie matrix does not match the graph")
    if reach is None:
        reach = paths.reachable_mask()
    z = Tensor(g.features)
    layers = [z]
    gates = []
    n_agg = len(cfg.hidden_dims)
    for p in range(1, n_agg + 1):
        if frozen_gates is not None:
            gate = frozen_gates[p - 1]
        else:
            sim = similarity_matrix(z.data)
            gate = gate_mask(sim, ties, reach, cfg.gate_threshold)
        gates.append(gate)
        if gate.any():
            kernel = autodiff.mul(pairwise_similarity(z), Tensor(np.where(gate, ties, 0.0)))
            agg = autodiff.add(z, autodiff.matmul(kernel, z))
        else:
            agg = z  # closed gate: every vertex keeps only its own signal
        z = autodiff.relu(
            autodiff.add(autodiff.matmul(agg, params[f"enc.w{p}"]), params[f"enc.b{p}"])
        )
        layers.append(z)
    out_idx = n_agg + 1
    y = autodiff.tanh(
        autodiff.add(autodiff.matmul(z, params[f"enc.w{out_idx}"]), params[f"enc.b{out_idx}"])
    )
    return EncoderState(y=y, layers=layers, gates=gates)


def mlp_forward(params: ParamStore, feats: np.ndarray, cfg: EncoderConfig) -> Tensor:
    """The encoder with no graph interaction at all: plain per-vertex layers.

    Reference implementation for the closed-gate ablation; shares the same
    parameters and activation chain as :func:`encoder_forward`.
    """
    z = autodiff.as_tensor(feats)
    for p in range(1, len(cfg.hidden_dims) + 1):
        z = autodiff.relu(
            autodiff.add(autodiff.matmul(z, params[f"enc.w{p}"]), params[f"enc.b{p}"])
        )
    out_idx = len(cfg.hidden_dims) + 1
    return autodiff.tanh(
        autodiff.add(autodiff.matmul(z, params[f"enc.w{out_idx}"]), params[f"enc.b{out_idx}"])
    )


def discriminator_forward(params: ParamStore, force_rows, cfg: DiscriminatorConfig) -> Tensor:
    """Per-row class probabilities from group-force signature vectors.

    Accepts a single K-vector or a batch of rows; hidden layers are
    rectified-linear, the output row is a softmax (sums to 1).
    """
    t = autodiff.as_tensor(force_rows)
    single = t.data.ndim == 1
    if single:
        t = autodiff.as_tensor(t.data[None, :])
    if t.data.shape[1] != cfg.input_dim:
        raise ValueError(
            f"force rows have width {t.data.shape[1]}, discriminator expects {cfg.input_dim}"
        )
    h = t
    for r in range(1, len(cfg.hidden_dims) + 1):
        h = autodiff.relu(
            autodiff.add(autodiff.matmul(h, params[f"disc.w{r}"]), params[f"disc.b{r}"])
        )
    out_idx = len(cfg.hidden_dims) + 1
    logits = autodiff.add(autodiff.matmul(h, params[f"disc.w{out_idx}"]), params[f"disc.b{out_idx}"])
    probs = autodiff.softmax_rows(logits)
    if single:
        return autodiff.gather_rows(probs, [0])
    return probs


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class SilhouetteResult:
    """Scalar loss tensor plus the per-vertex diagnostics behind it."""

    loss: Tensor
    sil: np.ndarray
    in_force: np.ndarray
    out_force: np.ndarray
    active: np.ndarray


def silhouette_loss(emb, labels: np.ndarray, labeled_set, normalization: str = "sum") -> SilhouetteResult:
    """Attraction-based silhouette loss over the labeled vertices.

    For each labeled vertex, the in-force sums similarities to same-class
    labeled vertices and the out-force is the smallest per-class similarity
    sum among the other labeled classes; the silhouette is their normalized
    difference and the loss is ``sum_i (1 - sil_i) / 2``. With
    ``normalization="mean"`` both forces are averaged over their class sizes
    instead of summed. Vertices with neither in- nor out-force get
    silhouette 0 (loss 1/2) and no gradient.

    The min over classes and the max in the denominator differentiate
    through their attained branch; class ties resolve toward the lower
    index, in/out ties toward the in-branch.
    """
    if normalization not in ("sum", "mean"):
        raise ValueError(f"unknown silhouette normalization {normalization!r}")
    emb_t = autodiff.as_tensor(emb)
    idx = np.asarray(labeled_set, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("labeled_set is empty")
    lab = np.asarray(labels, dtype=np.int64)[idx]
    if lab.min() < 0:
        raise ValueError("labeled_set contains unlabeled vertices")
    classes, counts_arr = np.unique(lab, return_counts=True)
    if classes.size < 2:
        raise ValueError("silhouette loss needs at least 2 classes among the labeled set")
    n_classes = int(lab.max()) + 1
    counts = np.zeros(n_classes)
    counts[classes] = counts_arr

    rows = autodiff.gather_rows(emb_t, idx)
    sims = pairwise_similarity(rows)
    s = sims.data
    m = idx.size

    onehot = np.zeros((m, n_classes))
    onehot[np.arange(m), lab] = 1.0
    s_off = s.copy()
    np.fill_diagonal(s_off, 0.0)
    class_sums = s_off @ onehot  # (m, K): summed similarity toward each class

    if normalization == "mean":
        in_den = np.maximum(counts[lab] - 1.0, 1.0)
        out_den = np.maximum(counts, 1.0)
    else:
        in_den = np.ones(m)
        out_den = np.ones(n_classes)

    in_np = class_sums[np.arange(m), lab] / in_den
    cand = class_sums / out_den[None, :]
    blocked = (counts[None, :] == 0) | (onehot > 0)
    cand = np.where(blocked, np.inf, cand)
    branch = np.argmin(cand, axis=1)  # ties resolve to the lowest class index
    out_np = cand[np.arange(m), branch]

    active = np.maximum(in_np, out_np) > 0.0
    take_in = active & (in_np >= out_np)
    take_out = active & ~take_in

    # same-class indicator excluding the diagonal, scaled for the chosen normalization
    in_w = np.zeros((m, m))
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    in_w[same] = 1.0
    in_w /= in_den[:, None]
    in_w[~active] = 0.0
    out_w = (lab[None, :] == branch[:, None]).astype(np.float64)
    out_w /= out_den[branch][:, None]
    out_w[~active] = 0.0

    in_t = autodiff.row_sum(autodiff.mul(sims, Tensor(in_w)))
    out_t = autodiff.row_sum(autodiff.mul(sims, Tensor(out_w)))
    denom = autodiff.add(
        autodiff.add(
            autodiff.mul(in_t, Tensor(take_in.astype(np.float64))),
            autodiff.mul(out_t, Tensor(take_out.astype(np.float64))),
        ),
        Tensor((~active).astype(np.float64)),
    )
    sil = autodiff.div(autodiff.sub(in_t, out_t), denom)
    per_vertex = autodiff.scale(autodiff.add_const(autodiff.neg(sil), 1.0), 0.5)
    loss = autodiff.fsum_all(per_vertex)
    return SilhouetteResult(
        loss=loss,
        sil=sil.data.copy(),
        in_force=in_np,
        out_force=out_np,
        active=active,
    )


def discriminator_loss(probs, labels) -> Tensor:
    """Sum over labeled vertices of one minus the true-class probability."""
    t = autodiff.as_tensor(probs)
    lab = np.asarray(labels, dtype=np.int64)
    if t.data.ndim != 2 or t.data.shape[0] != lab.shape[0]:
        raise ValueError(
            f"need one probability row per labeled vertex: {t.data.shape} vs {lab.shape[0]} labels"
        )
    n, k = t.data.shape
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError("labels outside the probability rows' class range")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0
    hit = autodiff.fsum_all(autodiff.mul(t, Tensor(onehot)))
    return autodiff.add_const(autodiff.neg(hit), float(n))


def total_loss(enc_loss, disc_loss, gamma: float):
    """Combined objective: encoder loss plus ``gamma`` times the discriminator loss."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if isinstance(enc_loss, Tensor) or isinstance(disc_loss, Tensor):
        return autodiff.add(autodiff.as_tensor(enc_loss),
                            autodiff.scale(autodiff.as_tensor(disc_loss), gamma))
    return enc_loss + gamma * disc_loss
