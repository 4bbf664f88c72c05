"""Joint training loop, early stopping, classification, and model persistence.

Each epoch embeds the whole graph, rebuilds the latent force field from the
fresh embeddings, scores the labeled group-force rows with the
discriminator, and takes one Adam step on the combined silhouette +
discriminator objective. Validation accuracy drives early stopping; the
best-epoch parameters and reference embeddings are what the trained model
keeps.

Classification attracts a query embedding toward each class of the labeled
reference set (similarity times tie, summed per class) and lets the
discriminator read the resulting signature. For vertices of a graph that is
disjoint from the training graph no structural path exists, so the tie
factor defaults to 1 and attraction is driven by similarity alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import NonFiniteError, ParamStore, Tensor, adam_step
from .forces import gate_mask, membership_matrix, pairwise_similarity, similarity_matrix
from .graphs import Graph, PathTable, all_pairs_paths
from .nets import (
    DiscriminatorConfig,
    EncoderConfig,
    discriminator_forward,
    discriminator_loss,
    encoder_forward,
    init_params,
    silhouette_loss,
    total_loss,
)
from .ties import TieModel, tie_matrix_exact, tie_model_matrix, tie_model_train

ARCHIVE_VERSION = 1


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the offending epoch and the history so far."""

    def __init__(self, epoch: int, history):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch
        self.history = history


class ArchiveError(ValueError):
    """Model archive is malformed, corrupted, or of an unsupported version."""


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters, with the experimental-protocol defaults."""

    gate_threshold: float = 0.05
    gamma: float = 1.0
    embedding_dim: int = 4
    hidden_dims: tuple = (16,)
    disc_hidden_dims: tuple = (16,)
    hops: int = 3
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 100
    seed: int = 0
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    tie_source: str = "exact"
    silhouette_normalization: str = "sum"
    tie_epochs: int = 1500
    tie_lr: float = 1e-3
    tie_hidden: int = 64

    def __post_init__(self):
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("lambda must lie in [0,1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs[:2]) or self.test_frac < 0:
            raise ValueError("train and validation fractions must be positive")
        if sum(fracs) > 1.0 + 1e-12:
            raise ValueError("split fractions must sum to at most 1")
        if self.tie_source not in ("exact", "learned"):
            raise ValueError("tie_source must be 'exact' or 'learned'")
        if self.silhouette_normalization not in ("sum", "mean"):
            raise ValueError("silhouette_normalization must be 'sum' or 'mean'")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["disc_hidden_dims"] = list(self.disc_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("hidden_dims", "disc_hidden_dims"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    enc_loss: float
    disc_loss: float
    total_loss: float
    val_acc: float


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_split(labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> Split:
    """Seeded per-class shuffle into train/val/test index sets.

    Every class contributes at least one training vertex; leftover vertices
    (when the fractions sum below 1) stay unassigned.
    """
    train, val, test = [], [], []
    for k in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == k)
        members = members[rng.permutation(members.size)]
        n = members.size
        n_tr = max(1, int(round(cfg.train_frac * n)))
        n_va = int(round(cfg.val_frac * n))
        n_te = int(round(cfg.test_frac * n))
        n_va = min(n_va, n - n_tr)
        n_te = min(n_te, n - n_tr - n_va)
        train.extend(members[:n_tr])
        val.extend(members[n_tr:n_tr + n_va])
        test.extend(members[n_tr + n_va:n_tr + n_va + n_te])
    if not val:
        raise ValueError("validation split is empty; adjust fractions or add labels")
    return Split(
        train=np.array(sorted(train), dtype=np.int64),
        val=np.array(sorted(val), dtype=np.int64),
        test=np.array(sorted(test), dtype=np.int64),
    )


@dataclass
class TrainedModel:
    """Encoder + discriminator parameters with the class reference set."""

    params: ParamStore
    enc_cfg: EncoderConfig
    disc_cfg: DiscriminatorConfig
    tie_model: TieModel | None
    tie_source: str
    reference_embeddings: np.ndarray
    reference_labels: np.ndarray
    n_classes: int
    feature_dim: int
    config: TrainConfig
    history: list
    best_epoch: int
    best_val_acc: float

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        entries = {
            "params.bin": self.params.to_bytes(),
            "reference.bin": _reference_to_bytes(self.reference_embeddings),
            "history.csv": history_csv(self.history).encode("utf-8"),
        }
        if self.tie_model is not None:
            entries["tie_model.json"] = self.tie_model.to_json().encode("utf-8")
        meta = {
            "format": "gravembed-model",
            "version": ARCHIVE_VERSION,
            "n_classes": self.n_classes,
            "feature_dim": self.feature_dim,
            "tie_source": self.tie_source,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "reference_labels": self.reference_labels.tolist(),
            "enc_cfg": {
                "input_dim": self.enc_cfg.input_dim,
                "hidden_dims": list(self.enc_cfg.hidden_dims),
                "output_dim": self.enc_cfg.output_dim,
                "gate_threshold": self.enc_cfg.gate_threshold,
                "hops": self.enc_cfg.hops,
            },
            "disc_cfg": {
                "input_dim": self.disc_cfg.input_dim,
                "hidden_dims": list(self.disc_cfg.hidden_dims),
                "output_dim": self.disc_cfg.output_dim,
            },
            "config": self.config.to_dict(),
            "checksums": {name: hashlib.sha256(blob).hexdigest() for name, blob in entries.items()},
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=2))
            for name, blob in entries.items():
                zf.writestr(name, blob)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        try:
            zf = zipfile.ZipFile(path, "r")
        except (zipfile.BadZipFile, OSError) as exc:
            raise ArchiveError(f"cannot read model archive {path}: {exc}")
        with zf:
            try:
                meta = json.loads(zf.read("meta.json").decode("utf-8"))
            except KeyError:
                raise ArchiveError("model archive has no meta.json")
            if meta.get("format") != "gravembed-model":
                raise ArchiveError("not a gravembed model archive")
            if meta.get("version") != ARCHIVE_VERSION:
                raise ArchiveError(f"unsupported archive version {meta.get('version')!r}")
            blobs = {}
            for name, expect in meta["checksums"].items():
                blob = zf.read(name)
                got = hashlib.sha256(blob).hexdigest()
                if got != expect:
                    raise ArchiveError(f"checksum mismatch for archive entry {name!r}")
                blobs[name] = blob
        enc_cfg = EncoderConfig(
            input_dim=meta["enc_cfg"]["input_dim"],
            hidden_dims=tuple(meta["enc_cfg"]["hidden_dims"]),
            output_dim=meta["enc_cfg"]["output_dim"],
            gate_threshold=meta["enc_cfg"]["gate_threshold"],
            hops=meta["enc_cfg"]["hops"],
        )
        disc_cfg = DiscriminatorConfig(
            input_dim=meta["disc_cfg"]["input_dim"],
            hidden_dims=tuple(meta["disc_cfg"]["hidden_dims"]),
            output_dim=meta["disc_cfg"]["output_dim"],
        )
        tie_model = None
        if "tie_model.json" in blobs:
            tie_model = TieModel.from_json(blobs["tie_model.json"].decode("utf-8"))
        return cls(
            params=ParamStore.from_bytes(blobs["params.bin"]),
            enc_cfg=enc_cfg,
            disc_cfg=disc_cfg,
            tie_model=tie_model,
            tie_source=meta["tie_source"],
            reference_embeddings=_reference_from_bytes(blobs["reference.bin"]),
            reference_labels=np.array(meta["reference_labels"], dtype=np.int64),
            n_classes=int(meta["n_classes"]),
            feature_dim=int(meta["feature_dim"]),
            config=TrainConfig.from_dict(meta["config"]),
            history=_history_from_csv(blobs["history.csv"].decode("utf-8")),
            best_epoch=int(meta["best_epoch"]),
            best_val_acc=float(meta["best_val_acc"]),
        )


def _reference_to_bytes(emb: np.ndarray) -> bytes:
    head = json.dumps({"shape": list(emb.shape)}).encode("utf-8")
    return len(head).to_bytes(8, "little") + head + emb.astype("<f8").tobytes()


def _reference_from_bytes(blob: bytes) -> np.ndarray:
    hlen = int.from_bytes(blob[:8], "little")
    head = json.loads(blob[8:8 + hlen].decode("utf-8"))
    return np.frombuffer(blob[8 + hlen:], dtype="<f8").reshape(head["shape"]).copy()


def history_csv(history) -> str:
    # full round-trip precision: the archive must restore the exact history
    lines = ["epoch,enc_loss,disc_loss,total,val_acc"]
    for h in history:
        lines.append(
            f"{h.epoch},{h.enc_loss!r},{h.disc_loss!r},{h.total_loss!r},{h.val_acc!r}"
        )
    return "\n".join(lines) + "\n"


def _history_from_csv(text: str):
    out = []
    for line in text.strip().splitlines()[1:]:
        e, enc, disc, tot, acc = line.split(",")
        out.append(EpochStats(int(e), float(enc), float(disc), float(tot), float(acc)))
    return out


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def _sim_to_refs(emb_row: np.ndarray, refs: np.ndarray) -> np.ndarray:
    nq = np.linalg.norm(emb_row)
    nr = np.linalg.norm(refs, axis=1)
    sims = np.zeros(refs.shape[0])
    ok = (nq > 0) & (nr > 0)
    if nq > 0:
        cos = np.clip(refs[ok] @ emb_row / (nr[ok] * nq), -1.0, 1.0)
        sims[ok] = 0.5 * (1.0 + cos)
    return sims


def attraction_row(emb_row, refs, ref_labels, n_classes, tie_row=None) -> np.ndarray:
    """Per-class attraction of a query embedding toward the reference set.

    Each reference contributes ``sim(query, ref) * tie``; with no tie row
    (disjoint graph) the tie factor is 1. Per-class totals use compensated
    summation, so reference ordering cannot perturb the result.
    """
    sims = _sim_to_refs(np.asarray(emb_row, dtype=np.float64), refs)
    weights = sims if tie_row is None else sims * np.asarray(tie_row, dtype=np.float64)
    return np.array(
        [math.fsum(weights[ref_labels == k].tolist()) for k in range(n_classes)]
    )


def classify(model: TrainedModel, emb_row, labeled_ref=None, tie_row=None):
    """Predict a class for one embedding row against a labeled reference set.

    Returns ``(class_index, probability_vector)``; the class is the argmax of
    the discriminator's reading of the attraction signature, with ties going
    to the lowest class index. ``tie_row`` carries per-reference social ties
    when the query vertex shares the training graph; omit it for queries
    from a disjoint graph.
    """
    if labeled_ref is None:
        refs, ref_labels = model.reference_embeddings, model.reference_labels
    else:
        refs, ref_labels = labeled_ref
    refs = np.asarray(refs, dtype=np.float64)
    ref_labels = np.asarray(ref_labels, dtype=np.int64)
    present = np.bincount(ref_labels, minlength=model.n_classes)
    if (present == 0).any():
        missing = int(np.flatnonzero(present == 0)[0])
        raise ValueError(f"empty reference class {missing}")
    a = attraction_row(emb_row, refs, ref_labels, model.n_classes, tie_row)
    probs = discriminator_forward(model.params, a, model.disc_cfg).data[0]
    return int(np.argmax(probs)), probs


def embed_graph(model: TrainedModel, g: Graph, ties: np.ndarray | None = None,
                paths: PathTable | None = None) -> np.ndarray:
    """Embed any graph with the trained encoder.

    Ties default to the learned tie model's zero-shot predictions (or the
    exact oracle when the model was trained without one).
    """
    if g.feature_dim != model.feature_dim:
        raise ValueError(
            f"feature dimension mismatch: graph has {g.feature_dim}, "
            f"model was trained on {model.feature_dim}"
        )
    if paths is None:
        paths = all_pairs_paths(g, model.enc_cfg.hops)
    if ties is None:
        if model.tie_model is not None:
            ties = tie_model_matrix(model.tie_model, g, paths)
        else:
            ties = tie_matrix_exact(g, paths)
    state = encoder_forward(model.params, g, ties, paths, model.enc_cfg)
    return state.values


@dataclass
class InductiveReport:
    """Accuracy plus per-class precision/recall and the confusion matrix."""

    accuracy: float
    per_class: list
    confusion: np.ndarray
    n_vertices: int
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_vertices": self.n_vertices,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
        }


def evaluate_inductive(model: TrainedModel, g_test: Graph) -> InductiveReport:
    """Score a labeled test graph under the inductive protocol.

    Ties on the test graph come from the learned tie model (zero-shot); the
    encoder embeds the test graph as-is, and every vertex is classified
    against the training reference set with unit tie factors, since no
    structural path joins disjoint graphs.
    """
    if not (g_test.labels >= 0).any():
        raise ValueError("inductive evaluation needs labels on the test graph")
    emb = embed_graph(model, g_test)
    preds = np.empty(g_test.n_vertices, dtype=np.int64)
    for v in range(g_test.n_vertices):
        preds[v], _ = classify(model, emb[v])
    labeled = g_test.labeled_indices()
    truth = g_test.labels[labeled]
    guess = preds[labeled]
    k = model.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truth, guess):
        confusion[t, p] += 1
    per_class = []
    for c in range(k):
        tp = int(confusion[c, c])
        support = int(confusion[c].sum())
        predicted = int(confusion[:, c].sum())
        per_class.append(
            {
                "class": c,
                "precision": tp / predicted if predicted else 0.0,
                "recall": tp / support if support else 0.0,
                "support": support,
            }
        )
    return InductiveReport(
        accuracy=float((truth == guess).mean()),
        per_class=per_class,
        confusion=confusion,
        n_vertices=g_test.n_vertices,
        predictions=preds,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveParts:
    """One forward pass of the full objective, with the gate patterns it used."""

    state: object
    enc_loss: Tensor
    disc_loss: Tensor
    total: Tensor
    encoder_gates: list
    latent_gate: np.ndarray


def full_objective(
    params: ParamStore,
    g: Graph,
    ties: np.ndarray,
    paths: PathTable,
    enc_cfg: EncoderConfig,
    disc_cfg: DiscriminatorConfig,
    membership: np.ndarray,
    labeled_idx: np.ndarray,
    gamma: float,
    normalization: str = "sum",
    frozen: tuple | None = None,
    reach: np.ndarray | None = None,
) -> ObjectiveParts:
    """Silhouette + discriminator objective for one forward pass.

    ``frozen`` replays the gate patterns of a previous pass (encoder-layer
    gates and the latent-kernel gate), which keeps the objective a smooth
    function of the parameters for finite-difference verification.
    """
    if reach is None:
        reach = paths.reachable_mask()
    enc_gates = frozen[0] if frozen is not None else None
    state = encoder_forward(params, g, ties, paths, enc_cfg,
                            frozen_gates=enc_gates, reach=reach)
    y = state.y

    if frozen is not None:
        latent_gate = frozen[1]
    else:
        latent_gate = gate_mask(similarity_matrix(y.data), ties, reach,
                                enc_cfg.gate_threshold)
    kernel = autodiff.mul(pairwise_similarity(y), Tensor(np.where(latent_gate, ties, 0.0)))
    group = autodiff.matmul(kernel, Tensor(membership))
    rows = autodiff.gather_rows(group, labeled_idx)
    probs = discriminator_forward(params, rows, disc_cfg)

    enc_loss = silhouette_loss(y, g.labels, labeled_idx, normalization).loss
    disc_loss = discriminator_loss(probs, g.labels[labeled_idx])
    total = total_loss(enc_loss, disc_loss, gamma)
    return ObjectiveParts(
        state=state,
        enc_loss=enc_loss,
        disc_loss=disc_loss,
        total=total,
        encoder_gates=state.gates,
        latent_gate=latent_gate,
    )


def _validation_accuracy(params, disc_cfg, emb, labels, split: Split,
                         ties: np.ndarray, n_classes: int) -> float:
    refs = emb[split.train]
    ref_labels = labels[split.train]
    correct = 0
    for v in split.val:
        a = attraction_row(emb[v], refs, ref_labels, n_classes, ties[v, split.train])
        probs = discriminator_forward(params, a, disc_cfg).data[0]
        if int(np.argmax(probs)) == labels[v]:
            correct += 1
    return correct / split.val.size


def train(g: Graph, cfg: TrainConfig, snapshot_cb=None) -> TrainedModel:
    """Jointly fit encoder and discriminator on a labeled graph.

    Per epoch: embed all vertices, rebuild the latent force field from the
    fresh embeddings, read the labeled group-force rows with the
    discriminator, take one Adam step on the combined objective, then measure
    validation accuracy. Stops after ``patience`` epochs without a validation
    improvement and restores the best-epoch parameters. Deterministic for a
    fixed seed.

    ``snapshot_cb(epoch, embeddings)`` is invoked once per epoch with the
    post-step embedding matrix, for trajectory export.
    """
    labeled = g.labeled_indices()
    if labeled.size == 0 or np.unique(g.labels[labeled]).size < 2:
        raise ValueError("training needs labels from at least 2 classes")
    k = g.n_classes

    rng = np.random.default_rng(cfg.seed)
    split = stratified_split(g.labels, cfg, rng)

    paths = all_pairs_paths(g, cfg.hops)
    exact = tie_matrix_exact(g, paths)
    tie_model = tie_model_train(
        g, exact, paths, epochs=cfg.tie_epochs, lr=cfg.tie_lr,
        seed=cfg.seed, hidden=cfg.tie_hidden,
    )
    ties = exact if cfg.tie_source == "exact" else tie_model_matrix(tie_model, g, paths)

    enc_cfg = EncoderConfig(
        input_dim=g.feature_dim,
        hidden_dims=tuple(cfg.hidden_dims),
        output_dim=cfg.embedding_dim,
        gate_threshold=cfg.gate_threshold,
        hops=cfg.hops,
    )
    disc_cfg = DiscriminatorConfig(
        input_dim=k, hidden_dims=tuple(cfg.disc_hidden_dims), output_dim=k
    )
    params = init_params(enc_cfg, disc_cfg, rng)

    membership = membership_matrix(g.labels, k, restrict=split.train)
    reach = paths.reachable_mask()

    history: list[EpochStats] = []
    best_val = -1.0
    best_epoch = -1
    best_params = None
    best_reference = None

    for epoch in range(1, cfg.max_epochs + 1):
        try:
            parts = full_objective(
                params, g, ties, paths, enc_cfg, disc_cfg, membership,
                split.train, cfg.gamma, cfg.silhouette_normalization, reach=reach,
            )
            if not np.isfinite(parts.total.data):
                raise NonFiniteError("non-finite loss")
            parts.total.backward()
            adam_step(params, cfg.lr, cfg.weight_decay)

            eval_state = encoder_forward(params, g, ties, paths, enc_cfg, reach=reach)
        except NonFiniteError:
            raise DivergenceError(epoch, history)

        emb = eval_state.values
        val_acc = _validation_accuracy(params, disc_cfg, emb, g.labels, split, ties, k)
        history.append(
            EpochStats(epoch, parts.enc_loss.item(), parts.disc_loss.item(),
                       parts.total.item(), val_acc)
        )
        if snapshot_cb is not None:
            snapshot_cb(epoch, emb)

        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_params = params.copy_values()
            best_reference = emb[split.train].copy()
        elif epoch - best_epoch >= cfg.patience:
            break

    params.load_values(best_params)
    return TrainedModel(
        params=params,
        enc_cfg=enc_cfg,
        disc_cfg=disc_cfg,
        tie_model=tie_model,
        tie_source=cfg.tie_source,
        reference_embeddings=best_reference,
        reference_labels=g.labels[split.train].copy(),
        n_classes=k,
        feature_dim=g.feature_dim,
        config=cfg,
        history=history,
        best_epoch=best_epoch,
        best_val_acc=best_val,
    )


def split_for(g: Graph, cfg: TrainConfig) -> Split:
    """The exact split a training run with this config would use."""
    rng = np.random.default_rng(cfg.seed)
    return stratified_split(g.labels, cfg, rng)
