"""Batch command-line surface: tie oracles, tie fitting, training, prediction, export.

Exit codes: 0 success, 2 input or validation error, 3 numeric failure
(divergence). Every run writes exactly one JSON manifest recording the
resolved configuration, input digests, output paths, seed and duration;
manifests are the only outputs that vary between identical runs
(timestamps), everything numeric is reproduced bit for bit under a fixed
seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, StoreFormatError
from .forces import force_kernel, group_force, membership_matrix
from .graphs import GraphFormatError, all_pairs_paths, generate_sbm, load_graph, save_graph
from .ties import (
    TieModel,
    TieModelFormatError,
    TieTrainingError,
    save_tie_matrix,
    tie_matrix_exact,
    tie_metrics,
    tie_model_matrix,
    tie_model_train,
)
from .training import (
    ArchiveError,
    DivergenceError,
    TrainConfig,
    TrainedModel,
    classify,
    embed_graph,
    history_csv,
    train,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    """User-facing validation failure; maps to exit code 2."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(manifest_path: Path, command: str, config: dict,
                    inputs: list, outputs: list, seed, started: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "duration_seconds": time.time() - started,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _load_graph_args(args):
    for name in ("edges", "features"):
        p = Path(getattr(args, name))
        if not p.exists():
            raise CliError(f"missing {name} file: {p}")
    if args.labels is not None and not Path(args.labels).exists():
        raise CliError(f"missing labels file: {args.labels}")
    return load_graph(args.edges, args.features, args.labels)


def _graph_inputs(args) -> list:
    inputs = [args.edges, args.features]
    if args.labels is not None:
        inputs.append(args.labels)
    return inputs


def _add_graph_args(sub, labels_required=False):
    sub.add_argument("--edges", required=True, help="edge list file (src<TAB>dst<TAB>weight)")
    sub.add_argument("--features", required=True, help="feature CSV, one row per vertex")
    sub.add_argument("--labels", required=labels_required, default=None,
                     help="label CSV with leading K=<classes> line")


def _write_embedding_csv(path: Path, emb: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dims = ",".join(f"y_{d}" for d in range(emb.shape[1]))
        fh.write(f"vertex,label,{dims}\n")
        for v in range(emb.shape[0]):
            vals = ",".join(f"{x:.12g}" for x in emb[v])
            fh.write(f"{v},{int(labels[v])},{vals}\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_sbm(args) -> int:
    started = time.time()
    g = generate_sbm(args.blocks, args.per_block, args.p_in, args.p_out,
                     args.feature_dim, args.feature_shift, args.seed)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    edge_path = prefix.with_suffix(".edges")
    feat_path = prefix.with_suffix(".features.csv")
    label_path = prefix.with_suffix(".labels.csv")
    save_graph(g, edge_path, feat_path, label_path)
    _write_manifest(
        prefix.with_suffix(".manifest.json"), "gen-sbm",
        {k: getattr(args, k) for k in
         ("blocks", "per_block", "p_in", "p_out", "feature_dim", "feature_shift", "seed")},
        [], [edge_path, feat_path, label_path], args.seed, started,
    )
    print(f"wrote SBM graph with {g.n_vertices} vertices, {g.n_edges} edges to {prefix}.*")
    return EXIT_OK


def cmd_tie_oracle(args) -> int:
    started = time.time()
    g = _load_graph_args(args)
    paths = all_pairs_paths(g, args.hops)
    matrix = tie_matrix_exact(g, paths)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tie_matrix(out, matrix)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "tie-oracle", {"hops": args.hops},
        _graph_inputs(args), [out], None, started,
    )
    print(f"wrote {matrix.shape[0]}x{matrix.shape[0]} tie matrix to {out}")
    return EXIT_OK


def cmd_tie_fit(args) -> int:
    started = time.time()
    g = _load_graph_args(args)
    paths = all_pairs_paths(g, args.hops)
    truth = tie_matrix_exact(g, paths)
    model = tie_model_train(g, truth, paths, epochs=args.epochs, lr=args.lr,
                            seed=args.seed, hidden=args.hidden)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    pred = tie_model_matrix(model, g, paths)
    metrics = tie_metrics(pred, truth)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(out) + ".metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump({"in_domain": metrics.to_dict()}, fh, indent=2)
        fh.write("\n")
    _write_manifest(
        Path(str(out) + ".manifest.json"), "tie-fit",
        {"hops": args.hops, "epochs": args.epochs, "lr": args.lr, "hidden": args.hidden},
        _graph_inputs(args), [out, metrics_path], args.seed, started,
    )
    print(f"in-domain MAE={metrics.mae:.4f} MSE={metrics.mse:.4f} "
          f"MAPE={metrics.mape:.4f} over {metrics.n_pairs_used} pairs")
    return EXIT_OK


def cmd_tie_eval(args) -> int:
    started = time.time()
    model_path = Path(args.model)
    if not model_path.exists():
        raise CliError(f"missing tie model file: {model_path}")
    model = TieModel.load(model_path)
    g = _load_graph_args(args)
    paths = all_pairs_paths(g, model.hops)
    truth = tie_matrix_exact(g, paths)
    pred = tie_model_matrix(model, g, paths)
    metrics = tie_metrics(pred, truth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"zero_shot": metrics.to_dict()}, fh, indent=2)
        fh.write("\n")
    _write_manifest(
        Path(str(out) + ".manifest.json"), "tie-eval", {"hops": model.hops},
        [model_path, *_graph_inputs(args)], [out], None, started,
    )
    print(f"zero-shot MAE={metrics.mae:.4f} MSE={metrics.mse:.4f} "
          f"MAPE={metrics.mape:.4f} over {metrics.n_pairs_used} pairs")
    return EXIT_OK


_CONFIG_KEYS = {
    "lambda": ("gate_threshold", float),
    "gamma": ("gamma", float),
    "embedding_dim": ("embedding_dim", int),
    "hidden_dims": ("hidden_dims", lambda s: tuple(int(x) for x in s.split(",") if x)),
    "disc_hidden_dims": ("disc_hidden_dims", lambda s: tuple(int(x) for x in s.split(",") if x)),
    "hops": ("hops", int),
    "lr": ("lr", float),
    "weight_decay": ("weight_decay", float),
    "max_epochs": ("max_epochs", int),
    "patience": ("patience", int),
    "seed": ("seed", int),
    "train_frac": ("train_frac", float),
    "val_frac": ("val_frac", float),
    "test_frac": ("test_frac", float),
    "tie_source": ("tie_source", str),
    "silhouette_normalization": ("silhouette_normalization", str),
    "tie_epochs": ("tie_epochs", int),
    "tie_lr": ("tie_lr", float),
    "tie_hidden": ("tie_hidden", int),
}


def parse_train_config(path, seed_override=None) -> TrainConfig:
    """Parse the flat ``key = value`` training config file.

    Unknown keys are hard errors; known keys and their types are listed in
    ``gravembed fit --help``.
    """
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _CONFIG_KEYS:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            field_name, conv = _CONFIG_KEYS[key]
            try:
                values[field_name] = conv(raw)
            except ValueError:
                raise CliError(f"{path}:{lineno}: malformed value for {key!r}: {raw!r}")
    if seed_override is not None:
        values["seed"] = seed_override
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise CliError(str(exc))


def cmd_fit(args) -> int:
    started = time.time()
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise CliError(f"missing config file: {cfg_path}")
    cfg = parse_train_config(cfg_path, seed_override=args.seed)
    g = _load_graph_args(args)
    if not (g.labels >= 0).any():
        raise CliError("fit needs a labeled graph")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    snap_dir = out_dir / "snapshots"
    outputs = []

    snapshot_cb = None
    if args.snapshot_every:
        snap_dir.mkdir(exist_ok=True)

        def snapshot_cb(epoch, emb):
            if epoch % args.snapshot_every == 0:
                path = snap_dir / f"epoch_{epoch:04d}.csv"
                _write_embedding_csv(path, emb, g.labels)
                outputs.append(path)

    history_path = out_dir / "history.csv"
    try:
        model = train(g, cfg, snapshot_cb=snapshot_cb)
    except DivergenceError as exc:
        with open(history_path, "w", encoding="utf-8") as fh:
            fh.write(history_csv(exc.history))
        print(f"error: {exc}", file=sys.stderr)
        _write_manifest(out_dir / "manifest.json", "fit", cfg.to_dict(),
                        [cfg_path, *_graph_inputs(args)], [history_path], cfg.seed, started)
        return EXIT_NUMERIC

    model_path = out_dir / "model.zip"
    model.save(model_path)
    with open(history_path, "w", encoding="utf-8") as fh:
        fh.write(history_csv(model.history))
    emb = embed_graph(model, g)
    emb_path = out_dir / "embeddings.csv"
    _write_embedding_csv(emb_path, emb, g.labels)
    outputs.extend([model_path, history_path, emb_path])
    _write_manifest(out_dir / "manifest.json", "fit", cfg.to_dict(),
                    [cfg_path, *_graph_inputs(args)], outputs, cfg.seed, started)
    print(f"best epoch {model.best_epoch}: validation accuracy {model.best_val_acc:.4f}; "
          f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.time()
    model_path = Path(args.model)
    if not model_path.exists():
        raise CliError(f"missing model archive: {model_path}")
    model = TrainedModel.load(model_path)
    g = _load_graph_args(args)
    emb = embed_graph(model, g)

    preds = np.empty(g.n_vertices, dtype=np.int64)
    probs = np.empty((g.n_vertices, model.n_classes))
    for v in range(g.n_vertices):
        preds[v], probs[v] = classify(model, emb[v])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        cols = ",".join(f"prob_{k}" for k in range(model.n_classes))
        fh.write(f"vertex,predicted,{cols}\n")
        for v in range(g.n_vertices):
            row = ",".join(f"{p:.12g}" for p in probs[v])
            fh.write(f"{v},{int(preds[v])},{row}\n")
    outputs = [out]

    metrics_path = Path(args.metrics) if args.metrics else Path(str(out) + ".metrics.json")
    if (g.labels >= 0).any():
        labeled = g.labeled_indices()
        truth = g.labels[labeled]
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
            per_class.append({
                "class": c,
                "precision": tp / predicted if predicted else 0.0,
                "recall": tp / support if support else 0.0,
                "support": support,
            })
        doc = {
            "accuracy": float((truth == guess).mean()),
            "n_labeled": int(labeled.size),
            "per_class": per_class,
            "confusion": confusion.tolist(),
            "model_best_epoch": model.best_epoch,
        }
        with open(metrics_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        outputs.append(metrics_path)
        print(f"accuracy {doc['accuracy']:.4f} over {doc['n_labeled']} labeled vertices")
    else:
        print("test graph is unlabeled: predictions written, metrics omitted")

    _write_manifest(Path(str(out) + ".manifest.json"), "predict", {},
                    [model_path, *_graph_inputs(args)], outputs, None, started)
    return EXIT_OK


def cmd_inspect(args) -> int:
    started = time.time()
    g = _load_graph_args(args)
    paths = all_pairs_paths(g, args.hops)
    ties = tie_matrix_exact(g, paths)
    kernel = force_kernel(g.features, ties, paths, args.lam)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kernel_path = out_dir / "kernel.csv"
    save_tie_matrix(kernel_path, kernel.values)
    outputs = [kernel_path]
    if (g.labels >= 0).any():
        m = membership_matrix(g.labels, g.n_classes)
        gf = group_force(kernel, m)
        gf_path = out_dir / "group_force.csv"
        save_tie_matrix(gf_path, gf.values)
        outputs.append(gf_path)
    else:
        print("graph is unlabeled: kernel written, group force omitted")
    _write_manifest(out_dir / "manifest.json", "inspect",
                    {"hops": args.hops, "lambda": args.lam},
                    _graph_inputs(args), outputs, None, started)
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gravembed",
        description="Force-field graph embeddings: social ties, gated encoders, "
                    "inductive vertex classification.",
        epilog="Set GRAVEMBED_THREADS to bound worker threads for per-source "
               "path searches; results are identical for any thread count.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-sbm", help="generate a stochastic block model graph")
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--per-block", type=int, required=True)
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--feature-dim", type=int, required=True)
    p.add_argument("--feature-shift", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("tie-oracle", help="exact social-tie matrix as CSV")
    _add_graph_args(p)
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tie_oracle)

    p = sub.add_parser("tie-fit", help="fit the inductive tie model on a graph")
    _add_graph_args(p)
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="tie model JSON path")
    p.add_argument("--metrics", default=None, help="in-domain metrics JSON path")
    p.set_defaults(func=cmd_tie_fit)

    p = sub.add_parser("tie-eval", help="zero-shot tie metrics of a fitted model on a graph")
    p.add_argument("--model", required=True, help="tie model JSON path")
    _add_graph_args(p)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_tie_eval)

    p = sub.add_parser(
        "fit",
        help="train encoder + discriminator on a labeled graph",
        description="Config file keys (key = value, one per line): "
                    + ", ".join(sorted(_CONFIG_KEYS)),
    )
    _add_graph_args(p, labels_required=True)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="write an embedding CSV every N epochs")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="classify a graph with a trained model archive")
    p.add_argument("--model", required=True, help="model archive from fit")
    _add_graph_args(p)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--metrics", default=None, help="metrics JSON path (labeled graphs)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="dump force kernel and group-force matrices")
    _add_graph_args(p)
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, GraphFormatError, TieModelFormatError, TieTrainingError,
            ArchiveError, StoreFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
