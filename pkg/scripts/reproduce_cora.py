#!/usr/bin/env python3
"""Best-effort Cora run: convert the public raw files and train end-to-end.

Expects the standard public Cora distribution (not bundled with this
repository):

    <cora_dir>/cora.content   paper_id <TAB> 1433 binary word flags <TAB> class
    <cora_dir>/cora.cites     cited_id <TAB> citing_id

Converts to this package's file formats under <out_dir>/ and runs `fit` and
`predict` through the CLI. Full-graph training at N=2708 is memory- and
CPU-hungry (dense N x N force kernels); expect minutes per run, and treat the
resulting accuracy as a best-effort reference, not a benchmark claim.

Usage:
    python3 scripts/reproduce_cora.py <cora_dir> <out_dir> [--epochs N]
"""

import argparse
import subprocess
import sys
from pathlib import Path


def convert(cora_dir: Path, out_dir: Path):
    content = (cora_dir / "cora.content").read_text().strip().splitlines()
    ids, rows, labels = [], [], []
    classes = {}
    for line in content:
        parts = line.split()
        ids.append(parts[0])
        rows.append([float(x) for x in parts[1:-1]])
        labels.append(classes.setdefault(parts[-1], len(classes)))
    index = {pid: i for i, pid in enumerate(ids)}

    seen = set()
    edges = []
    for line in (cora_dir / "cora.cites").read_text().strip().splitlines():
        a, b = line.split()
        if a not in index or b not in index or a == b:
            continue
        i, j = index[a], index[b]
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        edges.append(key)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cora.edges", "w") as fh:
        for i, j in sorted(edges):
            fh.write(f"{i}\t{j}\t1.0\n")
    with open(out_dir / "cora.features.csv", "w") as fh:
        for row in rows:
            fh.write(",".join(repr(x) for x in row) + "\n")
    with open(out_dir / "cora.labels.csv", "w") as fh:
        fh.write(f"K={len(classes)}\n")
        for v, lab in enumerate(labels):
            fh.write(f"{v},{lab}\n")
    print(f"converted {len(ids)} vertices, {len(edges)} edges, {len(classes)} classes")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("cora_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()

    convert(args.cora_dir, args.out_dir)
    cfg = args.out_dir / "cora.cfg"
    cfg.write_text(
        "lambda = 0.35\n"
        "gamma = 1.0\n"
        "embedding_dim = 16\n"
        "hidden_dims = 64\n"
        "disc_hidden_dims =\n"
        "hops = 1\n"
        f"max_epochs = {args.epochs}\n"
        "patience = 100\n"
        "tie_epochs = 1500\n"
        "seed = 0\n"
    )
    base = [sys.executable, "-m", "gravembed"]
    graph = ["--edges", str(args.out_dir / "cora.edges"),
             "--features", str(args.out_dir / "cora.features.csv"),
             "--labels", str(args.out_dir / "cora.labels.csv")]
    subprocess.run(base + ["fit", *graph, "--config", str(cfg),
                           "--out", str(args.out_dir / "run")], check=True)
    subprocess.run(base + ["predict", "--model", str(args.out_dir / "run" / "model.zip"),
                           *graph, "--out", str(args.out_dir / "run" / "predictions.csv")],
                   check=True)


if __name__ == "__main__":
    main()
