#!/usr/bin/env python3
"""Regenerate the bundled Zachary karate club fixture under data/karate/.

The edge list and the two-faction labels come from the standard public
dataset (via networkx). The dataset is featureless, so the feature CSV
carries four deterministic structural statistics per vertex: degree,
weighted degree, local clustering coefficient, and mean neighbor degree.

Needs networkx; run from the repository root:

    python3 scripts/make_karate_fixture.py
"""

import sys
from pathlib import Path

import networkx as nx

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gravembed.graphs import build_graph, save_graph
from gravembed.ties import structural_features


def main():
    kc = nx.karate_club_graph()
    edges = [(int(u), int(v), 1.0) for u, v in sorted(kc.edges())]
    labels = [0 if kc.nodes[v]["club"] == "Mr. Hi" else 1 for v in sorted(kc.nodes())]

    # provisional graph just to derive the structural features
    n = kc.number_of_nodes()
    skeleton = build_graph([[0.0]] * n, edges)
    feats = structural_features(skeleton)[:, :4]

    g = build_graph(feats, edges, labels=labels, n_classes=2)
    out = Path(__file__).resolve().parents[1] / "data" / "karate"
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / "karate.edges", out / "karate.features.csv", out / "karate.labels.csv")
    print(f"wrote karate fixture: {g.n_vertices} vertices, {g.n_edges} edges -> {out}")


if __name__ == "__main__":
    main()
