import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="session")
def karate_paths():
    base = DATA_DIR / "karate"
    return base / "karate.edges", base / "karate.features.csv", base / "karate.labels.csv"


@pytest.fixture(scope="session")
def karate(karate_paths):
    from gravembed.graphs import load_graph

    return load_graph(*karate_paths)
