import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coirl import autodiff as ad  # noqa: E402
from coirl.world import build_dataset, load_dataset  # noqa: E402


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.jsonl"
    build_dataset(8, 0, "1:0", path)
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_path):
    return load_dataset(tiny_dataset_path)


@pytest.fixture(scope="session")
def tiny_eval_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("eval") / "eval.jsonl"
    build_dataset(4, 9, "1:0", path)
    return path
