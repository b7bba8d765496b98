import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from tlg.config import build_config  # noqa: E402
from tlg.data import make_synthetic_dataset  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("TLG_RUNS_DIR", str(tmp_path / "runs"))


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic_dataset(4, 6, 64, rng_seed=3)


@pytest.fixture
def tiny_cfg():
    return build_config({}, ["data.exemplars_per_category=6", "train.epochs=1", "train.batch_size=2",
                             "train.episodes_per_epoch=4", "train.val_episodes=2", "train.eval_episodes=4",
                             "ha.c_ha=16", "ha.squeeze_channels=4", "train.head_channels=8"])
