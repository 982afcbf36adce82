import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deepchange import synth
from deepchange.cli import main as cli_main


@pytest.fixture(scope="session")
def small_scene():
    """A compact labeled scene pair shared by read-only tests."""
    spec = synth.demo_spec(seed=7, extent=60.0, density=4.0)
    return synth.generate(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


TINY_PIPELINE_CONFIG = {
    "dl0": 1.0,
    "radius": 9.0,
    "k": 12,
    "train": {"epochs": 2, "pairs_per_epoch": 12, "batch_size": 4},
    "backbone": {"channels": [8, 12, 16], "k_neighbors": 8, "embed_dim": 8},
}


@pytest.fixture(scope="session")
def cli_workdir(tmp_path_factory):
    """One fully-run tiny pipeline (synth .. eval) shared by CLI/server tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_PIPELINE_CONFIG))
    work = root / "w"
    base = ["--workdir", str(work), "--config", str(cfg_path)]
    assert cli_main(base + ["--seed", "5", "synth", "--extent", "50",
                            "--density", "3"]) == 0
    assert cli_main(base + ["features"]) == 0
    assert cli_main(base + ["--seed", "5", "train"]) == 0
    assert cli_main(base + ["infer"]) == 0
    assert cli_main(base + ["map", "--auto-majority"]) == 0
    assert cli_main(base + ["eval"]) == 0
    return work, cfg_path
