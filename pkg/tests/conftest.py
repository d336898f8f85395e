import numpy as np
import pytest

from msa_lab.config import ExperimentConfig, GeneratorConfig, TrainConfig
from msa_lab.dataset import Dataset, build_synthetic_dataset
from msa_lab.dsp import MelConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 4-second-clip corpus big enough for batch mining contract tests."""
    root = tmp_path_factory.mktemp("corpus") / "dataset"
    gen = GeneratorConfig(n_clips=80, clip_seconds=4.0, seed=123)
    build_synthetic_dataset(gen, MelConfig(), root)
    return Dataset(root)


@pytest.fixture()
def micro_config(tmp_path):
    """Tiny but complete experiment config for trainer/CLI tests."""
    return ExperimentConfig(
        run_id="micro", output_dir=str(tmp_path), seed=3,
        generator=GeneratorConfig(n_clips=40, clip_seconds=4.0),
        train=TrainConfig(total_steps=2, batches_per_step=2, batch_size=6,
                          early_stop_window=50, n_val_batches=1, checkpoint_every=1),
    )
