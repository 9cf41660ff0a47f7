import pytest

from utils.config import parse_config_dict
from utils.data_synth import make_benchmark
from utils.trainer import run_two_stage

TINY = {
    "encoder": {"depth": 2, "width": 8, "heads": 2, "text_prompt_len": 2, "video_prompt_len": 2,
                "frames": 2, "patches": 2, "max_text_len": 16},
    "train": {"lr": 0.01, "warmup_epochs": 0, "warmup_floor_lr": 0.001, "epochs_stage1": 1, "epochs_stage2": 2,
              "batch_size": 8, "pool_size": 4, "k": 2},
    "benchmark": {"n_verbs": 4, "n_nouns": 4, "compat_density": 1.0, "samples_per_split": 16,
                  "frames": 2, "patches": 2, "width": 8, "background_pool": 4},
}


@pytest.fixture
def make_config():
    """Tiny run config; dotted-key overrides as in ``parse_config_dict``."""

    def build(overrides=None):
        return parse_config_dict(TINY, overrides)

    return build


@pytest.fixture
def config(make_config):
    return make_config()


@pytest.fixture(scope="session")
def bench():
    return make_benchmark(3, parse_config_dict(TINY).benchmark)


@pytest.fixture(scope="session")
def trained(bench):
    """A finished two-stage run on the tiny benchmark, shared read-only."""
    return run_two_stage(parse_config_dict(TINY), bench)
