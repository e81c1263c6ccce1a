"""Pytest configuration and shared fixtures."""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from tbad_synth.config import (
    ArchConfig,
    ConfigManager,
    DataConfig,
    EvalConfig,
    LoraConfig,
    RunConfig,
    SamplerConfig,
    ScheduleConfig,
    SegConfig,
    TrainConfig,
    TsneConfig,
)
from tbad_synth.denoiser import init_params
from tbad_synth.numerics import make_rng
from tbad_synth.phantom import build_dataset
from tbad_synth.schedule import make_schedule


@pytest.fixture
def temp_dir():
    """Create a temporary directory for run artifacts and config files."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def tiny_arch():
    """A denoiser small enough for finite-difference checks."""
    return ArchConfig(width=3, time_dim=4, embed_dim=4, hidden=6, template_grid=4)


@pytest.fixture
def fp64_params(tiny_arch):
    """Random fp64 denoiser parameters."""
    return init_params(make_rng(7, "init"), tiny_arch, np.float64)


@pytest.fixture
def short_schedule():
    return make_schedule("linear", T=50)


@pytest.fixture
def tiny_data_config():
    """100 phantoms of 32x32: classes 1-3 get 10 each, class 4 50, class 5 20."""
    return DataConfig(total=100, size=32, min_per_class=10, write_pgm=False)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Shared 100-phantom dataset; tests must not mutate it."""
    return build_dataset(DataConfig(total=100, size=32, min_per_class=10), seed=0, workers=2)


@pytest.fixture
def tiny_run_config(temp_dir, tiny_data_config):
    """Run configuration small enough to run every stage in seconds."""
    return RunConfig(
        seed=0,
        out_dir=str(temp_dir / "runs"),
        run_id="tiny",
        precision="fp32",
        parallel_workers=2,
        data=tiny_data_config,
        arch=ArchConfig(width=4, time_dim=8, embed_dim=8, hidden=16, template_grid=8),
        schedule=ScheduleConfig(T=50),
        train=TrainConfig(epochs=2, batch_size=16, lr=2e-3),
        finetune=TrainConfig(epochs=1, batch_size=4, lr=1e-3, lora=True),
        lora=LoraConfig(rank=2, alpha=2.0, subject_class=3, prior_per_class=2, prior_steps=3),
        sampler=SamplerConfig(method="euler", steps=4, guidance=2.0),
        eval=EvalConfig(
            samples_per_class=4,
            fid_n=10,
            msssim_pairs=4,
            encoder_epochs=1,
            encoder_batch=16,
            min_encoder_accuracy=0.0,
        ),
        tsne=TsneConfig(perplexity=5.0, iterations=60, exaggeration_iters=20, momentum_switch=30),
        seg=SegConfig(widths=(4, 4, 4), epochs=1, batch_size=16, detect_px=5),
    )


@pytest.fixture
def config_file(temp_dir, tiny_run_config):
    """The tiny run configuration written as YAML."""
    manager = ConfigManager(config_path=temp_dir / "tbad-synth.yaml")
    manager._config = tiny_run_config
    manager.save()
    return manager.config_path


@pytest.fixture(autouse=True)
def reset_global_config():
    """Reset global config manager state between tests."""
    from tbad_synth.config import config_manager

    config_manager._config = None
    yield
    config_manager._config = None


@pytest.fixture(autouse=True)
def no_thread_cap(monkeypatch):
    monkeypatch.delenv("ADL_THREADS", raising=False)
