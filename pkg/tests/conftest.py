import pytest
import torch

from denoiser import DualBranchDenoiser
from models.run_config import DatasetConfig, DDPOConfig, EvalConfig, ModelConfig, RunConfig, SampleConfig, TrainConfig
from scene_service import generate_dataset, write_dataset


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(base_width=8, channel_mult=(1, 2), blocks_per_level=1, groups=4, embedding_dim=8)


@pytest.fixture
def tiny_config(tiny_model_config) -> RunConfig:
    return RunConfig(
        seed=5,
        dataset=DatasetConfig(num_objects_range=(1, 2), train_count=6, val_count=4),
        model=tiny_model_config,
        train=TrainConfig(batch_size=4, iterations=3, learning_rate=1e-3, timesteps=20, checkpoint_every=2),
        sample=SampleConfig(steps=4, batch_size=4),
        ddpo=DDPOConfig(k=2, batch_size=4, steps=3, updates=2, learning_rate=1e-4),
        eval=EvalConfig(permutations=10),
    )


@pytest.fixture
def tiny_samples(tiny_config):
    return generate_dataset(tiny_config.dataset.to_scene_spec(), 6, seed=17, prefix="t")


@pytest.fixture
def dataset_dir(tmp_path, tiny_config, tiny_samples):
    directory = tmp_path / "data"
    write_dataset(tiny_samples, directory, seed=17, spec=tiny_config.dataset.to_scene_spec())
    return directory


@pytest.fixture
def tiny_model(tiny_model_config) -> DualBranchDenoiser:
    return DualBranchDenoiser(tiny_model_config, seed=3)


@pytest.fixture
def tiny_model64(tiny_model_config) -> DualBranchDenoiser:
    return DualBranchDenoiser(tiny_model_config, seed=3).to(torch.float64)
