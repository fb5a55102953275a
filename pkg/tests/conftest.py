import numpy as np
import pytest

from sparseworld.diffcore import RngStream
from sparseworld.model import ModelConfig, init_params
from sparseworld.sim import WorldConfig, gen_dataset


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(n_layers=2, d=16, d_k=8, mlp_hidden=24, mlp_depth=1, n_interventions=6, anneal_steps=100)


@pytest.fixture(scope="session")
def tiny_params(tiny_model_cfg):
    return init_params(tiny_model_cfg, RngStream(1234))


@pytest.fixture(scope="session")
def tiny_episodes():
    # 2 episodes per seen env, short horizon: enough for protocol plumbing tests
    return gen_dataset(WorldConfig(), episodes_per_env=2, T=12, seed=77)


def random_tokens(rng: RngStream, b: int, n: int) -> np.ndarray:
    return (rng.normal((b, n, 9)) * 0.4).astype(np.float32)
