import numpy as np
import pytest

from gere.distill import ReplayPool
from gere.harness import ReplayAssets, pretrain_lm
from gere.model import ModelConfig, init_model
from gere.synth import gen_general_corpus, gen_tasks


@pytest.fixture(scope="session")
def small_corpus():
    return gen_general_corpus(5, pretrain=600, replay_pool=120, heldout=60, length=20)


@pytest.fixture(scope="session")
def small_tasks():
    return gen_tasks(5, k=2, train_size=160, test_size=60)


@pytest.fixture(scope="session")
def small_base(small_corpus):
    """A briefly pretrained full-size desk model (a few seconds of training)."""
    model = init_model(ModelConfig(seed=5))
    pretrain_lm(model, small_corpus.pretrain, epochs=2, lr=3e-3, seed=5)
    return model


@pytest.fixture(scope="session")
def small_assets(small_base, small_corpus):
    return ReplayAssets.build(small_base, ReplayPool.from_array(small_corpus.replay_pool))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
