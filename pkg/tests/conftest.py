import pytest

from distime.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def short_run():
    """A briefly trained dist_reenc model; enough to emit well-formed answers."""
    config = TrainConfig(steps=300, eval_every=100, n_train=800, n_eval=60, seed=3)
    return config, train(config)
