import numpy as np
import pytest

from config import TestingConfig
from reportgen.core import tensor as T
from reportgen.core.labeler import default_ontology
from reportgen.core.synth import generate, save_dataset, split
from reportgen.core.tokenizer import BpeTokenizer
from reportgen.core.trainer import Trainer, attach_token_ids
from reportgen.core.transformer import ModelParams
from reportgen.models import GeneratorConfig, ModelConfig, Sample, TrainConfig

MEMORIZED_REPORT = "mild edema."


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """
    A seeded numpy generator for test inputs.
    """
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    """
    The one-layer, two-head, d_model 8 model used by gradient checks (vocab 11, 2x2x3 grid).
    """
    return ModelConfig.from_object(TestingConfig)


@pytest.fixture
def toy_params(toy_config):
    """
    Freshly initialized parameters for `toy_config`.
    """
    return ModelParams.initialize(toy_config, seed=0)


@pytest.fixture
def grad_check():
    """
    Compares the analytic gradient of a scalar function with central differences.

    The returned callable takes `(loss_fn, tensor, indices=None, step=1e-5)` where
    `loss_fn()` rebuilds the loss from the current values. It returns the largest
    relative error `|a - n| / max(|a|, |n|, 1e-4)` over the checked entries.
    """
    def check(loss_fn, tensor, indices=None, step=1e-5):
        tensor.zero_grad()
        T.backward(loss_fn())
        analytic = tensor.grad.copy()

        flat = tensor.data.reshape(-1)
        checked = range(flat.size) if indices is None else indices
        worst = 0.0
        for index in checked:
            original = flat[index]
            flat[index] = original + step
            with T.no_grad():
                plus = loss_fn().item()
            flat[index] = original - step
            with T.no_grad():
                minus = loss_fn().item()
            flat[index] = original

            numeric = (plus - minus) / (2 * step)
            exact = analytic.reshape(-1)[index]
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4))
        return worst

    return check


@pytest.fixture
def ontology():
    """
    The built-in five-finding ontology shared by the generator and the labeler.
    """
    return default_ontology()


@pytest.fixture
def generator_config():
    """
    A small seeded generator on the default 7x7x16 grid.
    """
    return GeneratorConfig(seed=7, n_samples=40)


@pytest.fixture
def synthetic_samples(generator_config, ontology):
    """
    Forty generated samples, split 80/10/10.
    """
    samples = generate(generator_config, ontology)
    split(samples, (0.8, 0.1, 0.1), seed=generator_config.seed)
    return samples


@pytest.fixture
def dataset_file(tmp_path, synthetic_samples):
    """
    The synthetic samples written as a dataset file.
    """
    path = tmp_path / "dataset.jsonl"
    save_dataset(str(path), synthetic_samples)
    return path


@pytest.fixture(scope="session")
def memorized_model():
    """
    A small model trained until it reproduces a single (grid, report) pair.

    Returns a dict with `params`, `config`, `tokenizer`, `samples` and the fit `result`.
    """
    tokenizer = BpeTokenizer.train([MEMORIZED_REPORT] * 4, 24)
    config = ModelConfig(
        num_layers=1, n_head=2, d_model=16, dff=32, dropout=0.0,
        vocab_size=len(tokenizer), max_len=16, image_grid=(2, 2, 3),
    )
    train_config = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=60, seed=3)

    image = np.random.default_rng(11).normal(size=(2, 2, 3))
    samples = [Sample(id=f"m{i}", image=image, report=MEMORIZED_REPORT) for i in range(8)]
    attach_token_ids(samples, tokenizer, config.max_len)

    trainer = Trainer(config, train_config)
    result = trainer.fit(samples)
    return {
        "params": trainer.params,
        "config": config,
        "tokenizer": tokenizer,
        "samples": samples,
        "result": result,
        "train_config": train_config,
    }

