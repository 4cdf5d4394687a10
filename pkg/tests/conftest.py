import os
from pathlib import Path

import pytest

from xbarlab import data


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """Directory holding the IDX corpus used by training tests.

    A real MNIST directory can be supplied via XBARLAB_MNIST_DIR; otherwise
    the deterministic synthetic stand-in corpus is built (once per session,
    or cached at XBARLAB_SYNTH_CACHE across sessions).
    """
    env = os.environ.get("XBARLAB_MNIST_DIR")
    if env and Path(env).is_dir():
        return Path(env)
    cache = os.environ.get("XBARLAB_SYNTH_CACHE")
    if cache:
        d = Path(cache)
        d.mkdir(parents=True, exist_ok=True)
        if not (d / data.MNIST_FILES["train_images"]).exists():
            data.build_synthetic_corpus(d)
        return d
    d = tmp_path_factory.mktemp("corpus")
    data.build_synthetic_corpus(d)
    return d


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    """(train, test) datasets loaded through the IDX path."""
    return data.load_mnist(corpus_dir)
