import numpy as np
import pytest
import torch

from fssearch.synthcorpus import CorpusConfig, generate


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small noise-free corpus shared by the plumbing tests."""
    return generate(CorpusConfig(seed=3, n_train=24, n_dev=8, n_test=12, noise_sigma=0.0, lexicon_size=40))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_fssnet(tiny_corpus):
    from fssearch.fssnet import FSSNet
    torch.set_num_threads(1)
    net = FSSNet(hidden_dim=8, embed_dim=8, conv_channels=8, epochs=1, batch_size=8, random_state=0)
    return net.fit(tiny_corpus.train)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
