import numpy as np
import pytest

from gensearch.models import ModelConfig, init_params
from gensearch.sim import CorpusConfig, generate_corpus

TINY_CORPUS = dict(n_items=40, n_queries=10, n_users=5, n_topics=3, n_subtopics=2, n_hash=2, n_noise_tokens=2,
                   n_sessions=20, n_exposed=3, n_unexposed=3, latent_dim=4)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(CorpusConfig(**TINY_CORPUS))


def tiny_model_config(corpus, **overrides):
    cc = corpus.config
    base = dict(dim=4, k=3, W=4, query_hidden=5, decoder_hidden=6, query_vocab=cc.query_vocab_size,
                feature_vocab=cc.feature_vocab_size, n_users=cc.n_users)
    base.update(overrides)
    return ModelConfig(**base)


def jittered_params(cfg, seed=1, scale=0.3):
    """Random non-degenerate parameters (zero-initialized heads make many gradients vanish)."""
    p = init_params(cfg)
    rng = np.random.default_rng(seed)
    for name in p.trainable():
        p.tensors[name] = p[name] + rng.normal(0.0, scale, size=p[name].shape)
    return p


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(CorpusConfig())


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one result line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
