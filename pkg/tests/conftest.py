import numpy as np
import pytest

from maskprior.denoiser import TemplateDistribution, UniformSource
from maskprior.harness import CorpusSpec, gen_corpus
from maskprior.training import TrainConfig, train_prior

# the "San Diego"/"New York" analog: two modes with disjoint symbols
TWO_TEMPLATE_TOKENS = np.array([[0, 1], [2, 3]])
TWO_TEMPLATE_VOCAB = 4


@pytest.fixture(scope="session")
def two_template_dist():
    return TemplateDistribution(TWO_TEMPLATE_TOKENS, np.array([0.5, 0.5]),
                                TWO_TEMPLATE_VOCAB)


@pytest.fixture(scope="session")
def two_template_corpus():
    spec = CorpusSpec(vocab=TWO_TEMPLATE_VOCAB, length=2, size=200,
                      templates=[([0, 1], 0.5), ([2, 3], 0.5)])
    records, _ = gen_corpus(spec, np.random.default_rng(0))
    return [r.tokens for r in records]


@pytest.fixture(scope="session")
def trained_two_template(two_template_corpus):
    """Two identically-seeded training runs on the benchmark corpus.

    Shared by the convergence, determinism and gap-closure checks so the
    expensive training happens once per session.
    """
    config = TrainConfig(weight_mode="uniform", optimizer_mode="em",
                         epochs=120, seed=1)
    runs = []
    for _ in range(2):
        prior, history = train_prior(
            two_template_corpus, UniformSource(TWO_TEMPLATE_VOCAB), config,
            num_states=4)
        runs.append((prior, history))
    return runs
