import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def library():
    from hoi_forge.dataio import default_library
    return default_library()


@pytest.fixture(scope="session")
def small_dataset(library):
    from hoi_forge.dataio import generate_dataset
    return generate_dataset(48, seed=3, objects=library)


# -- desk-scale training shared by the slow tests and the acceptance suite ------
SEED = 20240607


class ToyData:
    def __init__(self, records, library):
        self.records = records
        self.library = library
        self.train = records[:1000]
        self.heldout = records[1000:]


@pytest.fixture(scope="session")
def toy_data(library):
    from hoi_forge.dataio import generate_dataset
    return ToyData(generate_dataset(1200, seed=SEED, objects=library), library)


@pytest.fixture(scope="session")
def toy_vocab(toy_data):
    from hoi_forge.text import Vocab
    return Vocab.from_prompts([r.prompt for r in toy_data.records])


@pytest.fixture(scope="session")
def toy_prior(toy_data, toy_vocab):
    """(prior, log, cpu seconds) for the desk-scale dual-branch prior."""
    import time
    from threadpoolctl import threadpool_limits
    from hoi_forge.pipeline import train_prior
    from hoi_forge.prior import PriorConfig
    # one BLAS thread, so process time is honest single-core CPU time
    with threadpool_limits(limits=1):
        t0 = time.process_time()
        prior, log = train_prior(toy_data.train, toy_data.library, PriorConfig(), steps=3000, seed=SEED,
                                 batch=32, lr=1e-3, log_every=100, vocab=toy_vocab)
        cpu = time.process_time() - t0
    return prior, log, cpu


@pytest.fixture(scope="session")
def toy_contact(toy_data, toy_vocab):
    from hoi_forge.contact import ContactConfig
    from threadpoolctl import threadpool_limits
    from hoi_forge.pipeline import train_contact
    with threadpool_limits(limits=1):
        return train_contact(toy_data.train, toy_data.library, ContactConfig(), steps=2000, seed=SEED,
                             batch=32, lr=1e-3, log_every=100, vocab=toy_vocab)


@pytest.fixture(scope="session")
def toy_classifier(toy_data):
    from hoi_forge.metrics import ClassifierConfig
    from hoi_forge.pipeline import train_action_classifier
    return train_action_classifier(toy_data.train, ClassifierConfig(), SEED)
