import pytest

from clipstrike.clip_guidance import (
    PromptTemplate,
    encode_prompts,
    expand_label_tuples,
    load_encoders,
)
from clipstrike.data import batch_iter, load_dataset
from clipstrike.surrogate import extractor_from_model, fit_fixture_cnn

SEED = 1234
FIXTURE_SIZE = 64  # training/eval resolution for the desk-scale fixture


@pytest.fixture(scope="session")
def fixture_train():
    return load_dataset("synthetic-fixture", "train", seed=SEED)


@pytest.fixture(scope="session")
def fixture_test():
    return load_dataset("synthetic-fixture", "test", seed=SEED)


@pytest.fixture(scope="session")
def fixture_model(fixture_train):
    return fit_fixture_cnn(fixture_train, image_size=FIXTURE_SIZE, seed=SEED)


@pytest.fixture(scope="session")
def fixture_extractor(fixture_model):
    return extractor_from_model(fixture_model, "fixture-cnn", image_size=FIXTURE_SIZE)


@pytest.fixture(scope="session")
def fixture_encoders():
    return load_encoders(fixture=True, seed=SEED, image_size=FIXTURE_SIZE)


@pytest.fixture(scope="session")
def fixture_prompts(fixture_train, fixture_encoders):
    text_encoder, _ = fixture_encoders
    template = PromptTemplate("a photo of a {label}")
    tuples = expand_label_tuples(fixture_train.vocabulary, template.arity)
    return encode_prompts(tuples, template, text_encoder)


@pytest.fixture(scope="session")
def fixture_batch(fixture_train):
    return next(batch_iter(fixture_train, 4, shuffle=False, target_size=FIXTURE_SIZE))
