import numpy as np
import pytest

from cavlab.dataset import DatasetSpec, generate_controlled, strip_captions
from cavlab.model import LayerSpec, TrainConfig, init_model, reference_model, train


def identity_model(m: int, num_classes: int = 2, seed: int = 0):
    """Model whose layer ``act`` returns its input unchanged, so CAVs see raw vectors."""
    model = init_model([LayerSpec.dense("act", m), LayerSpec.dense("logits", num_classes)], (m,), num_classes, seed)
    w = dict(model.weights)
    w["act"] = (np.eye(m), np.zeros(m))
    return model.with_weights(w)


@pytest.fixture(scope="session")
def captioned():
    """Controlled dataset with 30% caption noise, small enough for quick training."""
    return generate_controlled(DatasetSpec(samples_per_class=300, heldout_per_class=100, noise_p=0.3, seed=0))


@pytest.fixture(scope="session")
def trained(captioned):
    model = reference_model(seed=0)
    model, _ = train(model, captioned.train, TrainConfig(epochs=8, seed=0))
    return model


TEXTURE_CLASSES = ("striped", "checker", "dotted", "meshed", "blobs", "crosses")


@pytest.fixture(scope="session")
def texture_net():
    """The reference network trained as a caption-free six-way texture classifier."""
    ds = strip_captions(generate_controlled(DatasetSpec(classes=TEXTURE_CLASSES, samples_per_class=600,
                                                        heldout_per_class=50, seed=0)))
    model, _ = train(reference_model((32, 32, 3), len(TEXTURE_CLASSES), seed=0), ds.train,
                     TrainConfig(epochs=15, seed=0))
    return model


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
