import numpy as np
import pytest

from byolsl import tensor as T


@pytest.fixture(autouse=True)
def _reset_tensor_state():
    """Every test starts in 64-bit, non-deterministic mode."""
    T.set_default_dtype("float64")
    T.set_deterministic(False)
    yield
    T.set_default_dtype("float64")
    T.set_deterministic(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tiny_config(**train):
    """Seconds-scale run: width-8 tiny CNN on 16x16 synthetic images."""
    from dataclasses import replace

    from byolsl.augment import AugmentConfig
    from byolsl.config import desk_profile
    from byolsl.data import SyntheticSpec
    from byolsl.model import EncoderConfig

    cfg = desk_profile()
    opts = dict(batch_size=8, max_steps=6, epochs=100, log_every=1)
    opts.update(train)
    return cfg.replace(
        model=EncoderConfig(width=8),
        synthetic=SyntheticSpec(classes=2, per_class=16, image_size=16),
        augment=AugmentConfig(size=16, blur_p=1.0),
        augment_prime=AugmentConfig(size=16, blur_p=0.1),
        train=replace(cfg.train, **opts),
    )


# acceptance criterion number -> one-line verdict, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
