import numpy as np
import pytest

from dpc.config import build_config
from dpc.encoders import DualEncoder, ImageEncoderConfig, TextEncoderConfig
from dpc.prompting import Vocabulary

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

TOY_WORDS = ["a", "photo", "seems", "to", "express", "feeling", "of", "like", "an", "image",
             "amusement", "anger", "awe", "contentment"]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_vocab():
    return Vocabulary.build(TOY_WORDS)


@pytest.fixture(scope="session")
def tiny_encoders(toy_vocab):
    return DualEncoder.init(ImageEncoderConfig(image_size=16, patch_size=8, width=16, layers=2, dim=16),
                            TextEncoderConfig(len(toy_vocab), dim=16, layers=2, context_length=12),
                            seed=0)


@pytest.fixture(scope="session")
def prepared():
    """Default synthetic task (3 classes x 60, seed 0) with frozen features."""
    from dpc.experiment import prepare
    return prepare(build_config({"lr0": 0.1, "manifest": "synthetic"}))


@pytest.fixture
def synthetic_config(tmp_path):
    return build_config({"lr0": 0.1, "manifest": "synthetic", "out_dir": str(tmp_path / "runs")},
                        base_dir=tmp_path)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
