from __future__ import annotations
import logging
import numpy as np
import pytest
from dacesr.fixtures import generate_corpus
from dacesr.imgproc import ImageTensor


@pytest.fixture(autouse=True)
def capture_all_logs(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.DEBUG, logger="dacesr")


@pytest.fixture(scope="session")
def corpus() -> list[ImageTensor]:
    return generate_corpus(20, 64, seed=0)


@pytest.fixture
def gradient_image() -> ImageTensor:
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    return np.stack([xx, yy, 0.5 * (xx + yy)], axis=-1)
