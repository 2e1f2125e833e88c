from __future__ import annotations
from pathlib import Path
import numpy as np
import pytest
from dacesr.errors import ParameterError
from dacesr.fixtures import KINDS, generate_corpus, list_images, load_or_generate, write_corpus


@pytest.mark.parametrize("kind", sorted(KINDS))
def test_kind_in_range(kind: str) -> None:
    img = KINDS[kind](40, np.random.default_rng(0))
    assert img.shape == (40, 40, 3)
    assert float(img.min()) >= 0.0
    assert float(img.max()) <= 1.0


def test_corpus_is_seeded() -> None:
    a = generate_corpus(6, 32, seed=1)
    b = generate_corpus(6, 32, seed=1)
    c = generate_corpus(6, 32, seed=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert all(np.array_equal(np.rint(x * 255) / 255, x) for x in a)


@pytest.mark.parametrize("n,side", [(0, 32), (3, 8)])
def test_corpus_bad_size(n: int, side: int) -> None:
    with pytest.raises(ParameterError):
        generate_corpus(n, side, seed=0)


def test_write_and_reload(tmp_path: Path) -> None:
    images = generate_corpus(3, 24, seed=0)
    paths = write_corpus(tmp_path, images)
    assert list_images(tmp_path) == paths
    again = load_or_generate(tmp_path, 10, 16, seed=5)
    assert len(again) == 3
    assert all(np.array_equal(x, y) for x, y in zip(images, again))


def test_generate_into_empty_dir(tmp_path: Path) -> None:
    images = load_or_generate(tmp_path / "new", 4, 16, seed=0)
    assert len(images) == 4
    assert len(list_images(tmp_path / "new")) == 4
