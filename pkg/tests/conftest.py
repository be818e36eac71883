import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

from pixeltext.font import default_glyphs

torch.set_num_threads(int(os.environ.get("PIXELTEXT_THREADS", "1")))
settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture
def glyphs():
    return default_glyphs()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_ascii(rng, n_words, max_len=10):
    alphabet = [chr(c) for c in range(0x21, 0x7F)]
    return " ".join("".join(rng.choice(alphabet, size=rng.integers(1, max_len + 1)))
                    for _ in range(n_words))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
