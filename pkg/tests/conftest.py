import numpy as np
import pytest
import torch

from digression.backend.checkpoint import load_bundled
from digression.corpus import bundled_corpus_dir
from digression.masking import ContextImage, InpaintMask, load_pair

SAMPLE = "0000"

# filled by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def backend():
    return load_bundled()


@pytest.fixture(scope="session")
def backend64(backend):
    return backend.double()


@pytest.fixture(scope="session")
def sample_paths():
    root = bundled_corpus_dir()
    return root / "images" / f"{SAMPLE}.png", root / "masks" / f"{SAMPLE}.png"


@pytest.fixture(scope="session")
def pair(backend, sample_paths):
    return load_pair(*sample_paths, backend)


@pytest.fixture(scope="session")
def pair64(backend64, pair):
    x, m = pair
    return ContextImage.from_pixels(x.pixels.double(), backend64), m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rect_mask(size=64, box=(16, 16, 40, 48), factor=4) -> InpaintMask:
    grid = torch.ones(1, size, size)
    y0, x0, y1, x1 = box
    grid[:, y0:y1, x0:x1] = 0.0
    return InpaintMask.from_pixels(grid, factor)


def central_difference(f, x: torch.Tensor, index: tuple, h: float) -> float:
    xp, xm = x.clone(), x.clone()
    xp[index] += h
    xm[index] -= h
    return (float(f(xp)) - float(f(xm))) / (2 * h)


def fd_agrees(analytic: float, numeric: float, rtol: float = 1e-2, atol: float = 1e-8) -> bool:
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))
