import numpy as np
import pytest

from placivim import phantom


@pytest.fixture(scope="session")
def default_dataset():
    """Default motion-corrupted phantom, built once per session."""
    return phantom.make_dataset(phantom.PhantomSpec(seed=0))


def smooth_texture(shape, sigma, seed):
    from scipy.ndimage import gaussian_filter

    t = gaussian_filter(np.random.default_rng(seed).standard_normal(shape), sigma)
    return t / t.std()


_ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str):
    """Remember one acceptance outcome for the terminal summary."""
    _ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
