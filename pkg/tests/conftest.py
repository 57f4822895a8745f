import numpy as np
import pytest

from handsplat.gaussians import GaussianSet
from handsplat.geometry import Camera


def fd_check(f, x, analytic, eps=1e-4, rel=1e-3, floor=1e-6, index=None):
    """Compare ``analytic`` against central differences of scalar ``f`` at ``x``.

    Returns the worst violation ratio (<= 1 means within tolerance).
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.asarray(analytic, dtype=np.float64).reshape(-1)
    idx = range(flat.size) if index is None else index
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        fd = (up - down) / (2 * eps)
        err = abs(fd - g[i])
        worst = max(worst, err / max(rel * abs(fd), floor))
    return worst


def random_splats(rng, n, depth=(6.0, 10.0), spread=1.5, scale=(0.1, 0.4)):
    centers = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(*depth, n)])
    return GaussianSet(
        centers,
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(*scale, (n, 3))),
        rng.normal(0.0, 1.0, n),
        rng.uniform(0.05, 0.95, (n, 3)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera32():
    return Camera(30.0, 30.0, 16.0, 16.0, 32, 32)


@pytest.fixture(scope="session")
def tiny_synth():
    """Two-frame 32x32 synthetic scene shared by the I/O and training tests."""
    from handsplat.synth import synth_generate

    return synth_generate(seed=0, n_frames=2, size=32)


ACCEPTANCE = []


def record(name: str, ok: bool, detail: str) -> None:
    """Note one acceptance criterion outcome for the end-of-run summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
