import numpy as np
import pytest

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


def write_stripe_tree(root, per_class, seed0):
    """Class folders ``h`` and ``v`` of stripe images as PGM files."""
    from nbnlkit.patchgrid import write_netpbm
    from nbnlkit.synthetic import stripe_image

    for cls in ("h", "v"):
        (root / cls).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            write_netpbm(root / cls / f"{i:03d}.pgm", stripe_image(cls, seed=seed0 + i))
    return root


@pytest.fixture(scope="session")
def stripe_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("stripes")
    return write_stripe_tree(base / "train", 10, 0), write_stripe_tree(base / "test", 10, 1000)
