import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from icre.dataset import Split, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """A small synthetic set (4 ids, 4 images per modality) with all three splits."""
    root = tmp_path_factory.mktemp("toy")
    manifests = {s: generate_synthetic(4, 4, (64, 32), seed=3, out_dir=root, split=s) for s in Split}
    return root, manifests


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    import suites

    if suites.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(suites.RESULTS):
            terminalreporter.write_line(line)
