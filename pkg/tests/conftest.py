import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fusionbench.data import generate_synthetic_dataset, make_meta, split  # noqa: E402
from fusionbench.models import ArchConfig  # noqa: E402

FIGURES = ("fig2", "fig3", "fig4", "fig5")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_arch():
    return ArchConfig(widths=(4,), output_dim=6, image_size=16)


@pytest.fixture(scope="session")
def tiny_data():
    """Small 4-class dissimilar set at 16x16: (train, test)."""
    meta = make_meta(4, "dissimilar", size=16)
    return split(generate_synthetic_dataset(meta, 12, seed=3), 0.75, seed=0)


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Output root after reproducing every figure with the default config.

    Set FUSIONBENCH_TEST_RUNS to a directory to keep the artifacts between
    sessions; reruns then skip every stage whose outputs are current.
    """
    from fusionbench.cli import main

    root = Path(os.environ.get("FUSIONBENCH_TEST_RUNS") or tmp_path_factory.mktemp("runs"))
    old = os.environ.get("FUSIONBENCH_OUT")
    os.environ["FUSIONBENCH_OUT"] = str(root)
    try:
        for fig in FIGURES:
            code = main(["--deterministic", "reproduce", fig])
            assert code == 0, f"reproduce {fig} exited with {code}"
    finally:
        if old is None:
            os.environ.pop("FUSIONBENCH_OUT", None)
        else:
            os.environ["FUSIONBENCH_OUT"] = old
    return root


@pytest.fixture
def announce(request):
    """Write a line straight to the terminal, bypassing output capture."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def write(line):
        if reporter is not None:
            reporter.ensure_newline()
            reporter.write_line(line)
        else:
            print(line)

    return write
