import numpy as np
import pytest

from iaunet.data import SynthConfig, generate_synthetic, load_dataset, load_pool
from iaunet.model import ModelConfig

TINY = ModelConfig(base_channels=4, embed_dim=8)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthConfig(num_images=20, seed=3), out)
    return out


@pytest.fixture(scope="session")
def records(synth_dir):
    return load_dataset(synth_dir / "manifest.json")


@pytest.fixture(scope="session")
def pool(synth_dir):
    return load_pool(synth_dir / "pool.json")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# reported comparison values (U-Net vs IAU-Net) and their rendered table, frozen
REPORTED = [("U-Net", {"dice": 0.8262, "iou": 0.7353}),
            ("IAU-Net", {"dice": 0.8485, "iou": 0.7571})]
GOLDEN_TABLE = (
    "Metric  U-Net   IAU-Net\n"
    "Dice    0.8262  **0.8485**\n"
    "IoU     0.7353  **0.7571**\n"
)
GOLDEN_CSV = (
    "metric,U-Net,IAU-Net,best\n"
    "Dice,0.8262,0.8485,IAU-Net\n"
    "IoU,0.7353,0.7571,IAU-Net\n"
)


# one summary line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
