from argparse import Namespace
from pathlib import Path

import pytest

from centerscale.cli import SECTIONS, build_configs
from centerscale.harness import generate_dataset

FIXTURES = Path(__file__).parent / "fixtures"
DESK_CFG = FIXTURES / "desk.cfg"


def desk_configs(**overrides):
    """Effective (scene, run, data) configs of the shipped fixture, with overrides."""
    ns = {f: None for _, cls in SECTIONS for f in cls.__dataclass_fields__}
    ns.update(overrides)
    return build_configs(Namespace(config=str(DESK_CFG), **ns))


@pytest.fixture(scope="session")
def desk():
    cfg = desk_configs()
    scene, data = cfg["scene"], cfg["data"]
    train = generate_dataset(scene, data.train_count, data.data_seed, "train")
    evalset = generate_dataset(scene, data.eval_count, data.eval_seed, "eval")
    return cfg, train, evalset


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
