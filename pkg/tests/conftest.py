import json
import os
import time

import pytest

from hierclip import cli, pretrain
from hierclip.estimator import HierCLIP
from hierclip.experiments import DataConfig

TOY_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "toy.json")
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One run of the shipped toy config, shared by every test that needs a trained model."""
    out = tmp_path_factory.mktemp("toy")
    start = time.time()
    code = cli.main(["train", "--config", TOY_CONFIG, "--out", str(out)])
    # the last checkpoint is written when training ends, before the comparison runs start
    train_seconds = os.path.getmtime(out / "checkpoint.bin") - start
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    return {"out": out, "code": code, "train_seconds": train_seconds, "records": records}


def load_trained(toy_run):
    ckpt = pretrain.load_checkpoint(str(toy_run["out"] / "checkpoint.bin"))
    return HierCLIP.from_checkpoint(ckpt), DataConfig.from_dict(ckpt.config["data"])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
