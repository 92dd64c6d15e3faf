import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from domino.config import ExperimentConfig
from domino.domain_embedding import StatisticalEncoder

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def encoder():
    return StatisticalEncoder(d_emb=32, seed=0)


def tiny_config(**overrides):
    """A config small enough for sub-second training runs."""
    base = {
        "model": {"num_classes": 3, "encoder_widths": [4, 8], "decoder_widths": [8, 4], "d_attn": 8,
                  "domino_hidden": 8},
        "data": {"height": 16, "width": 16, "train_size": 16, "val_source_size": 4, "val_target_size": 4,
                 "synthetic_size": 16},
        "train": {"total_iters": 5, "batch_size": 4, "log_every": 2, "attest_every": 2},
        "domain": {"d_emb": 8},
    }
    for section, values in overrides.items():
        base.setdefault(section, {}).update(values)
    return ExperimentConfig.from_dict(base)


@pytest.fixture
def tiny():
    return tiny_config


def golden(name, compute, atol=1e-6):
    """Snapshot oracle: compare against tests/golden/<name>.json, recording it if absent
    (or when DOMINO_REGEN_GOLDEN=1)."""
    value = np.asarray(compute(), dtype=np.float64)
    path = GOLDEN_DIR / f"{name}.json"
    if os.environ.get("DOMINO_REGEN_GOLDEN") == "1" or not path.exists():
        GOLDEN_DIR.mkdir(exist_ok=True)
        path.write_text(json.dumps({"shape": list(value.shape), "values": value.ravel().tolist()}) + "\n")
    stored = json.loads(path.read_text())
    expected = np.asarray(stored["values"]).reshape(stored["shape"])
    np.testing.assert_allclose(value, expected, atol=atol, rtol=0)


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)
    yield


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: (int(k.split()[0].rstrip("ab")), k)):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
