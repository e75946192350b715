import numpy as np
import pytest

from selfrel.config import TrainConfig


def tiny_config(**overrides) -> TrainConfig:
    """A model small enough for many fast training steps in tests."""
    cfg = TrainConfig()
    settings = {
        "model.image_size": 16, "model.patch_size": 4, "model.embed_dim": 12, "model.depth": 1,
        "model.heads": 2, "model.mlp_ratio": 2,
        "aug.global_size": 16, "aug.local_size": 8, "aug.n_local": 2,
        "relation.heads": 3, "relation.grid_global": 3, "relation.grid_local": 2,
        "heads.image_hidden": 16, "heads.image_bottleneck": 8, "heads.prototypes": 16,
        "train.epochs": 2, "train.batch_size": 4, "train.checkpoint_every": 1,
        "data.classes": 2, "data.per_class_train": 4, "data.per_class_val": 2, "data.image_size": 16,
        "eval.n_pairs": 4, "eval.probe_epochs": 3, "eval.probe_batch": 4,
    }
    settings.update(overrides)
    for k, v in settings.items():
        cfg.set(k, v)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints and records one PASS/FAIL line, then asserts ``ok``."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
