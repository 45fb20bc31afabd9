import numpy as np
import pytest

from loadseg.controller import MapSet
from loadseg.data import generate_shapes_dataset, split_dataset

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's pass/fail line for the terminal summary."""
    name = request.node.name

    def record(ok: bool, detail: str = ""):
        _ACCEPTANCE[name] = (bool(ok), detail)
        assert ok, detail

    _ACCEPTANCE[name] = (False, "did not complete")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def small_splits():
    ds = generate_shapes_dataset(3, 40, 16, 16, 3)
    train, val, holdout = split_dataset(ds, 0.75, 0.25, 0.5, 3)
    return {"train": train, "val": val, "holdout": holdout}


class ScriptedTrainer:
    """Trainer double that replays a fixed mIoU trajectory.

    The "model" is just a version number: the initial model is version 0 and
    tick ``t`` produces version ``t``. Map sets are named ``<tag>@<version>``.
    """

    def __init__(self, mious, num_images: int = 4):
        self.mious = list(mious)
        self.pos = 0
        self.version = 0
        self.ticks = 0
        self.num_images = num_images
        self.restored: list[int] = []
        self.disc_trainings: list[list[str]] = []

    def evaluate(self) -> float:
        mu = self.mious[self.pos]
        self.pos += 1
        return mu

    def tick(self) -> None:
        self.ticks += 1
        self.version = self.ticks

    def snapshot(self, tag):
        return _Snap(self.version, tag)

    def restore(self, snap) -> None:
        self.version = snap.id
        self.restored.append(snap.id)

    def generate_maps(self, snap, tag) -> MapSet:
        return MapSet([snap.id] * self.num_images, snap.id, tag, name=f"{tag}@{snap.id}")

    def train_discriminator(self, buffer) -> None:
        self.disc_trainings.append(buffer.names())


class _Snap:
    def __init__(self, id_, tag):
        self.id = id_
        self.tag = tag


@pytest.fixture
def scripted():
    return ScriptedTrainer


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(b))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
