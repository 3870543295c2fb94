import time

import pytest

from aspnn.dataset import group_records, split_tracks
from aspnn.simulator import SimConfig, simulate
from aspnn.training import TrainConfig, build_trajectories, train

ACCEPTANCE_EPOCHS = 2500
_acceptance_lines: list[tuple[int, str]] = []


def _split(trajs, seed=0):
    train_ids, test_ids = split_tracks([t.cell_id for t in trajs], 0.2, seed)
    return ([t for t in trajs if t.cell_id in train_ids], [t for t in trajs if t.cell_id in test_ids])


def _trained_case(case, noise):
    clean_ts = group_records(simulate(SimConfig()), 300, 100)
    ts = group_records(simulate(SimConfig(noise_fraction=noise)), 300, 100) if noise else clean_ts
    trajs = build_trajectories(ts, ts.tracks)
    train_set, test_set = _split(trajs)
    start = time.perf_counter()
    bundle, history = train(TrainConfig.for_case(case, epochs=ACCEPTANCE_EPOCHS), train_set)
    seconds = time.perf_counter() - start
    clean = {t.cell_id: t for t in build_trajectories(clean_ts, clean_ts.tracks)}
    return dict(bundle=bundle, history=history, train=train_set, test=test_set, clean=clean,
                seconds=seconds)


@pytest.fixture(scope="session")
def deterministic_run():
    """Deterministic in-silico data, default simulator, 2500 epochs of the insilico schedule."""
    return _trained_case("insilico", 0.0)


@pytest.fixture(scope="session")
def noisy_run():
    """Same cells with 10% clamped position noise, insilico-noise schedule."""
    return _trained_case("insilico-noise", 0.10)


@pytest.fixture
def acceptance_report():
    def report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"
        _acceptance_lines.append((number, line))
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    # run the acceptance suite last so unit failures show up first
    items.sort(key=lambda item: "test_acceptance" in item.nodeid)
