import csv
import time

import numpy as np
import psutil
import pytest

from ondevice_stt.errors import EmptyGrid, NonFiniteLoss
from ondevice_stt.profiler import (
    CSV_COLUMNS,
    MemorySampler,
    SweepData,
    SweepGrid,
    profile_run,
    run_sweep,
)
from ondevice_stt.trainer import EpochMetrics, TrainingConfig

DATA = SweepData(initial=None, train=[], validation=[])


def sleeping_trainer(epochs=3, seconds=0.1):
    def trainer(config, data, on_epoch):
        history = []
        for e in range(1, epochs + 1):
            time.sleep(seconds)
            m = EpochMetrics(e, 1.0, 1.0, 10.0 * e / config.batch_size, seconds, 0)
            history.append(m)
            on_epoch(m)
        return history, 1

    return trainer


def test_clock_calibration():
    row = profile_run(TrainingConfig(batch_size=2), DATA, sleeping_trainer(3, 0.1))
    assert len(row.epoch_times) == 3
    assert row.mean_epoch_s == pytest.approx(0.1, abs=0.02)
    assert row.mean_epoch_s == pytest.approx(np.mean(row.epoch_times))
    assert row.epochs == 1 and row.final_wer == 5.0
    assert row.peak_mem_bytes >= psutil.Process().memory_info().rss * 0.5


def test_two_epochs_two_samples():
    row = profile_run(TrainingConfig(), DATA, sleeping_trainer(2, 0.01))
    assert len(row.epoch_times) == 2


def test_sampler_rate():
    with MemorySampler(interval_s=0.1) as mem:
        time.sleep(1.0)
    # ten ticks per second plus the entry and exit samples; allow slack for a busy host
    assert mem.samples >= 6
    assert mem.peak > 0


def test_grid_shape_and_files(tmp_path):
    grid = SweepGrid(batch_sizes=(1, 2, 5, 10), learning_rates=(1e-3,), freezes=("FrozenConv",))
    rows = run_sweep(grid, DATA, tmp_path, trainer=sleeping_trainer(2, 0.001))
    assert [r.batch for r in rows] == [1, 2, 5, 10]
    with open(tmp_path / "sweep.csv") as f:
        table = list(csv.DictReader(f))
    assert list(table[0]) == CSV_COLUMNS
    assert len(table) == 4
    assert all(r["status"] == "ok" and r["freeze"] == "FrozenConv" for r in table)
    assert (tmp_path / "sweep.json").exists() and (tmp_path / "sweep.png").stat().st_size > 0


def test_failing_cell_is_recorded():
    def flaky(config, data, on_epoch):
        if config.batch_size == 2:
            raise NonFiniteLoss("batch loss is nan")
        return sleeping_trainer(1, 0.001)(config, data, on_epoch)

    rows = run_sweep(SweepGrid(batch_sizes=(1, 2, 5), learning_rates=(1e-3,), freezes=("NoFrozen",)), DATA,
                     trainer=flaky)
    assert [r.status for r in rows] == ["ok", "error: batch loss is nan", "ok"]


def test_grid_validation():
    with pytest.raises(EmptyGrid):
        SweepGrid(batch_sizes=())
    with pytest.raises(ValueError):
        SweepGrid(freezes=("Everything",))
    grid = SweepGrid.from_dict({"batch_sizes": [1, 5], "learning_rates": [1e-3]})
    assert len(list(grid.cells())) == 2 * 1 * 3
