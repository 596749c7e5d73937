"""Time / memory / accuracy sweeps over batch size, learning rate and freezing."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import psutil

from .errors import EmptyGrid, PipelineError
from .model import PRESETS, ParamSet
from .trainer import TrainingConfig, run_personalization

log = logging.getLogger(__name__)

CSV_COLUMNS = ["batch", "lr", "freeze", "epochs", "final_wer", "mean_epoch_s", "peak_mem_bytes", "status"]


@dataclass
class SweepGrid:
    batch_sizes: tuple = (1, 2, 5, 10)
    learning_rates: tuple = (1e-5, 1e-6)
    freezes: tuple = ("NoFrozen", "FrozenConv", "FrozenConvBlstm")
    repetitions: int = 1
    seed: int = 0
    max_epochs: int = 20

    def __post_init__(self):
        if not (self.batch_sizes and self.learning_rates and self.freezes):
            raise EmptyGrid("every sweep axis needs at least one value")
        if any(b < 1 for b in self.batch_sizes) or any(not lr > 0 for lr in self.learning_rates):
            raise ValueError("batch sizes and learning rates must be positive")
        unknown = [f for f in self.freezes if f not in PRESETS]
        if unknown:
            raise ValueError(f"unknown freeze presets {unknown}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def cells(self):
        return itertools.product(self.batch_sizes, self.learning_rates, self.freezes)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sweep grid keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class SweepData:
    initial: ParamSet
    train: list
    validation: list


@dataclass
class SweepRow:
    batch: int
    lr: float
    freeze: str
    epochs: int = 0
    final_wer: float = math.nan
    mean_epoch_s: float = math.nan
    peak_mem_bytes: int = 0
    status: str = "ok"
    epoch_times: list = field(default_factory=list)

    def key(self):
        return (self.batch, self.lr, self.freeze)

    def record(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


class MemorySampler:
    """Background thread tracking the peak resident set size of this process."""

    def __init__(self, interval_s: float = 0.1):
        self.interval_s = interval_s
        self.samples = 0
        self.peak = 0
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _sample(self):
        self.peak = max(self.peak, self._proc.memory_info().rss)
        self.samples += 1

    def _run(self):
        while not self._stop.wait(self.interval_s):
            self._sample()

    def __enter__(self):
        self._sample()
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._sample()


Trainer = Callable[[TrainingConfig, SweepData, Callable], tuple]


def personalization_trainer(config: TrainingConfig, data: SweepData, on_epoch: Callable) -> tuple:
    with tempfile.TemporaryDirectory(prefix="sweep-") as tmp:
        result = run_personalization(data.initial, data.train, data.validation, config, tmp, on_epoch=on_epoch)
    return result.history, result.best_epoch


def profile_run(config: TrainingConfig, data: SweepData, trainer: Optional[Trainer] = None) -> SweepRow:
    """Run one training session and measure per-epoch wall time and peak RSS.

    ``trainer(config, data, on_epoch)`` must call ``on_epoch`` once at the
    end of every epoch and return ``(history, best_epoch)``.
    """
    trainer = trainer or personalization_trainer
    marks = []

    def on_epoch(_metrics=None):
        marks.append(time.monotonic())

    with MemorySampler() as mem:
        start = time.monotonic()
        history, best_epoch = trainer(config, data, on_epoch)
    times = list(np.diff([start, *marks]))
    best = next((m for m in history if m.epoch == best_epoch), None)
    return SweepRow(
        batch=config.batch_size,
        lr=config.learning_rate,
        freeze=config.freeze.name,
        epochs=int(best_epoch),
        final_wer=float(best.val_wer) if best else math.nan,
        mean_epoch_s=float(np.mean(times)) if times else math.nan,
        peak_mem_bytes=int(mem.peak),
        epoch_times=times,
    )


def run_sweep(grid: SweepGrid, data: SweepData, out_dir=None, trainer: Optional[Trainer] = None,
              base: Optional[TrainingConfig] = None) -> list:
    """Run every grid cell in turn; optionally write ``sweep.csv``, ``sweep.json`` and figures.

    A failing cell is recorded with its error in ``status`` and the sweep
    moves on.
    """
    base = base or TrainingConfig()
    rows = []
    for batch, lr, freeze in grid.cells():
        cfg = replace(base, batch_size=batch, learning_rate=lr, freeze=PRESETS[freeze],
                      seed=grid.seed, max_epochs=grid.max_epochs)
        try:
            reps = [profile_run(cfg, data, trainer) for _ in range(grid.repetitions)]
            row = reps[0]
            row.epoch_times = [t for r in reps for t in r.epoch_times]
            row.mean_epoch_s = float(np.mean(row.epoch_times))
            row.peak_mem_bytes = max(r.peak_mem_bytes for r in reps)
        except (PipelineError, ValueError, FloatingPointError) as exc:
            log.warning("sweep cell %s failed: %s", (batch, lr, freeze), exc)
            row = SweepRow(batch, lr, freeze, status=f"error: {exc}")
        log.info("sweep cell %s -> T=%s wer=%.2f epoch=%.3fs", row.key(), row.epochs, row.final_wer, row.mean_epoch_s)
        rows.append(row)
    order = {name: i for i, name in enumerate(PRESETS)}
    rows.sort(key=lambda r: (r.batch, r.lr, order[r.freeze]))
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows, out_dir) -> dict:
    from .plotting import plot_sweep

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "sweep.csv", "json": out_dir / "sweep.json", "figure": out_dir / "sweep.png"}
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow(r.record())
    with open(paths["json"], "w") as f:
        json.dump([r.record() for r in rows], f, indent=2)
    plot_sweep(rows, paths["figure"])
    return paths
