"""Baseline pretraining recipe shared by the CLI and the end-to-end checks."""

from __future__ import annotations

import numpy as np

from .audio import augment_noise, read_wav
from .config import PretrainConfig
from .dataset import Sample, featurize
from .model import TRAINING_INIT_GAIN, ModelConfig, init_model
from .text import normalize_transcript
from .trainer import TrainingConfig, fit


def augmented_samples(rows, fraction: float, snr_db: tuple, seed: int) -> list:
    """Featurize manifest rows, adding Gaussian noise to a random ``fraction`` of them."""
    rng = np.random.default_rng(seed)
    out = []
    for i, row in enumerate(rows):
        audio = read_wav(row["audio"])
        if rng.random() < fraction:
            audio = augment_noise(audio, float(rng.uniform(*snr_db)), int(rng.integers(2**31)))
        out.append(Sample(str(row.get("id", i)), featurize(audio), normalize_transcript(row["text"]),
                          speaker=str(row.get("speaker", ""))))
    return out


def pretrain_baseline(rows, model_config: ModelConfig, pc: PretrainConfig, seed: int, epochs=None):
    """Train a model from scratch on ``rows``; returns ``(params, per-epoch losses)``."""
    samples = augmented_samples(rows, pc.augment_fraction, pc.snr_db, seed)
    params = init_model(model_config, seed, gain=TRAINING_INIT_GAIN)
    epochs = epochs or pc.epochs
    tc = TrainingConfig(batch_size=pc.batch_size, learning_rate=pc.learning_rate, seed=seed,
                        grad_clip_norm=pc.grad_clip_norm, max_epochs=epochs)
    return fit(params, samples, epochs, tc)
