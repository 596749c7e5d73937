"""Personalization engine: Train / Predict / Save / Load / Calculate-loss.

Training runs in float on in-memory weights. After every epoch the weights
are saved as an int8 checkpoint; when the stopping rule fires, the
checkpoint of the best epoch is loaded and returned.
"""

from __future__ import annotations

import json
import logging
import resource
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import ctc_loss_batch, greedy_decode
from .dataset import pad_batch
from .errors import EmptyDataset, NonFiniteLoss
from .model import NO_FROZEN, FreezeSpec, ModelConfig, ParamSet, backward, forward

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    batch_size: int = 5
    max_epochs: int = 20
    learning_rate: float = 1e-5
    freeze: FreezeSpec = NO_FROZEN
    seed: int = 0
    grad_clip_norm: float = 5.0
    cache_trigger: int = 60
    validation_size: int = 10

    def __post_init__(self):
        if isinstance(self.freeze, str):
            self.freeze = FreezeSpec.from_name(self.freeze)
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.cache_trigger < 1 or self.validation_size < 1:
            raise ValueError("cache_trigger and validation_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = self.freeze.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = {n: g * factor for n, g in grads.items()}
    return grads, norm


def apply_gradients(params: ParamSet, grads: dict, adam: AdamState, lr: float, clip_norm: float = 0.0):
    """Clip, then take one bias-corrected Adam step on the tensors in ``grads``.

    Returns new ``(params, adam)``; tensors without a gradient are shared,
    untouched, with the input ParamSet.
    """
    grads, _ = clip_by_global_norm(grads, clip_norm)
    step = adam.step + 1
    b1, b2 = adam.beta1, adam.beta2
    m_new, v_new, updates = dict(adam.m), dict(adam.v), {}
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, g in grads.items():
        w = params[name]
        m = b1 * adam.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * adam.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_new[name] = np.asarray(m, dtype=w.dtype)
        v_new[name] = np.asarray(v, dtype=w.dtype)
        delta = lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
        updates[name] = (w - delta).astype(w.dtype)
    return params.replace(updates), AdamState(m_new, v_new, step, b1, b2, adam.eps)


def _batch_loss(params: ParamSet, samples, with_grad: bool, freeze: FreezeSpec = NO_FROZEN):
    x, lengths = pad_batch(samples)
    logits, tape = forward(params, x, lengths)
    items = [(logits[i], s.label, lengths[i], len(s.label)) for i, s in enumerate(samples)]
    mean, results = ctc_loss_batch(items)
    if not np.isfinite(mean):
        raise NonFiniteLoss(f"batch loss is {mean}")
    if not with_grad:
        return mean, None
    dlogits = np.stack([r.dlogits for r in results]) / len(samples)
    return mean, backward(params, tape, dlogits, freeze)


def train_step(params: ParamSet, batch, adam: AdamState, config: TrainingConfig):
    """One Train call: forward, CTC, freeze-aware backward, clip, Adam.

    Returns ``(params, adam, mean_loss)``; on a non-finite loss or gradient
    :class:`NonFiniteLoss` is raised and the inputs are left as they were.
    """
    batch = list(batch)
    if not batch:
        raise EmptyDataset("empty batch")
    if len(batch) > config.batch_size:
        raise ValueError(f"batch of {len(batch)} exceeds batch_size {config.batch_size}")
    if not config.freeze.trainable_groups:
        raise ValueError("every parameter group is frozen; nothing to train")
    loss, grads = _batch_loss(params, batch, True, config.freeze)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLoss("non-finite gradient")
    new_params, new_adam = apply_gradients(params, grads, adam, config.learning_rate, config.grad_clip_norm)
    return new_params, new_adam, loss


def predict(params: ParamSet, features) -> str:
    logits, _ = forward(params, features)
    return greedy_decode(logits)


def predict_batch(params: ParamSet, samples, batch_size: int = 16) -> list:
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, lengths = pad_batch(chunk)
        logits, _ = forward(params, x, lengths)
        out.extend(greedy_decode(logits[j, : lengths[j]]) for j in range(len(chunk)))
    return out


def calc_loss(params: ParamSet, samples, batch_size: Optional[int] = None) -> float:
    """Mean CTC loss over ``samples`` without gradients or mutation."""
    samples = list(samples)
    if not samples:
        raise EmptyDataset("empty batch")
    batch_size = batch_size or len(samples)
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        mean, _ = _batch_loss(params, chunk, False)
        total += mean * len(chunk)
    return total / len(samples)


@dataclass
class EpochMetrics:
    epoch: int
    mean_train_loss: float
    val_loss: float
    val_wer: float
    wall_time_s: float = 0.0
    peak_mem_bytes: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.mean_train_loss,
                "val_loss": self.val_loss,
                "val_wer": self.val_wer,
                "wall_s": self.wall_time_s,
                "peak_mem": self.peak_mem_bytes,
            }
        )


class Action(str, Enum):
    CONTINUE = "continue"
    GRACE = "grace"
    STOP = "stop"


@dataclass(frozen=True)
class StopDecision:
    action: Action
    best_epoch: int


@dataclass
class StopState:
    history: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    in_grace: bool = False

    def best_key(self):
        for m in self.history:
            if m.epoch == self.best_epoch:
                return (m.val_wer, m.val_loss)
        return None


def should_stop(state: StopState, latest: EpochMetrics, max_epochs: Optional[int] = None) -> StopDecision:
    """Record ``latest`` in ``state`` and decide whether training goes on.

    Epochs are ranked by (WER, loss). An epoch that beats the best so far
    becomes the new best and clears any grace period. The first epoch that
    does not beat it opens a one-epoch grace period; a second one in a row
    stops training. Reaching ``max_epochs`` also stops.
    """
    best = state.best_key()
    state.history.append(latest)
    if best is None or (latest.val_wer, latest.val_loss) < best:
        state.best_epoch = latest.epoch
        state.in_grace = False
        action = Action.CONTINUE
    elif state.in_grace:
        action = Action.STOP
    else:
        state.in_grace = True
        action = Action.GRACE
    if max_epochs is not None and latest.epoch >= max_epochs:
        action = Action.STOP
    return StopDecision(action, state.best_epoch)


def peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@dataclass
class PersonalizationResult:
    params: ParamSet
    checkpoint_path: Path
    best_epoch: int
    history: list
    decisions: list


Evaluator = Callable[[ParamSet, list], tuple]


def default_evaluator(params: ParamSet, val_set: list) -> tuple:
    from .evaluation import evaluate_set

    report = evaluate_set(params, val_set)
    return report["mean_loss"], report["mean_wer"]


def run_personalization(
    initial,
    train_set,
    val_set,
    config: TrainingConfig,
    work_dir,
    model_config: Optional[ModelConfig] = None,
    evaluate: Optional[Evaluator] = None,
    metrics_path=None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> PersonalizationResult:
    """Fine-tune from ``initial`` (a checkpoint path or ParamSet) until the stopping rule fires.

    Every epoch writes ``epoch_NNN.epck`` into ``work_dir`` and, when
    ``metrics_path`` is given, appends one JSON line of metrics.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise EmptyDataset("training set is empty")
    if not val_set:
        raise EmptyDataset("validation set is empty")
    if isinstance(initial, ParamSet):
        params = initial
    else:
        if model_config is None:
            raise ValueError("model_config is required to load a checkpoint")
        params = load_checkpoint(initial, model_config)
    config_model = params.config
    evaluate = evaluate or default_evaluator
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    metrics_file = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    state = StopState()
    decisions = []
    try:
        for epoch in range(1, config.max_epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(len(train_set))
            losses = []
            for i in range(0, len(order), config.batch_size):
                batch = [train_set[j] for j in order[i:i + config.batch_size]]
                params, adam, loss = train_step(params, batch, adam, config)
                losses.append(loss * len(batch))
            val_loss, val_wer = evaluate(params, val_set)
            save_checkpoint(params, work_dir / f"epoch_{epoch:03d}.epck")
            metrics = EpochMetrics(
                epoch,
                float(np.sum(losses) / len(train_set)),
                float(val_loss),
                float(val_wer),
                time.perf_counter() - start,
                peak_rss_bytes(),
            )
            decision = should_stop(state, metrics, config.max_epochs)
            decisions.append(decision)
            log.info(
                "epoch %d train_loss %.4f val_loss %.4f val_wer %.2f -> %s",
                epoch, metrics.mean_train_loss, metrics.val_loss, metrics.val_wer, decision.action.value,
            )
            if metrics_file:
                metrics_file.write(metrics.to_json() + "\n")
                metrics_file.flush()
            if on_epoch:
                on_epoch(metrics)
            if decision.action is Action.STOP:
                break
    finally:
        if metrics_file:
            metrics_file.close()

    best_path = work_dir / f"epoch_{state.best_epoch:03d}.epck"
    best = load_checkpoint(best_path, config_model, params.dtype)
    return PersonalizationResult(best, best_path, state.best_epoch, state.history, decisions)


def fit(params: ParamSet, samples, epochs: int, config: TrainingConfig, on_epoch=None):
    """Plain multi-epoch training with no validation, used for baseline pretraining."""
    samples = list(samples)
    if not samples:
        raise EmptyDataset("training set is empty")
    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            batch = [samples[j] for j in order[i:i + config.batch_size]]
            params, adam, loss = train_step(params, batch, adam, config)
            total += loss * len(batch)
        history.append(total / len(samples))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
        if on_epoch:
            on_epoch(epoch, params, history[-1])
    return params, history
