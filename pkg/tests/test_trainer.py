import json

import numpy as np
import pytest

from ondevice_stt.checkpoint import load_checkpoint
from ondevice_stt.ctc import ctc_loss
from ondevice_stt.errors import EmptyDataset, Infeasible
from ondevice_stt.model import FROZEN_CONV, FreezeSpec, Group, ModelConfig, ParamSet, forward
from ondevice_stt.trainer import (
    Action,
    AdamState,
    EpochMetrics,
    StopState,
    TrainingConfig,
    apply_gradients,
    calc_loss,
    predict,
    run_personalization,
    should_stop,
    train_step,
)


def scalar_params(w):
    cfg = ModelConfig()
    return ParamSet(cfg, {"w": np.array(w, dtype=np.float64)}, {"w": Group.FC})


def test_adam_first_step():
    params, adam = apply_gradients(scalar_params(1.0), {"w": np.array(1.0)}, AdamState(), lr=0.1)
    assert params["w"] == pytest.approx(0.9, abs=1e-8)
    assert adam.step == 1


def test_adam_matches_hand_recursion():
    params, adam = scalar_params(0.5), AdamState()
    w, m, v = 0.5, 0.0, 0.0
    for step, g in enumerate([0.3, -1.2, 0.7, 2.0], start=1):
        params, adam = apply_gradients(params, {"w": np.array(g)}, adam, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        assert params["w"] == pytest.approx(w, rel=1e-12)


def test_zero_gradient_is_bit_exact(tiny_params):
    grads = {n: np.zeros_like(tiny_params[n]) for n in tiny_params}
    after, _ = apply_gradients(tiny_params, grads, AdamState(), lr=0.1, clip_norm=5.0)
    assert all(np.array_equal(after[n], tiny_params[n]) for n in tiny_params)


def test_clipping_bounds_step():
    big = {"w": np.array(1e6)}
    params, adam = apply_gradients(scalar_params(0.0), big, AdamState(), lr=1.0, clip_norm=5.0)
    assert adam.m["w"] == pytest.approx(0.5)  # 0.1 * clipped gradient of 5


def make_set(rng, n, T=(5, 8), labels=3):
    from conftest import random_sample

    out = []
    for i in range(n):
        length = int(rng.integers(*T))
        label = rng.integers(0, labels, size=int(rng.integers(1, 3)))
        out.append(random_sample(rng, length, 6, label, sid=f"u{i}"))
    return out


def test_frozen_conv_untouched_over_ten_steps(tiny_params):
    rng = np.random.default_rng(0)
    config = TrainingConfig(batch_size=3, learning_rate=1e-2, freeze=FROZEN_CONV)
    params, adam = tiny_params, AdamState()
    for _ in range(10):
        params, adam, _ = train_step(params, make_set(rng, 3), adam, config)
    for name in tiny_params:
        same = np.array_equal(params[name], tiny_params[name])
        assert same == (tiny_params.groups[name] is Group.CONV), name


def test_calc_loss_matches_train_step(tiny_params):
    batch = make_set(np.random.default_rng(1), 4)
    config = TrainingConfig(batch_size=4)
    _, _, reported = train_step(tiny_params, batch, AdamState(), config)
    assert calc_loss(tiny_params, batch) == reported
    single = batch[:1]
    logits, _ = forward(tiny_params, single[0].features)
    assert calc_loss(tiny_params, single) == pytest.approx(ctc_loss(logits, single[0].label).loss, rel=1e-12)


def test_train_step_errors(tiny_params, make_sample):
    rng = np.random.default_rng(2)
    with pytest.raises(EmptyDataset):
        train_step(tiny_params, [], AdamState(), TrainingConfig())
    all_frozen = TrainingConfig(freeze=FreezeSpec(frozenset(Group)))
    with pytest.raises(ValueError):
        train_step(tiny_params, make_set(rng, 1), AdamState(), all_frozen)
    bad = make_sample(rng, 2, 6, [0, 0, 0])
    with pytest.raises(Infeasible) as info:
        train_step(tiny_params, make_set(rng, 2) + [bad], AdamState(), TrainingConfig())
    assert info.value.index == 2


def test_predict_all_blank(tiny_params):
    bias = np.zeros(4)
    bias[3] = 100.0
    forced = tiny_params.replace({"fc2.bias": bias})
    assert predict(forced, np.ones((6, 6))) == ""
    feats = np.random.default_rng(0).normal(size=(6, 6))
    assert predict(tiny_params, feats) == predict(tiny_params, feats)


def metrics(epoch, wer, loss=1.0):
    return EpochMetrics(epoch, 1.0, loss, wer, 0.1, 1000)


def trace(wers, losses=None, max_epochs=None):
    state = StopState()
    losses = losses or [1.0] * len(wers)
    out = []
    for i, (w, l) in enumerate(zip(wers, losses), start=1):
        d = should_stop(state, metrics(i, w, l), max_epochs)
        out.append((d.action, d.best_epoch))
    return out


C, G, S = Action.CONTINUE, Action.GRACE, Action.STOP


def test_stop_rule_traces():
    assert trace([30, 25]) == [(C, 1), (C, 2)]
    assert trace([30, 25, 26, 27]) == [(C, 1), (C, 2), (G, 2), (S, 2)]
    assert trace([30, 25, 26, 24]) == [(C, 1), (C, 2), (G, 2), (C, 4)]
    # a grace epoch that ties the best is still not an improvement
    assert trace([30, 25, 25, 25]) == [(C, 1), (C, 2), (G, 2), (S, 2)]
    # loss breaks WER ties
    assert trace([25, 25], [2.0, 1.5]) == [(C, 1), (C, 2)]
    # recovery then a fresh grace period
    assert trace([30, 31, 29, 32, 33]) == [(C, 1), (G, 1), (C, 3), (G, 3), (S, 3)]
    # grace compares against the best, not the previous epoch
    assert trace([20, 26, 25]) == [(C, 1), (G, 1), (S, 1)]
    assert trace([30, 29, 28], max_epochs=3)[-1] == (S, 3)


class Scripted:
    def __init__(self, wers):
        self.wers = list(wers)
        self.calls = 0

    def __call__(self, params, val_set):
        wer = self.wers[self.calls]
        self.calls += 1
        return 1.0, wer


def test_scripted_run_returns_first_epoch(tiny_params, tmp_path):
    rng = np.random.default_rng(3)
    train, val = make_set(rng, 4), make_set(rng, 2)
    config = TrainingConfig(batch_size=2, learning_rate=1e-2, max_epochs=10)
    result = run_personalization(tiny_params, train, val, config, tmp_path, evaluate=Scripted([25, 26, 27]))
    assert result.best_epoch == 1
    assert [d.action for d in result.decisions] == [C, G, S]
    assert len(result.history) == 3
    saved = load_checkpoint(tmp_path / "epoch_001.epck", tiny_params.config, np.float64)
    assert result.checkpoint_path == tmp_path / "epoch_001.epck"
    assert all(np.array_equal(result.params[n], saved[n]) for n in saved)
    third = load_checkpoint(tmp_path / "epoch_003.epck", tiny_params.config, np.float64)
    assert any(not np.array_equal(third[n], saved[n]) for n in saved)


def test_single_epoch_cap(tiny_params, tmp_path):
    rng = np.random.default_rng(4)
    config = TrainingConfig(batch_size=2, max_epochs=1)
    result = run_personalization(tiny_params, make_set(rng, 3), make_set(rng, 2), config, tmp_path)
    assert result.best_epoch == 1 and len(result.history) == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_001.epck"]


def test_short_last_batch_is_trained(tiny_params, tmp_path, monkeypatch):
    import ondevice_stt.trainer as trainer_mod

    rng = np.random.default_rng(5)
    seen = []
    original = trainer_mod.train_step

    def spy(params, batch, adam, config):
        seen.append(len(batch))
        return original(params, batch, adam, config)

    monkeypatch.setattr(trainer_mod, "train_step", spy)
    config = TrainingConfig(batch_size=7, max_epochs=1)
    run_personalization(tiny_params, make_set(rng, 10), make_set(rng, 2), config, tmp_path)
    assert seen == [7, 3]


def test_full_run_determinism_and_metrics(tiny_params, tmp_path):
    rng = np.random.default_rng(6)
    train, val = make_set(rng, 6), make_set(rng, 3)
    config = TrainingConfig(batch_size=2, learning_rate=5e-2, max_epochs=4, seed=9)
    runs = []
    for k in range(2):
        path = tmp_path / f"m{k}.jsonl"
        r = run_personalization(tiny_params, train, val, config, tmp_path / f"w{k}", metrics_path=path)
        runs.append((r, path.read_text().splitlines()))
    (a, lines_a), (b, lines_b) = runs
    assert [(m.mean_train_loss, m.val_loss, m.val_wer) for m in a.history] == [
        (m.mean_train_loss, m.val_loss, m.val_wer) for m in b.history
    ]
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    for line in lines_a:
        row = json.loads(line)
        assert list(row) == ["epoch", "train_loss", "val_loss", "val_wer", "wall_s", "peak_mem"]
        assert isinstance(row["epoch"], int) and isinstance(row["peak_mem"], int)
    best = min(a.history, key=lambda m: (m.val_wer, m.val_loss))
    assert a.best_epoch == best.epoch
    # the run stops within two epochs of its best
    assert len(a.history) <= min(best.epoch + 2, config.max_epochs)


def test_empty_sets(tiny_params, tmp_path):
    rng = np.random.default_rng(7)
    with pytest.raises(EmptyDataset):
        run_personalization(tiny_params, [], make_set(rng, 1), TrainingConfig(), tmp_path)
    with pytest.raises(EmptyDataset):
        run_personalization(tiny_params, make_set(rng, 1), [], TrainingConfig(), tmp_path)


def test_config_roundtrip():
    cfg = TrainingConfig(batch_size=3, freeze="FrozenConv")
    assert cfg.freeze == FROZEN_CONV
    d = cfg.to_dict()
    assert d["freeze"] == "FrozenConv"
    assert TrainingConfig.from_dict(d) == cfg
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"nope": 1})
