"""Compact CONV -> BLSTM -> FC acoustic model with exact backpropagation.

Convolutions are 2D over (time, mel) with stride 1 and SAME padding, so
the number of output frames equals the number of input frames. Each
BLSTM layer sums its forward and backward outputs. Batches of unequal
length are handled with a time mask: padded frames never influence valid
frames, so a batched forward gives the same logits as per-utterance calls.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeMismatch, TapeReuse


class Group(str, Enum):
    CONV = "CONV"
    BLSTM = "BLSTM"
    FC = "FC"


GROUP_ORDER = (Group.CONV, Group.BLSTM, Group.FC)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 80
    conv_channels: tuple = (8, 8, 8)
    conv_kernels: tuple = ((3, 3), (3, 3), (3, 3))
    num_blstm_layers: int = 4
    blstm_units: int = 64
    fc_units: int = 64
    alphabet_size: int = 29

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(tuple(int(k) for k in ks) for ks in self.conv_kernels))
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ValueError("conv_channels and conv_kernels must have the same length")
        sizes = [self.input_dim, self.num_blstm_layers, self.blstm_units, self.fc_units, *self.conv_channels]
        if any(s < 1 for s in sizes) or len(self.conv_channels) < 1:
            raise ValueError(f"all model sizes must be >= 1: {self}")
        for kh, kw in self.conv_kernels:
            if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise ValueError(f"conv kernels must be odd and positive, got {(kh, kw)}")
        if self.alphabet_size < 2:
            raise ValueError("alphabet_size must be >= 2 (one symbol plus blank)")

    @property
    def num_conv_layers(self) -> int:
        return len(self.conv_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["conv_kernels"] = [list(k) for k in self.conv_kernels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> int:
        """Stable 64-bit hash of the configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass(frozen=True)
class FreezeSpec:
    frozen_groups: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "frozen_groups", frozenset(Group(g) for g in self.frozen_groups))

    def is_frozen(self, group) -> bool:
        return Group(group) in self.frozen_groups

    @property
    def trainable_groups(self) -> tuple:
        return tuple(g for g in GROUP_ORDER if g not in self.frozen_groups)

    @property
    def name(self) -> str:
        for name, preset in PRESETS.items():
            if preset == self:
                return name
        return "+".join(g.value for g in GROUP_ORDER if g in self.frozen_groups) or "none"

    @classmethod
    def from_name(cls, name: str) -> "FreezeSpec":
        try:
            return PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown freeze preset {name!r}; choose from {sorted(PRESETS)}") from None


NO_FROZEN = FreezeSpec()
FROZEN_CONV = FreezeSpec(frozenset({Group.CONV}))
FROZEN_CONV_BLSTM = FreezeSpec(frozenset({Group.CONV, Group.BLSTM}))
PRESETS = {"NoFrozen": NO_FROZEN, "FrozenConv": FROZEN_CONV, "FrozenConvBlstm": FROZEN_CONV_BLSTM}


@dataclass
class ParamSet:
    """Ordered named tensors, each tagged with its parameter group."""

    config: ModelConfig
    tensors: dict
    groups: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def names_in(self, group) -> list:
        return [n for n, g in self.groups.items() if g == Group(group)]

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {n: t.copy() for n, t in self.tensors.items()}, dict(self.groups))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.config, {n: t.astype(dtype) for n, t in self.tensors.items()}, dict(self.groups))

    def replace(self, updates: dict) -> "ParamSet":
        """Return a ParamSet sharing untouched arrays and using ``updates`` for the rest."""
        tensors = {n: updates.get(n, t) for n, t in self.tensors.items()}
        return ParamSet(self.config, tensors, dict(self.groups))


def param_layout(config: ModelConfig) -> list:
    """``(name, shape, group)`` for every tensor, in canonical order."""
    layout = []
    cin = 1
    for i, (cout, (kh, kw)) in enumerate(zip(config.conv_channels, config.conv_kernels), 1):
        layout.append((f"conv{i}.weight", (kh, kw, cin, cout), Group.CONV))
        layout.append((f"conv{i}.bias", (cout,), Group.CONV))
        cin = cout
    d = config.input_dim * cin
    H = config.blstm_units
    for i in range(1, config.num_blstm_layers + 1):
        for direction in ("fw", "bw"):
            layout.append((f"blstm{i}.{direction}.w_x", (d, 4 * H), Group.BLSTM))
            layout.append((f"blstm{i}.{direction}.w_h", (H, 4 * H), Group.BLSTM))
            layout.append((f"blstm{i}.{direction}.bias", (4 * H,), Group.BLSTM))
        d = H
    layout.append(("fc1.weight", (H, config.fc_units), Group.FC))
    layout.append(("fc1.bias", (config.fc_units,), Group.FC))
    layout.append(("fc2.weight", (config.fc_units, config.alphabet_size), Group.FC))
    layout.append(("fc2.bias", (config.alphabet_size,), Group.FC))
    return layout


#: Gain used when pretraining from scratch; keeps activation variance roughly
#: constant through the stacked BLSTM layers.
TRAINING_INIT_GAIN = float(np.sqrt(3.0))


def init_model(config: ModelConfig, seed: int, dtype=np.float32, gain: float = 1.0) -> ParamSet:
    """Weights uniform in ``[-k, k]`` with ``k = gain/sqrt(fan_in)``; biases zero."""
    rng = np.random.default_rng(seed)
    tensors, groups = {}, {}
    for name, shape, group in param_layout(config):
        if name.endswith("bias"):
            t = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            k = gain / np.sqrt(fan_in)
            t = rng.uniform(-k, k, size=shape)
        tensors[name] = t.astype(dtype)
        groups[name] = group
    return ParamSet(config, tensors, groups)


def count_params(config: ModelConfig, freeze: FreezeSpec = NO_FROZEN) -> dict:
    """Closed-form parameter counts per group, plus ``total`` and ``trainable``."""
    conv = 0
    cin = 1
    for cout, (kh, kw) in zip(config.conv_channels, config.conv_kernels):
        conv += kh * kw * cin * cout + cout
        cin = cout
    H = config.blstm_units
    blstm = 0
    d = config.input_dim * cin
    for _ in range(config.num_blstm_layers):
        blstm += 2 * (4 * H * d + 4 * H * H + 4 * H)
        d = H
    fc = H * config.fc_units + config.fc_units + config.fc_units * config.alphabet_size + config.alphabet_size
    counts = {Group.CONV: conv, Group.BLSTM: blstm, Group.FC: fc}
    out = {g.value: n for g, n in counts.items()}
    out["total"] = conv + blstm + fc
    out["trainable"] = sum(n for g, n in counts.items() if not freeze.is_frozen(g))
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ActivationTape:
    config: ModelConfig
    squeeze: bool
    mask: np.ndarray
    rev_index: np.ndarray
    conv: list
    lstm: list
    fc_in: np.ndarray
    fc_hidden: np.ndarray
    consumed: bool = False


def _conv_forward(x, w, b):
    kh, kw, cin, cout = w.shape
    ph, pw = kh // 2, kw // 2
    B, T, F, _ = x.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.empty((B, T, F, cout), dtype=x.dtype)
    out[...] = b
    for a in range(kh):
        for c in range(kw):
            out += xp[:, a:a + T, c:c + F, :] @ w[a, c]
    return out, xp


def _conv_backward(xp, w, dz, need_input):
    kh, kw, cin, cout = w.shape
    B, T, F, _ = dz.shape
    dz2 = dz.reshape(-1, cout)
    dw = np.empty_like(w)
    for a in range(kh):
        for c in range(kw):
            dw[a, c] = xp[:, a:a + T, c:c + F, :].reshape(-1, cin).T @ dz2
    db = dz2.sum(axis=0)
    dx = None
    if need_input:
        ph, pw = kh // 2, kw // 2
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for c in range(kw):
                dxp[:, a:a + T, c:c + F, :] += dz @ w[a, c].T
        dx = dxp[:, ph:ph + T, pw:pw + F, :]
    return dw, db, dx


def _lstm_forward(u, w_x, w_h, bias):
    B, T, _ = u.shape
    H = w_h.shape[0]
    gx = u @ w_x + bias
    gates = np.empty((B, T, 4 * H), dtype=u.dtype)
    c_all = np.empty((B, T, H), dtype=u.dtype)
    tc_all = np.empty((B, T, H), dtype=u.dtype)
    h_all = np.empty((B, T, H), dtype=u.dtype)
    h = np.zeros((B, H), dtype=u.dtype)
    c = np.zeros((B, H), dtype=u.dtype)
    for t in range(T):
        g = gx[:, t] + h @ w_h
        ifo = _sigmoid(g[:, : 3 * H])
        cand = np.tanh(g[:, 3 * H:])
        c = ifo[:, H:2 * H] * c + ifo[:, :H] * cand
        tc = np.tanh(c)
        h = ifo[:, 2 * H:] * tc
        gates[:, t, : 3 * H] = ifo
        gates[:, t, 3 * H:] = cand
        c_all[:, t] = c
        tc_all[:, t] = tc
        h_all[:, t] = h
    return h_all, (u, gates, c_all, tc_all, h_all)


def _lstm_backward(cache, w_x, w_h, dh_out, need_params, need_input):
    u, gates, c_all, tc_all, h_all = cache
    B, T, H = h_all.shape
    dgates = np.empty_like(gates)
    dh_next = np.zeros((B, H), dtype=h_all.dtype)
    dc_next = np.zeros((B, H), dtype=h_all.dtype)
    zeros = np.zeros((B, H), dtype=h_all.dtype)
    for t in range(T - 1, -1, -1):
        g = gates[:, t]
        i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = tc_all[:, t]
        c_prev = c_all[:, t - 1] if t > 0 else zeros
        dh = dh_out[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dg = dgates[:, t]
        dg[:, :H] = dc * cand * i * (1.0 - i)
        dg[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dg[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dg[:, 3 * H:] = dc * i * (1.0 - cand * cand)
        dc_next = dc * f
        dh_next = dg @ w_h.T
    grads = None
    if need_params:
        h_prev = np.concatenate((np.zeros((B, 1, H), dtype=h_all.dtype), h_all[:, :-1]), axis=1)
        dg2 = dgates.reshape(-1, 4 * H)
        grads = (u.reshape(-1, u.shape[2]).T @ dg2, h_prev.reshape(-1, H).T @ dg2, dg2.sum(axis=0))
    du = dgates @ w_x.T if need_input else None
    return grads, du


def _reverse_index(lengths, T):
    t = np.arange(T)
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def _take_time(x, index):
    return np.take_along_axis(x, index[:, :, None], axis=1)


def forward(params: ParamSet, features, lengths=None):
    """Run the network and return ``(logits, tape)``.

    ``features`` is ``(T, F)`` for one utterance or ``(B, T, F)`` for a
    zero-padded batch with per-item ``lengths``. Logits are unnormalized.
    """
    cfg = params.config
    dtype = params.dtype
    x = np.asarray(features, dtype=dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise ShapeMismatch(f"expected features (..., T, {cfg.input_dim}), got {np.shape(features)}")
    B, T, F = x.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.max(initial=0) > T or lengths.min(initial=1) < 1:
        raise ShapeMismatch(f"lengths {lengths.tolist()} do not fit a batch of shape {x.shape}")
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(dtype)
    mask4 = mask[:, :, None, None]

    h = x[..., None] * mask4
    conv_cache = []
    for i in range(1, cfg.num_conv_layers + 1):
        z, xp = _conv_forward(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        active = z > 0
        h = np.where(active, z, 0).astype(dtype) * mask4
        conv_cache.append((xp, active))
    seq = h.reshape(B, T, -1)

    rev = _reverse_index(lengths, T)
    lstm_cache = []
    mask3 = mask[:, :, None]
    for i in range(1, cfg.num_blstm_layers + 1):
        p = f"blstm{i}"
        h_fw, c_fw = _lstm_forward(seq, params[f"{p}.fw.w_x"], params[f"{p}.fw.w_h"], params[f"{p}.fw.bias"])
        h_bw_rev, c_bw = _lstm_forward(
            _take_time(seq, rev), params[f"{p}.bw.w_x"], params[f"{p}.bw.w_h"], params[f"{p}.bw.bias"]
        )
        seq = (h_fw + _take_time(h_bw_rev, rev)) * mask3
        lstm_cache.append((c_fw, c_bw))

    z1 = seq @ params["fc1.weight"] + params["fc1.bias"]
    a1 = np.maximum(z1, 0)
    logits = a1 @ params["fc2.weight"] + params["fc2.bias"]
    tape = ActivationTape(cfg, squeeze, mask, rev, conv_cache, lstm_cache, seq, a1)
    return (logits[0] if squeeze else logits), tape


def _in_param_order(params, grads):
    return {n: grads[n] for n in params if n in grads}


def backward(params: ParamSet, tape: ActivationTape, dlogits, freeze: FreezeSpec = NO_FROZEN) -> dict:
    """Gradients for the tensors of unfrozen groups only.

    Backpropagation stops at the earliest layer that still has an unfrozen
    group below it; frozen layers get no gradient computation at all.
    """
    if tape.consumed:
        raise TapeReuse("activation tape was already used by a backward pass")
    if tape.config != params.config:
        raise ShapeMismatch("tape was produced by a different model configuration")
    cfg = params.config
    dtype = params.dtype
    d = np.asarray(dlogits, dtype=dtype)
    if tape.squeeze:
        d = d[None]
    B, T = tape.mask.shape
    if d.shape != (B, T, cfg.alphabet_size):
        raise ShapeMismatch(f"dlogits shape {np.shape(dlogits)} does not match logits {(B, T, cfg.alphabet_size)}")
    tape.consumed = True

    train_fc = not freeze.is_frozen(Group.FC)
    train_blstm = not freeze.is_frozen(Group.BLSTM)
    train_conv = not freeze.is_frozen(Group.CONV)
    grads = {}
    mask3 = tape.mask[:, :, None]
    d = d * mask3
    A = cfg.alphabet_size
    d2 = d.reshape(-1, A)
    if train_fc:
        grads["fc2.weight"] = tape.fc_hidden.reshape(-1, cfg.fc_units).T @ d2
        grads["fc2.bias"] = d2.sum(axis=0)
    if not (train_fc or train_blstm or train_conv):
        return _in_param_order(params, grads)
    dz1 = (d @ params["fc2.weight"].T) * (tape.fc_hidden > 0)
    if train_fc:
        dz2 = dz1.reshape(-1, cfg.fc_units)
        grads["fc1.weight"] = tape.fc_in.reshape(-1, cfg.blstm_units).T @ dz2
        grads["fc1.bias"] = dz2.sum(axis=0)
    if not (train_blstm or train_conv):
        return _in_param_order(params, grads)

    dseq = (dz1 @ params["fc1.weight"].T) * mask3
    rev = tape.rev_index
    for i in range(cfg.num_blstm_layers, 0, -1):
        p = f"blstm{i}"
        c_fw, c_bw = tape.lstm[i - 1]
        need_input = i > 1 or train_conv
        g_fw, du_fw = _lstm_backward(c_fw, params[f"{p}.fw.w_x"], params[f"{p}.fw.w_h"], dseq, train_blstm, need_input)
        g_bw, du_bw_rev = _lstm_backward(
            c_bw, params[f"{p}.bw.w_x"], params[f"{p}.bw.w_h"], _take_time(dseq, rev), train_blstm, need_input
        )
        if train_blstm:
            for direction, g in (("fw", g_fw), ("bw", g_bw)):
                grads[f"{p}.{direction}.w_x"], grads[f"{p}.{direction}.w_h"], grads[f"{p}.{direction}.bias"] = g
        if not need_input:
            return _in_param_order(params, grads)
        dseq = (du_fw + _take_time(du_bw_rev, rev)) * mask3

    mask4 = tape.mask[:, :, None, None]
    dh = dseq.reshape(B, T, cfg.input_dim, cfg.conv_channels[-1])
    for i in range(cfg.num_conv_layers, 0, -1):
        xp, active = tape.conv[i - 1]
        dz = dh * active * mask4
        dw, db, dh = _conv_backward(xp, params[f"conv{i}.weight"], dz, need_input=i > 1)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return _in_param_order(params, grads)
