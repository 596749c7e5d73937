"""CTC loss, its gradient with respect to the logits, and greedy decoding.

The blank symbol is the last alphabet index. All probabilities are
computed in log space in float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BudgetExceeded, Infeasible
from .text import SYMBOLS

NEG_INF = -np.inf


@dataclass
class CtcResult:
    loss: float
    dlogits: np.ndarray


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def min_frames(label) -> int:
    """Fewest frames that can emit ``label``: one per symbol plus a blank between repeats."""
    label = np.asarray(label)
    return int(len(label) + np.count_nonzero(label[1:] == label[:-1]))


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_loss(logits, label, logit_len=None, label_len=None) -> CtcResult:
    """Negative log-likelihood of ``label`` under CTC, with gradient.

    ``logits`` is ``(T, A)``; rows at or past ``logit_len`` are treated as
    padding and get a zero gradient. The gradient is
    ``softmax(logits) - posterior``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    T, A = logits.shape
    blank = A - 1
    logit_len = T if logit_len is None else int(logit_len)
    label = np.asarray(label, dtype=np.int64)
    label = label[: len(label) if label_len is None else int(label_len)]
    if logit_len > T or logit_len < 0:
        raise ValueError(f"logit_len {logit_len} outside [0, {T}]")
    if len(label) == 0:
        raise Infeasible("empty label")
    if label.min() < 0 or label.max() >= blank:
        raise ValueError(f"label symbols must lie in [0, {blank - 1}]")
    need = min_frames(label)
    if need > logit_len:
        raise Infeasible(f"label needs {need} frames but only {logit_len} are available")

    logp = log_softmax(logits[:logit_len])
    S = 2 * len(label) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = label
    # transitions s-2 -> s are allowed into non-blank symbols that differ from s-2
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = label[1:] != label[:-1]

    emit = logp[:, ext]  # (T, S)
    alpha = np.full((logit_len, S), NEG_INF)
    alpha[0, :2] = emit[0, :2]
    pad = np.full(2, NEG_INF)
    for t in range(1, logit_len):
        prev = alpha[t - 1]
        shift1 = np.concatenate((pad[:1], prev[:-1]))
        shift2 = np.where(skip, np.concatenate((pad, prev[:-2])), NEG_INF)
        alpha[t] = _logsumexp3(prev, shift1, shift2) + emit[t]

    # beta[t, s]: log prob of the suffix after frame t given state s at t
    beta = np.full((logit_len, S), NEG_INF)
    beta[-1, -2:] = 0.0
    skip_next = np.concatenate((skip[2:], [False, False]))
    for t in range(logit_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        shift1 = np.concatenate((nxt[1:], pad[:1]))
        shift2 = np.where(skip_next, np.concatenate((nxt[2:], pad)), NEG_INF)
        beta[t] = _logsumexp3(nxt, shift1, shift2)

    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    occupancy = np.exp(alpha + beta - log_p)  # (T, S)
    posterior = np.zeros((logit_len, A))
    for s in range(S):
        posterior[:, ext[s]] += occupancy[:, s]
    dlogits = np.zeros((T, A))
    dlogits[:logit_len] = np.exp(logp) - posterior
    return CtcResult(loss=float(-log_p), dlogits=dlogits)


def ctc_loss_batch(batch) -> tuple[float, list[CtcResult]]:
    """Mean CTC loss over ``(logits, label, logit_len, label_len)`` items."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    results = []
    for i, (logits, label, logit_len, label_len) in enumerate(batch):
        try:
            results.append(ctc_loss(logits, label, logit_len, label_len))
        except Infeasible as exc:
            raise Infeasible(str(exc), index=i) from None
    return float(np.mean([r.loss for r in results])), results


def collapse(path, blank: int):
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def best_path(logits) -> list[int]:
    """Argmax path with repeats merged and blanks removed."""
    logits = np.asarray(logits)
    return list(collapse(logits.argmax(axis=1), logits.shape[1] - 1))


def greedy_decode(logits, symbols: str = SYMBOLS) -> str:
    return "".join(symbols[k] for k in best_path(logits))


@lru_cache(maxsize=64)
def _all_paths(T: int, A: int):
    paths = np.array(list(itertools.product(range(A), repeat=T)), dtype=np.int64).reshape(-1, T)
    labels = [collapse(p, A - 1) for p in paths]
    return paths, labels


def path_label_distribution(logits) -> dict[tuple, float]:
    """Probability of every collapsed label, by enumerating all ``A**T`` paths."""
    logits = np.asarray(logits, dtype=np.float64)
    T, A = logits.shape
    if T > 8 or A > 4:
        raise BudgetExceeded(f"enumeration limited to T <= 8 and A <= 4, got T={T}, A={A}")
    paths, labels = _all_paths(T, A)
    probs = np.exp(log_softmax(logits))
    path_p = np.prod(probs[np.arange(T), paths], axis=1)
    dist: dict[tuple, float] = {}
    for lab, p in zip(labels, path_p):
        dist[lab] = dist.get(lab, 0.0) + p
    return dist


def brute_force_ctc(logits, label) -> float:
    """CTC loss by summing over every frame path; ``inf`` if none collapses to ``label``."""
    logits = np.asarray(logits, dtype=np.float64)
    T, A = logits.shape
    if T > 8 or A > 4:
        raise BudgetExceeded(f"enumeration limited to T <= 8 and A <= 4, got T={T}, A={A}")
    paths, labels = _all_paths(T, A)
    target = tuple(int(k) for k in label)
    mask = np.fromiter((lab == target for lab in labels), dtype=bool, count=len(labels))
    if not mask.any():
        return float("inf")
    logp = log_softmax(logits)
    path_logp = logp[np.arange(T), paths[mask]].sum(axis=1)
    m = path_logp.max()
    return float(-(m + np.log(np.exp(path_logp - m).sum())))
