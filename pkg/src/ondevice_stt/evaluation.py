"""Word error rate and evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer_percent(self) -> float:
        return 100.0 * self.errors / max(self.ref_words, 1)


def tokenize(text: str) -> list:
    return text.split()


def edit_distance_words(ref, hyp) -> WerBreakdown:
    """Minimum-cost word alignment with unit costs.

    Among alignments of equal cost, the one with fewer insertions wins,
    then the one with fewer deletions.
    """
    ref = tokenize(ref) if isinstance(ref, str) else list(ref)
    hyp = tokenize(hyp) if isinstance(hyp, str) else list(hyp)
    n, m = len(ref), len(hyp)
    # cell = (cost, insertions, deletions, substitutions); tuples compare lexicographically
    prev = [(j, j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            c, ins, dele, sub = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, ins, dele, sub)
            else:
                diag = (c + 1, ins, dele, sub + 1)
            c, ins, dele, sub = prev[j]
            up = (c + 1, ins, dele + 1, sub)
            c, ins, dele, sub = cur[j - 1]
            left = (c + 1, ins + 1, dele, sub)
            cur.append(min(diag, up, left))
        prev = cur
    _, ins, dele, sub = prev[m]
    return WerBreakdown(sub, dele, ins, n)


def wer(ref, hyp) -> float:
    return edit_distance_words(ref, hyp).wer_percent


def summarize(items: list, mean_loss: float) -> dict:
    """Aggregate per-item ``{"id","ref","hyp","wer"}`` rows into a report."""
    if not items:
        raise EmptyDataset("cannot summarize an empty evaluation set")
    breakdowns = [edit_distance_words(it["ref"], it["hyp"]) for it in items]
    errors = sum(b.errors for b in breakdowns)
    words = sum(b.ref_words for b in breakdowns)
    return {
        "items": items,
        "mean_wer": float(np.mean([it["wer"] for it in items])),
        "word_weighted_wer": 100.0 * errors / max(words, 1),
        "mean_loss": float(mean_loss),
    }


def evaluate_set(params, samples, batch_size: int = 16) -> dict:
    """Decode every sample and report per-utterance and mean WER plus CTC loss."""
    from .trainer import calc_loss, predict_batch

    samples = list(samples)
    if not samples:
        raise EmptyDataset("evaluation set is empty")
    hyps = predict_batch(params, samples, batch_size)
    items = [
        {"id": s.id, "ref": s.text, "hyp": h, "wer": wer(s.text, h)}
        for s, h in zip(samples, hyps)
    ]
    return summarize(items, calc_loss(params, samples, batch_size))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["items", "mean_wer", "word_weighted_wer", "mean_loss"],
    "properties": {
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "ref", "hyp", "wer"],
                "properties": {
                    "id": {"type": "string"},
                    "ref": {"type": "string"},
                    "hyp": {"type": "string"},
                    "wer": {"type": "number", "minimum": 0},
                },
            },
        },
        "mean_wer": {"type": "number", "minimum": 0},
        "word_weighted_wer": {"type": "number", "minimum": 0},
        "mean_loss": {"type": "number"},
    },
}
