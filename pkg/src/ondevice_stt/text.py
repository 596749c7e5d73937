"""Output alphabet and transcript normalization."""

from __future__ import annotations

import unicodedata

import numpy as np

from .errors import BadTranscript

#: Symbols in index order; the CTC blank sits after them, at the last index.
SYMBOLS = "abcdefghijklmnopqrstuvwxyz '"
ALPHABET_SIZE = len(SYMBOLS) + 1
BLANK = ALPHABET_SIZE - 1

_INDEX = {c: i for i, c in enumerate(SYMBOLS)}


def normalize_transcript(text: str) -> str:
    """Lowercase, drop punctuation and collapse whitespace.

    Punctuation (other than the apostrophe, which is a symbol) is removed
    silently. Any other character outside the alphabet, such as a digit,
    raises :class:`BadTranscript`.
    """
    out = []
    bad = []
    for ch in text.lower():
        if ch in _INDEX or ch.isspace():
            out.append(" " if ch.isspace() else ch)
        elif unicodedata.category(ch).startswith("P"):
            continue
        else:
            bad.append(ch)
    if bad:
        raise BadTranscript(text, bad)
    return " ".join("".join(out).split())


def encode(text: str) -> np.ndarray:
    try:
        return np.array([_INDEX[c] for c in text], dtype=np.int64)
    except KeyError as exc:
        raise BadTranscript(text, [exc.args[0]]) from None


def decode(indices) -> str:
    return "".join(SYMBOLS[i] for i in indices)
