"""On-device utterance cache with a two-phase drain.

Layout::

    root/manifest.jsonl   {"id", "audio", "text", "dur_s"} per line
    root/audio/<id>.wav

``drain`` hands out a train/validation split and a completion token; files
are deleted only when :meth:`UtteranceCache.complete` receives that token.
A session that dies before completing leaves the cache untouched.
"""

from __future__ import annotations

import json
import os
import re
import secrets
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, read_wav, write_wav
from .errors import BadAudio, NotReady
from .text import normalize_transcript


@dataclass(frozen=True)
class Utterance:
    id: str
    audio: Path
    text: str
    duration_s: float


@dataclass(frozen=True)
class DrainResult:
    train: list
    validation: list
    token: str


class UtteranceCache:
    def __init__(self, root, trigger: int = 60):
        if trigger < 1:
            raise ValueError("trigger must be >= 1")
        self.root = Path(root)
        self.trigger = trigger
        (self.root / "audio").mkdir(parents=True, exist_ok=True)
        self._pending: dict = {}
        self._drained_ids: set = set()

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    def utterances(self) -> list:
        if not self.manifest_path.exists():
            return []
        out = []
        with open(self.manifest_path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    row = json.loads(line)
                    out.append(Utterance(row["id"], self.root / row["audio"], row["text"], row["dur_s"]))
        return out

    def __len__(self):
        return len(self.utterances())

    def _write_manifest(self, utterances) -> None:
        fd, tmp = tempfile.mkstemp(prefix=".manifest.", dir=self.root)
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for u in utterances:
                rel = u.audio.relative_to(self.root).as_posix()
                f.write(json.dumps({"id": u.id, "audio": rel, "text": u.text, "dur_s": u.duration_s}) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.manifest_path)

    def _next_id(self, existing) -> str:
        numbers = [int(m.group(1)) for u in existing if (m := re.fullmatch(r"utt(\d+)", u.id))]
        n = max(numbers, default=0) + 1
        while (self.root / "audio" / f"utt{n:06d}.wav").exists():
            n += 1
        return f"utt{n:06d}"

    def add_utterance(self, audio, transcript: str) -> int:
        """Store one recording with its transcript; returns the new count.

        ``audio`` is an :class:`AudioBuffer` or a path to a WAV file. The
        manifest is only rewritten after the audio file is safely on disk.
        """
        text = normalize_transcript(transcript)
        if isinstance(audio, AudioBuffer):
            buf = audio
        else:
            buf = read_wav(audio)
        if len(buf) == 0:
            raise BadAudio("empty recording")
        existing = self.utterances()
        uid = self._next_id(existing)
        path = self.root / "audio" / f"{uid}.wav"
        tmp = path.with_suffix(".wav.tmp")
        if isinstance(audio, AudioBuffer):
            write_wav(tmp, buf)
        else:
            shutil.copyfile(audio, tmp)
        os.replace(tmp, path)
        existing.append(Utterance(uid, path, text, round(buf.duration_s, 4)))
        self._write_manifest(existing)
        return len(existing)

    def available(self) -> list:
        return [u for u in self.utterances() if u.id not in self._drained_ids]

    def ready(self) -> bool:
        """True once at least ``trigger`` utterances wait outside any pending session."""
        return len(self.available()) >= self.trigger

    def drain(self, validation_size: int = 10, seed: int = 0) -> DrainResult:
        """Split every waiting utterance into train and validation sets.

        Nothing is deleted here; pass the returned token to :meth:`complete`
        once the training session has finished.
        """
        items = self.available()
        if len(items) < self.trigger:
            raise NotReady(f"cache holds {len(items)} utterances, training starts at N={self.trigger}")
        if validation_size >= len(items):
            raise NotReady(f"need more than {validation_size} utterances to hold out a validation split")
        order = np.random.default_rng(seed).permutation(len(items))
        val = [items[i] for i in order[:validation_size]]
        train = [items[i] for i in order[validation_size:]]
        token = secrets.token_hex(8)
        ids = {u.id for u in items}
        self._pending[token] = ids
        self._drained_ids |= ids
        return DrainResult(train, val, token)

    def complete(self, token: str) -> int:
        """Delete the utterances of a finished session; returns how many were removed."""
        try:
            ids = self._pending.pop(token)
        except KeyError:
            raise ValueError("unknown or already used completion token") from None
        keep = [u for u in self.utterances() if u.id not in ids]
        self._write_manifest(keep)
        for uid in ids:
            (self.root / "audio" / f"{uid}.wav").unlink(missing_ok=True)
        self._drained_ids -= ids
        return len(ids)

    def abandon(self, token: str) -> None:
        """Return a session's utterances to the pool without deleting anything."""
        ids = self._pending.pop(token, set())
        self._drained_ids -= ids
