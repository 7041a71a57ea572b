"""Digest-keyed transcripts of model request/reply pairs for bit-exact replay.

A transcript is a line-delimited UTF-8 file of JSON records:

    {"digest": <hex>, "task": <str>, "prompt_text": <str>,
     "reply_text": <str>, "prompt_version": <str>}

The digest is a SHA-256 over task, prompt bytes, and the request image's PNG
encoding, so a lookup hits only when the request content is identical.
Replay is faithful for backends that are pure functions of the request;
scripted backends with stateful reply sequences may alias identical requests.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path

from .errors import DatasetError
from .prompts import PROMPT_VERSION


def digest(task: str, prompt_text: str, image_png: bytes) -> str:
    h = hashlib.sha256()
    h.update(task.encode("utf-8"))
    h.update(b"\x00")
    h.update(prompt_text.encode("utf-8"))
    h.update(b"\x00")
    h.update(image_png)
    return h.hexdigest()


class TranscriptWriter:
    """Appends request/reply records to a transcript file.

    Appends are serialized with a lock; record order is by completion, which
    is irrelevant to replay since lookups are by digest.
    """

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._handle = self._path.open("w", encoding="utf-8")

    @property
    def path(self) -> Path:
        return self._path

    def record(self, request_digest: str, task: str, prompt_text: str, reply_text: str) -> None:
        line = json.dumps(
            {
                "digest": request_digest,
                "task": task,
                "prompt_text": prompt_text,
                "reply_text": reply_text,
                "prompt_version": PROMPT_VERSION,
            },
            sort_keys=True,
        )
        with self._lock:
            self._handle.write(line + "\n")
            self._handle.flush()

    def close(self) -> None:
        with self._lock:
            self._handle.close()

    def __enter__(self) -> "TranscriptWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_transcript(path: str | Path) -> dict[str, str]:
    """Read a transcript into a digest -> reply mapping."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"transcript not found: {path}")
    replies: dict[str, str] = {}
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                replies[rec["digest"]] = rec["reply_text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"malformed transcript record at {path}:{lineno}") from exc
    return replies
