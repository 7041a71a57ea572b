"""The model abstraction: task prompt builders over pluggable completion backends.

Four tasks cover everything the strategies need: box prediction (REC),
grounded description generation (GDESC), yes/no region verification (VQA),
and region captioning (CAPTION). Backends share one interface; the live one
speaks an OpenAI-compatible chat-completions wire protocol, the others are
fully scripted (mock, replay) or computed from a known scene (oracle).
"""

from __future__ import annotations

import base64
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence

import requests

from . import prompts, transcript
from .errors import BackendError, ReplayMissError, UsageError
from .grounding import RecContext, assemble_context
from .geometry import NormBox
from .imaging import RasterImage, encode_png


class TaskKind(str, Enum):
    REC = "REC"
    GDESC = "GDESC"
    VQA = "VQA"
    CAPTION = "CAPTION"


@dataclass(frozen=True, slots=True)
class ModelRequest:
    """One completion request: exactly one image plus a task prompt.

    For VQA/CAPTION the image is the cropped region, not the full frame;
    ``region`` then records where that crop sits in full-image coordinates
    (scripted scene backends need it, the live backend ignores it).
    """

    task: TaskKind
    image: RasterImage
    prompt: str
    sample_id: str = ""
    trial: int = 0
    region: NormBox | None = None


@dataclass(frozen=True, slots=True)
class ModelReply:
    text: str
    latency_ms: float
    backend_id: str


def build_prompt(
    task: TaskKind,
    *,
    n_objects: int | None = None,
    context: RecContext | str | None = None,
    expression: str | None = None,
    include_expression_in_scan: bool = False,
) -> str:
    """Deterministic prompt text for a task.

    REC accepts either a :class:`RecContext` or a pre-rendered context block
    string (used when boxes have been stripped from the descriptions).
    """
    if task is TaskKind.GDESC:
        if n_objects is None or n_objects < 1:
            raise UsageError("GDESC prompt needs n_objects >= 1")
        return prompts.grounded_scan(
            n_objects, expression if include_expression_in_scan else None
        )
    if task is TaskKind.REC:
        if isinstance(context, RecContext):
            return assemble_context(context)
        if isinstance(context, str):
            if not expression:
                raise UsageError("REC prompt with a plain context block needs the expression")
            return prompts.referring_box(context, expression)
        raise UsageError("REC prompt needs a RecContext or a context block string")
    if task is TaskKind.VQA:
        if not expression:
            raise UsageError("VQA prompt needs the referring expression")
        return prompts.region_match(expression)
    if task is TaskKind.CAPTION:
        return prompts.region_caption()
    raise UsageError(f"unknown task: {task!r}")


def request_digest(request: ModelRequest) -> str:
    """Content hash of a request: task, prompt bytes, and PNG image bytes."""
    return transcript.digest(request.task.value, request.prompt, encode_png(request.image))


class Backend:
    """Interface all completion backends implement."""

    backend_id: str = "backend"

    def complete(self, request: ModelRequest) -> ModelReply:
        raise NotImplementedError

    def _reply(self, text: str, started: float) -> ModelReply:
        return ModelReply(
            text=text,
            latency_ms=(time.monotonic() - started) * 1000.0,
            backend_id=self.backend_id,
        )


ScriptValue = str | Sequence[str] | Callable[[ModelRequest], str]


class MockBackend(Backend):
    """Fully scripted backend for tests.

    The script maps each task to a constant reply, a finite reply sequence
    (consumed in call order), or a callable of the request. Exhausting a
    sequence or hitting an unscripted task raises, which keeps trace-contract
    tests honest about call counts.
    """

    backend_id = "mock"

    def __init__(self, script: Mapping[TaskKind, ScriptValue]):
        self._script = dict(script)
        self._cursors: dict[TaskKind, int] = {}
        self._lock = threading.Lock()
        self.calls: list[ModelRequest] = []

    def complete(self, request: ModelRequest) -> ModelReply:
        started = time.monotonic()
        with self._lock:
            self.calls.append(request)
            if request.task not in self._script:
                raise BackendError(f"mock has no script for task {request.task.value}")
            entry = self._script[request.task]
            if callable(entry):
                text = entry(request)
            elif isinstance(entry, str):
                text = entry
            else:
                cursor = self._cursors.get(request.task, 0)
                if cursor >= len(entry):
                    raise BackendError(
                        f"mock script for {request.task.value} exhausted after {cursor} replies"
                    )
                text = entry[cursor]
                self._cursors[request.task] = cursor + 1
        return self._reply(text, started)

    def count(self, task: TaskKind) -> int:
        with self._lock:
            return sum(1 for r in self.calls if r.task is task)


class LiveBackend(Backend):
    """OpenAI-compatible chat-completions client with image input.

    Images travel as base64 PNG data URLs in a single user message;
    temperature is pinned to 0 and a fixed seed is requested where the server
    supports it. Transient transport failures retry with exponential backoff.
    """

    RETRYABLE_STATUS = (429, 500, 502, 503, 504)

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "CAPTIONCHAIN_API_KEY",
        max_retries: int = 3,
        timeout_s: float = 120.0,
        backoff_s: float = 0.5,
        seed: int = 0,
    ):
        if not endpoint or not model:
            raise BackendError("live backend requires an endpoint URL and a model name")
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.timeout_s = timeout_s
        self.backoff_s = backoff_s
        self.seed = seed
        self.backend_id = f"live:{model}"

    def probe(self) -> None:
        """Fail fast if the endpoint host is unreachable. Any HTTP response counts
        as reachable; only transport-level failures are configuration errors."""
        try:
            requests.get(self.endpoint, timeout=min(10.0, self.timeout_s))
        except requests.RequestException as exc:
            raise BackendError(f"endpoint {self.endpoint} unreachable: {exc}") from exc

    def complete(self, request: ModelRequest) -> ModelReply:
        started = time.monotonic()
        payload = self._payload(request)
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error = "no attempt made"
        for attempt in range(1, self.max_retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout_s
                )
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if resp.status_code == 200:
                    return self._reply(self._extract_text(resp), started)
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in self.RETRYABLE_STATUS:
                    break
            if attempt < self.max_retries:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
        raise BackendError(
            f"live backend failed after {self.max_retries} attempts: {last_error}"
        )

    def _payload(self, request: ModelRequest) -> dict:
        png_b64 = base64.b64encode(encode_png(request.image)).decode("ascii")
        return {
            "model": self.model,
            "temperature": 0,
            "seed": self.seed,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{png_b64}"},
                        },
                        {"type": "text", "text": request.prompt},
                    ],
                }
            ],
        }

    @staticmethod
    def _extract_text(resp: requests.Response) -> str:
        try:
            doc = resp.json()
            return doc["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc


class RecordingBackend(Backend):
    """Wraps another backend, appending every request/reply to a transcript."""

    def __init__(self, inner: Backend, writer: transcript.TranscriptWriter):
        self.inner = inner
        self.writer = writer
        self.backend_id = f"record({inner.backend_id})"

    def complete(self, request: ModelRequest) -> ModelReply:
        reply = self.inner.complete(request)
        self.writer.record(
            request_digest(request), request.task.value, request.prompt, reply.text
        )
        return reply


class ReplayBackend(Backend):
    """Answers requests from a recorded transcript; a digest miss is an error."""

    backend_id = "replay"

    def __init__(self, transcript_path: str):
        self._replies = transcript.load_transcript(transcript_path)

    def complete(self, request: ModelRequest) -> ModelReply:
        started = time.monotonic()
        key = request_digest(request)
        if key not in self._replies:
            raise ReplayMissError(key)
        return self._reply(self._replies[key], started)
