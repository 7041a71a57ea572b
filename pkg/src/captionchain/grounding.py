"""Parsing and serialization of grounded descriptions and model replies.

The line grammar for a grounded entry is fixed by this package:

    <n>. <description> [x1, y1, x2, y2]

with normalized coordinates serialized at 2 decimal places. Replies from
real models drift, so parsing is lenient by default (malformed lines are
skipped with a warning); strict mode is available for scripted backends.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import prompts
from .errors import ParseError, UsageError
from .geometry import ImageSize, NormBox, sanitize

# Marker appended to rejected predictions so the model is discouraged from
# repeating them rather than reinforced.
REJECTED_SUFFIX = "(previously predicted, rejected)"

# Entries beyond expected_count + this margin are dropped (runaway-list guard).
EXTRA_ENTRY_MARGIN = 5

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_ENTRY_RE = re.compile(
    rf"^\s*(\d+)\s*[.):]\s*(.*\S)\s*\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]\s*$"
)
_BOX_RE = re.compile(rf"\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]")
_WORD_RE = re.compile(r"[a-zA-Z]+")


@dataclass(frozen=True, slots=True)
class GroundedEntry:
    """One numbered item: a textual object description paired with its box."""

    index: int
    description: str
    box: NormBox

    def __post_init__(self):
        if self.index < 1:
            raise UsageError(f"entry index must be >= 1, got {self.index}")
        if not self.description.strip():
            raise UsageError("entry description must be non-empty")
        if "\n" in self.description or "\r" in self.description:
            raise UsageError("entry description must be a single line")


@dataclass(frozen=True, slots=True)
class GroundedDescription:
    """An ordered list of grounded entries with strictly increasing indices."""

    entries: tuple[GroundedEntry, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        indices = [e.index for e in self.entries]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise UsageError(f"entry indices must be strictly increasing, got {indices}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def boxes(self) -> list[NormBox]:
        return [e.box for e in self.entries]


@dataclass(frozen=True, slots=True)
class RecContext:
    """Textual context for a box prediction: grounded entries, appended
    rejected (box, caption) pairs, and the referring expression.

    Immutable; the refinement loop grows ``appended`` by constructing a new
    context, so pairs can never be reordered or dropped mid-run.
    """

    grounded: GroundedDescription
    appended: tuple[tuple[NormBox, str], ...]
    expression: str

    def __post_init__(self):
        if not self.expression.strip():
            raise UsageError("referring expression must be non-empty")

    def with_appended(self, box: NormBox, caption: str) -> "RecContext":
        return RecContext(self.grounded, self.appended + ((box, caption),), self.expression)


def format_box(box: NormBox) -> str:
    """Serialize a box at 2 decimal places: ``[0.10, 0.20, 0.50, 0.60]``."""
    return "[" + ", ".join(f"{v:.2f}" for v in box.as_list()) + "]"


def parse_grounded(
    reply: str,
    expected_count: int,
    policy: str = "lenient",
    image_size: ImageSize | None = None,
) -> GroundedDescription:
    """Extract numbered (description, box) entries from a model reply.

    Lenient policy skips malformed or out-of-order lines with a warning;
    strict policy raises on the first malformed line and on empty results.
    Boxes pass through :func:`~captionchain.geometry.sanitize`.
    """
    if policy not in ("strict", "lenient"):
        raise UsageError(f"policy must be 'strict' or 'lenient', got {policy!r}")
    entries: list[GroundedEntry] = []
    warnings: list[str] = []
    max_entries = expected_count + EXTRA_ENTRY_MARGIN
    for lineno, line in enumerate(reply.splitlines(), start=1):
        if not line.strip():
            continue
        m = _ENTRY_RE.match(line)
        if m is None:
            if policy == "strict":
                raise ParseError(f"malformed grounded entry on line {lineno}: {line!r}", reply=reply)
            warnings.append(f"line {lineno}: skipped malformed entry {line.strip()!r}")
            continue
        index = int(m.group(1))
        if entries and index <= entries[-1].index:
            if policy == "strict":
                raise ParseError(
                    f"non-increasing entry index {index} on line {lineno}", reply=reply
                )
            warnings.append(f"line {lineno}: skipped out-of-order index {index}")
            continue
        if len(entries) >= max_entries:
            warnings.append(f"line {lineno}: dropped entry beyond {max_entries}-entry guard")
            continue
        box = sanitize([float(m.group(i)) for i in range(3, 7)], size=image_size)
        entries.append(GroundedEntry(index=index, description=m.group(2), box=box))
    if not entries:
        if policy == "strict":
            raise ParseError("no grounded entries parsed", reply=reply)
        warnings.append("no grounded entries parsed; proceeding with empty context")
    elif len(entries) < expected_count:
        warnings.append(f"parsed {len(entries)} of {expected_count} expected entries")
    return GroundedDescription(entries=tuple(entries), warnings=tuple(warnings))


def serialize_grounded(grounded: GroundedDescription) -> str:
    """One line per entry: ``<n>. <description> [x1, y1, x2, y2]`` at 2 decimals."""
    return "\n".join(
        f"{e.index}. {e.description} {format_box(e.box)}" for e in grounded.entries
    )


def strip_boxes(grounded: GroundedDescription) -> str:
    """The numbered descriptions without any coordinates."""
    return "\n".join(f"{e.index}. {e.description}" for e in grounded.entries)


def render_context_lines(ctx: RecContext) -> str:
    """The context block: grounded entries, then rejected predictions as
    numbered entries continuing the list."""
    lines = []
    if ctx.grounded.entries:
        lines.append(serialize_grounded(ctx.grounded))
    next_index = (ctx.grounded.entries[-1].index + 1) if ctx.grounded.entries else 1
    for offset, (box, caption) in enumerate(ctx.appended):
        lines.append(f"{next_index + offset}. {caption} {format_box(box)} {REJECTED_SUFFIX}")
    return "\n".join(lines)


def assemble_context(ctx: RecContext) -> str:
    """The full box-prediction prompt: context block, blank line, instruction.

    With no grounded entries and no appended pairs this degenerates to the
    bare instruction. Byte-deterministic for identical inputs.
    """
    return prompts.referring_box(render_context_lines(ctx), ctx.expression)


def parse_bbox_reply(reply: str, image_size: ImageSize | None = None) -> NormBox:
    """Decode the first bracketed 4-tuple of numbers in a reply into a box."""
    m = _BOX_RE.search(reply)
    if m is None:
        raise ParseError(f"no bounding box found in reply: {reply!r}", reply=reply)
    return sanitize([float(m.group(i)) for i in range(1, 5)], size=image_size)


def parse_yes_no(reply: str) -> bool:
    """Decode a binary yes/no answer.

    The first alphabetic token decides when it is literally yes/no; otherwise
    the earliest standalone occurrence of either word wins. A reply with
    neither token is a parse error (callers typically treat that as no).
    """
    first = _WORD_RE.search(reply)
    if first is not None:
        token = first.group(0).lower()
        if token == "yes":
            return True
        if token == "no":
            return False
    hits = [
        (m.start(), m.group(0).lower())
        for m in re.finditer(r"\b(yes|no)\b", reply, flags=re.IGNORECASE)
    ]
    if not hits:
        raise ParseError(f"reply contains neither 'yes' nor 'no': {reply!r}", reply=reply)
    return min(hits)[1] == "yes"
