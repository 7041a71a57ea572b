"""Fixed prompt wordings for the four model tasks.

These strings are part of the reproducibility contract: transcripts stamp
``PROMPT_VERSION`` so a recorded run can be replayed bit-exact. Change a
wording, bump the version.
"""

from __future__ import annotations

PROMPT_VERSION = "captionchain-prompts/1"

_BOX_FORMAT = (
    "[x1, y1, x2, y2] where (x1, y1) is the top-left corner, (x2, y2) is the "
    "bottom-right corner, and every value is a fraction of the image size between 0 and 1"
)


def grounded_scan(n_objects: int, expression: str | None = None) -> str:
    """Prompt asking for a numbered list of object descriptions with boxes."""
    lines = [
        f"Identify the {n_objects} most prominent objects in this image.",
        "Reply with a numbered list, one object per line, each in the exact format:",
        "<number>. <short description> [x1, y1, x2, y2]",
        f"Bounding boxes use normalized coordinates {_BOX_FORMAT}.",
    ]
    if expression is not None:
        lines.insert(1, f'Prioritize objects that could relate to: "{expression}".')
    return "\n".join(lines)


def referring_box(context_block: str, expression: str) -> str:
    """Prompt asking for the single box of the referred object, with optional context."""
    instruction = (
        f'Locate the object referred to by: "{expression}".\n'
        f"Reply with exactly one bounding box in the format {_BOX_FORMAT}."
    )
    if context_block:
        return f"{context_block}\n\n{instruction}"
    return instruction


def region_match(expression: str) -> str:
    """Yes/no question asking whether the shown region matches the expression."""
    return (
        f'Does this image region show the object described by: "{expression}"?\n'
        "Answer with a single word: yes or no."
    )


def region_caption() -> str:
    """Prompt asking for a short caption of the shown region."""
    return "Describe the main object shown in this image in one short phrase."
