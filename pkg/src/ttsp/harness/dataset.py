"""Line-delimited benchmark datasets.

Each non-blank line is one JSON object::

    {"id": "q1", "image": "imgs/q1.jpg", "question": "What does the sign say?",
     "options": {"A": "STOP", "B": "YIELD"}, "answer": "A", "split": "direct"}

``options`` may also be a list of ``[letter, text]`` pairs or a plain list of
texts (lettered A, B, ...). ``answer`` and ``split`` are optional. Relative
image paths resolve against the dataset file's directory.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from ..core import canonicalize_answer
from ..errors import MissingImage, ParseError
from ..orchestrator import Task
from ..vistool import load_image

_FIELDS = {"id", "image", "question", "options", "answer", "split"}
_FORMATS = {"PNG", "JPEG", "MPO"}


@dataclass(frozen=True)
class TaskInstance:
    id: str
    image: Path
    question: str
    options: tuple[tuple[str, str], ...] | None = None
    answer: str | None = None
    split: str = "all"

    @property
    def letters(self) -> dict[str, str] | None:
        return dict(self.options) if self.options else None

    def gold(self) -> str | None:
        """Canonical gold answer, or None when the instance is unscored."""
        if self.answer is None:
            return None
        return canonicalize_answer(self.answer, self.letters)

    def to_task(self) -> Task:
        return Task(self.id, self.question, load_image(self.image), self.options)


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ParseError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _options(raw) -> tuple[tuple[str, str], ...] | None:
    if raw is None:
        return None
    if isinstance(raw, dict):
        pairs = list(raw.items())
    elif isinstance(raw, list) and all(isinstance(x, str) for x in raw):
        if len(raw) > 26:
            raise ParseError("more than 26 unlettered options")
        pairs = list(zip(string.ascii_uppercase, raw))
    elif isinstance(raw, list):
        pairs = []
        for item in raw:
            if not (isinstance(item, list) and len(item) == 2):
                raise ParseError("options entries must be [letter, text] pairs")
            pairs.append(tuple(item))
    else:
        raise ParseError("options must be an object or a list")
    out = []
    seen = set()
    for letter, text in pairs:
        letter = str(letter).strip().upper()
        if len(letter) != 1 or not letter.isalpha():
            raise ParseError(f"option letter {letter!r} is not a single letter")
        if letter in seen:
            raise ParseError(f"duplicate option letter {letter!r}")
        seen.add(letter)
        out.append((letter, str(text)))
    if not out:
        raise ParseError("options list is empty")
    return tuple(out)


def _check_image(path: Path) -> None:
    try:
        with Image.open(path) as im:
            fmt = im.format
    except (OSError, ValueError) as exc:
        raise MissingImage(path) from exc
    if fmt not in _FORMATS:
        raise MissingImage(path)


def _instance(rec, root: Path) -> TaskInstance:
    if not isinstance(rec, dict):
        raise ParseError("record must be a JSON object")
    unknown = set(rec) - _FIELDS
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}")
    for name in ("id", "image", "question"):
        if not isinstance(rec.get(name), str) or not rec[name].strip():
            raise ParseError(f"field {name!r} must be a non-empty string")
    answer = rec.get("answer")
    if answer is not None and not isinstance(answer, str):
        answer = str(answer)
    image = Path(rec["image"])
    if not image.is_absolute():
        image = root / image
    return TaskInstance(
        id=rec["id"],
        image=image,
        question=rec["question"],
        options=_options(rec.get("options")),
        answer=answer,
        split=str(rec.get("split") or "all"),
    )


def load_dataset(path: str | Path) -> list[TaskInstance]:
    """Parse and validate a dataset file; instances come back in file order.

    Raises:
        ParseError: malformed line (with its 1-based line number).
        MissingImage: an image path does not resolve to a PNG/JPEG file.
    """
    path = Path(path)
    root = path.parent
    out: list[TaskInstance] = []
    ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                inst = _instance(json.loads(line, object_pairs_hook=_reject_duplicates), root)
            except ParseError as exc:
                raise ParseError(str(exc), lineno) from None
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if inst.id in ids:
                raise ParseError(f"duplicate instance id {inst.id!r}", lineno)
            ids.add(inst.id)
            _check_image(inst.image)
            out.append(inst)
    return out


def dataset_hash(instances: list[TaskInstance]) -> str:
    """Content hash over the parsed instances and their image bytes."""
    h = hashlib.sha256()
    for inst in instances:
        h.update(json.dumps([inst.id, inst.question, inst.options, inst.answer, inst.split]).encode())
        h.update(hashlib.sha256(inst.image.read_bytes()).digest())
    return h.hexdigest()
