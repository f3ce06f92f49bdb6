"""Prompt template assets and their assembly.

Templates live as UTF-8 text files (one per template name) and use
``{{name}}`` placeholders. Each template declares the exact placeholder set it
may use; a file that references anything else fails at load time.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

from ..errors import MissingBinding, TemplateError

TEMPLATE_DIR = Path(__file__).parent / "templates"
_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")

PLACEHOLDERS: dict[str, frozenset[str]] = {
    "exploration": frozenset({"question", "options_block"}),
    "guided_exploration": frozenset({"memory_context", "question", "options_block"}),
    "knowledge_extraction": frozenset({"round", "question", "options_block", "prev_memory", "trace_digests"}),
    "tool_schema": frozenset(),
}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def __post_init__(self):
        if self.name not in PLACEHOLDERS:
            raise TemplateError(f"unknown template name {self.name!r}")
        used = set(_PLACEHOLDER.findall(self.text))
        declared = PLACEHOLDERS[self.name]
        if used - declared:
            raise TemplateError(f"{self.name}: undeclared placeholders {sorted(used - declared)}")
        if declared - used:
            raise TemplateError(f"{self.name}: placeholders never referenced {sorted(declared - used)}")

    @property
    def placeholders(self) -> frozenset[str]:
        return PLACEHOLDERS[self.name]

    @property
    def version(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PromptSet:
    exploration: PromptTemplate
    guided_exploration: PromptTemplate
    knowledge_extraction: PromptTemplate
    tool_schema: PromptTemplate

    def __getitem__(self, name: str) -> PromptTemplate:
        return getattr(self, name)

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(PLACEHOLDERS):
            h.update(name.encode())
            h.update(b"\0")
            h.update(self[name].text.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()[:16]

    def tools(self) -> list[dict]:
        return [json.loads(self.tool_schema.text)]


def load_templates(directory: str | Path | None = None) -> PromptSet:
    directory = Path(directory) if directory is not None else TEMPLATE_DIR
    loaded = {}
    for name in PLACEHOLDERS:
        path = directory / f"{name}.txt"
        if not path.is_file():
            raise TemplateError(f"missing template file {path}")
        loaded[name] = PromptTemplate(name, path.read_text(encoding="utf-8"))
    try:
        json.loads(loaded["tool_schema"].text)
    except json.JSONDecodeError as exc:
        raise TemplateError(f"tool_schema is not valid JSON: {exc}") from exc
    return PromptSet(**loaded)


@lru_cache(maxsize=None)
def default_templates() -> PromptSet:
    return load_templates()


def assemble(template: PromptTemplate, bindings: Mapping[str, str], *, exploration: PromptTemplate | None = None) -> str:
    """Substitute every placeholder of ``template`` from ``bindings``.

    A guided template bound to an empty memory context renders as the plain
    exploration prompt (pass ``exploration`` to override which one).

    Raises:
        MissingBinding: listing every placeholder without a binding.
    """
    missing = template.placeholders - set(bindings)
    if missing:
        raise MissingBinding(template.name, missing)
    if template.name == "guided_exploration" and not str(bindings["memory_context"]).strip():
        base = exploration or default_templates().exploration
        return assemble(base, {k: v for k, v in bindings.items() if k != "memory_context"})
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template.text).rstrip() + "\n"


def options_block(options: Sequence[tuple[str, str]] | None) -> str:
    if not options:
        return ""
    return "Options:\n" + "\n".join(f"{letter}. {text}" for letter, text in options)
