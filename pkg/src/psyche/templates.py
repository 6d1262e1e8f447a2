"""Prompt templates, one per pipeline stage.

Templates are plain text with ``{name}`` placeholders. Rendering is total:
every placeholder must be supplied and every supplied value must be used.
Malformed markers (any brace that is neither an escape nor a well-formed
placeholder) are rejected when the template is constructed, so a typo like
``{Question}`` fails at load time, not after a model call. Literal braces are
written as ``{{`` and ``}}``; substituted values pass through verbatim.

A default template ships for every stage; a directory of ``.txt`` files can
override any subset (file ``superego_pattern.txt`` overrides stage
``superego.pattern``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import TemplateError
from .util import canonical_json, sha256_hex

STAGES = (
    "id.attempts",
    "superego.pattern",
    "superego.rules",
    "superego.keypoints",
    "ego.script",
    "ego.execute",
    "ego.answer",
    "merged",
)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")
_OPEN, _CLOSE = "\x00OPEN\x00", "\x00CLOSE\x00"


def _shield(text: str) -> str:
    return text.replace("{{", _OPEN).replace("}}", _CLOSE)


def _unshield(text: str) -> str:
    return text.replace(_OPEN, "{").replace(_CLOSE, "}")


@dataclass(frozen=True)
class PromptTemplate:
    """The prompt text for one stage."""

    stage: str
    text: str

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise TemplateError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        residue = _PLACEHOLDER_RE.sub("", _shield(self.text))
        if "{" in residue or "}" in residue:
            raise TemplateError(
                f"stage {self.stage!r} template has a malformed marker; "
                "write literal braces as {{ and }}"
            )

    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(_shield(self.text)))

    def render(self, **values: object) -> str:
        """Fill every placeholder; reject missing or surplus values."""
        wanted = self.placeholders()
        given = set(values)
        missing = wanted - given
        if missing:
            raise TemplateError(
                f"stage {self.stage!r} template missing values for {sorted(missing)}"
            )
        surplus = given - wanted
        if surplus:
            raise TemplateError(
                f"stage {self.stage!r} template got unused values {sorted(surplus)}"
            )
        shielded = _shield(self.text)
        rendered = _PLACEHOLDER_RE.sub(lambda m: str(values[m.group(1)]), shielded)
        return _unshield(rendered)

    def digest(self) -> str:
        return sha256_hex(self.text)


def _stage_for_filename(stem: str) -> str:
    return stem.replace("_", ".", 1)


class TemplateLibrary:
    """All stage templates for a run, resolvable by stage label."""

    def __init__(self, templates: Mapping[str, PromptTemplate]) -> None:
        self._templates = dict(templates)
        for stage, template in self._templates.items():
            if template.stage != stage:
                raise TemplateError(
                    f"library key {stage!r} holds template for {template.stage!r}"
                )

    def get(self, stage: str) -> PromptTemplate:
        try:
            return self._templates[stage]
        except KeyError:
            raise TemplateError(f"no template for stage {stage!r}") from None

    @property
    def stages(self) -> tuple[str, ...]:
        return tuple(sorted(self._templates))

    def digest(self) -> str:
        payload = {stage: t.text for stage, t in self._templates.items()}
        return sha256_hex(canonical_json(payload))

    @classmethod
    def default(cls) -> "TemplateLibrary":
        """The templates packaged with the distribution, one per stage."""
        root = resources.files("psyche").joinpath("prompts")
        templates: dict[str, PromptTemplate] = {}
        for stage in STAGES:
            name = stage.replace(".", "_") + ".txt"
            text = root.joinpath(name).read_text(encoding="utf-8")
            templates[stage] = PromptTemplate(stage=stage, text=text)
        return cls(templates)

    @classmethod
    def from_dir(cls, path: str | Path) -> "TemplateLibrary":
        """Defaults overlaid with any ``<stage>.txt`` files found in ``path``.

        Filenames use underscores where stage labels use dots. Files that do
        not name a known stage are an error, not a silent skip.
        """
        directory = Path(path)
        if not directory.is_dir():
            raise TemplateError(f"not a template directory: {directory}")
        merged = dict(cls.default()._templates)
        for file in sorted(directory.glob("*.txt")):
            stage = _stage_for_filename(file.stem)
            if stage not in STAGES:
                raise TemplateError(f"{file.name} does not name a stage")
            merged[stage] = PromptTemplate(stage=stage, text=file.read_text(encoding="utf-8"))
        return cls(merged)
