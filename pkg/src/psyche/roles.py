"""The three roles and their single-stage operations.

The pipeline splits reasoning across three roles, each talking to the backend
through its own prompts:

* **id**: samples several independent reasoning paths for a question and
  votes over their answers (intuition).
* **superego**: offline, turns wrong answers into error patterns and distills
  them into a reusable rule list; online, selects the rules that matter for a
  question and rewrites them as key points (oversight).
* **ego**: plans a step-by-step script under those key points, executes it,
  and commits to a final answer (deliberation).

Every operation here performs exactly the calls it documents and appends them
to the caller's ledger. Model output is parsed strictly: numbered lists must
be numbered, scripts must be contiguous from step 1, and sizing contracts
(``m`` patterns, ``n`` rules) get one corrective re-prompt before the
operation gives up.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .answers import TASK_KINDS, extract_answer, majority_vote
from .backend import Backend, CallLedger, ChatMessage, ChatRequest, sample_completions
from .errors import (
    AnswerMissingError,
    ExecutionParseError,
    ExtractionError,
    InputError,
    KeyPointParseError,
    PartialAttemptsError,
    PatternParseError,
    PreconditionError,
    RuleParseError,
    SchemaError,
    ScriptParseError,
    SizingError,
)
from .templates import TemplateLibrary
from .util import atomic_write_text, canonical_json, read_jsonl, sha256_hex

UNANSWERED = "[unanswered]"

_NUMBERED_RE = re.compile(r"^\s*(\d+)[.)]\s+(.+?)\s*$")


@dataclass(frozen=True)
class Question:
    """One problem to solve. ``gold`` may be empty for pure inference."""

    qid: str
    text: str
    gold: str = ""
    task_kind: str = "textual"

    def __post_init__(self) -> None:
        if not self.qid:
            raise PreconditionError("question needs a qid")
        if not self.text.strip():
            raise PreconditionError(f"question {self.qid!r} has no text")
        if self.task_kind not in TASK_KINDS:
            raise PreconditionError(
                f"question {self.qid!r} has unknown task_kind {self.task_kind!r}"
            )


@dataclass(frozen=True)
class Example:
    """A worked exemplar shown to the id role."""

    question: str
    answer: str
    reasoning: str = ""


@dataclass(frozen=True)
class ExampleSet:
    examples: tuple[Example, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "examples", tuple(self.examples))

    def render(self) -> str:
        blocks = []
        for ex in self.examples:
            lines = [f"Question: {ex.question}"]
            if ex.reasoning:
                lines.append(ex.reasoning)
            lines.append(f"Final answer: {ex.answer}")
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) if blocks else "(no examples)"


@dataclass(frozen=True)
class ReasoningPath:
    """One sampled solution. ``extracted`` is False when no answer was found."""

    text: str
    answer: str
    extracted: bool = True


@dataclass(frozen=True)
class AttemptSet:
    """All sampled paths for one question."""

    question: Question
    paths: tuple[ReasoningPath, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "paths", tuple(self.paths))

    @property
    def answers(self) -> list[str]:
        """Answers that actually extracted; the voting population."""
        return [p.answer for p in self.paths if p.extracted]

    def majority(self) -> tuple[str, int]:
        return majority_vote(self.answers)

    def render(self) -> str:
        blocks = [
            f"Attempt {i}:\n{path.text.strip()}" for i, path in enumerate(self.paths, 1)
        ]
        return "\n\n".join(blocks)


@dataclass(frozen=True)
class ContrastPair:
    """A question the id role got wrong: gold answer vs. wrong prediction."""

    question: Question
    wrong: str

    def __post_init__(self) -> None:
        if not self.question.gold:
            raise PreconditionError(
                f"contrast pair for {self.question.qid!r} needs a gold answer"
            )


@dataclass(frozen=True)
class PatternSet:
    """Error patterns extracted from one contrast pair."""

    question_id: str
    patterns: tuple[str, ...]
    raw: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "patterns", tuple(self.patterns))


@dataclass(frozen=True)
class RuleSet:
    """The distilled rule list the superego consults at inference time."""

    rules: tuple[str, ...]
    raw: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))

    def render(self) -> str:
        return numbered_block(self.rules) if self.rules else "(none)"

    def digest(self) -> str:
        return sha256_hex(canonical_json(list(self.rules)))


@dataclass(frozen=True)
class KeyPoints:
    """Question-specific guidance distilled from the rules.

    ``low_confidence`` marks output that carried no numbering and was
    salvaged line-by-line instead of parsed properly.
    """

    points: tuple[str, ...]
    low_confidence: bool = False
    raw: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))

    def render(self) -> str:
        return numbered_block(self.points)


@dataclass(frozen=True)
class Script:
    """The ego's solution plan: contiguous steps 1..k."""

    steps: tuple[str, ...]
    raw: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    def render(self) -> str:
        return numbered_block(self.steps)


@dataclass(frozen=True)
class ScriptExecution:
    """Per-step results, index-aligned with the script that produced them."""

    results: tuple[str, ...]
    raw: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "results", tuple(self.results))

    def render(self) -> str:
        return numbered_block(self.results)


@dataclass(frozen=True)
class FinalAnswer:
    """What the pipeline commits to for one question."""

    answer: str
    raw: str = field(default="", compare=False)
    consistency: int | None = None
    fallback_used: bool = False


def numbered_block(items: Sequence[str]) -> str:
    return "\n".join(f"{i}. {item}" for i, item in enumerate(items, 1))


def parse_numbered(text: str) -> list[tuple[int, str]]:
    """All ``N. item`` / ``N) item`` lines, in order of appearance."""
    out: list[tuple[int, str]] = []
    for line in text.splitlines():
        match = _NUMBERED_RE.match(line)
        if match:
            out.append((int(match.group(1)), match.group(2)))
    return out


def _items(text: str) -> list[str]:
    return [item for _, item in parse_numbered(text)]


def _user_request(
    prompt: str,
    *,
    temperature: float = 0.0,
    max_tokens: int = 1024,
    sample_count: int = 1,
) -> ChatRequest:
    return ChatRequest(
        messages=(ChatMessage("user", prompt),),
        temperature=temperature,
        max_tokens=max_tokens,
        sample_count=sample_count,
    )


def generate_attempts(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    examples: ExampleSet,
    *,
    l: int = 5,
    temperature: float = 0.7,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> AttemptSet:
    """id: sample ``l`` reasoning paths in one batched call (Eq-1 behaviour).

    Paths whose answer cannot be extracted stay in the set, flagged, and are
    excluded from voting. If every path fails extraction there is nothing to
    vote over and the operation fails.
    """
    if l < 1:
        raise PreconditionError(f"l must be positive: {l}")
    prompt = templates.get("id.attempts").render(
        examples=examples.render(), question=question.text
    )
    request = _user_request(
        prompt, temperature=temperature, max_tokens=max_tokens, sample_count=l
    )
    completions = sample_completions(backend, request, stage="id.attempts", ledger=ledger)
    paths = []
    for text in completions:
        try:
            answer = extract_answer(text, question.task_kind)
            paths.append(ReasoningPath(text=text, answer=answer, extracted=True))
        except ExtractionError:
            paths.append(ReasoningPath(text=text, answer="", extracted=False))
    attempt_set = AttemptSet(question=question, paths=tuple(paths))
    if not attempt_set.answers:
        raise PartialAttemptsError(
            f"no attempt for {question.qid!r} produced an extractable answer",
            paths=paths,
        )
    return attempt_set


def _sized_list_call(
    backend: Backend,
    prompt: str,
    *,
    stage: str,
    target: int,
    label: str,
    parse_error: type[Exception],
    max_tokens: int,
    ledger: CallLedger | None,
) -> tuple[list[str], str]:
    """One call that must yield exactly ``target`` numbered items.

    A wrong-sized reply earns one corrective re-prompt that shows the model
    its own output. After that, surplus items are truncated and shortfalls
    are errors.
    """
    request = _user_request(prompt, max_tokens=max_tokens)
    first = backend.complete(request, stage=stage, ledger=ledger).completions[0]
    items = _items(first)
    if len(items) == target:
        return items, first
    correction = (
        f"Your reply contained {len(items)} numbered {label}. "
        f"Reply again with exactly {target} {label}, numbered 1 to {target}."
    )
    retry_request = ChatRequest(
        messages=(
            ChatMessage("user", prompt),
            ChatMessage("assistant", first),
            ChatMessage("user", correction),
        ),
        temperature=0.0,
        max_tokens=max_tokens,
    )
    second = backend.complete(retry_request, stage=stage, ledger=ledger).completions[0]
    items = _items(second)
    if not items:
        raise parse_error(f"no numbered {label} found after re-prompt", second)
    if len(items) < target:
        raise SizingError(
            f"asked for {target} {label}, got {len(items)} even after a re-prompt"
        )
    return items[:target], second


def extract_patterns(
    backend: Backend,
    templates: TemplateLibrary,
    pair: ContrastPair,
    *,
    m: int = 3,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> PatternSet:
    """superego: describe one wrong answer as exactly ``m`` error patterns."""
    if m < 1:
        raise PreconditionError(f"m must be positive: {m}")
    prompt = templates.get("superego.pattern").render(
        question=pair.question.text, gold=pair.question.gold, wrong=pair.wrong, count=m
    )
    items, raw = _sized_list_call(
        backend,
        prompt,
        stage="superego.pattern",
        target=m,
        label="patterns",
        parse_error=PatternParseError,
        max_tokens=max_tokens,
        ledger=ledger,
    )
    return PatternSet(question_id=pair.question.qid, patterns=tuple(items), raw=raw)


def summarize_rules(
    backend: Backend,
    templates: TemplateLibrary,
    pattern_sets: Sequence[PatternSet],
    *,
    n: int = 10,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> RuleSet:
    """superego: distill all collected patterns into exactly ``n`` rules."""
    if n < 1:
        raise PreconditionError(f"n must be positive: {n}")
    if not pattern_sets:
        raise PreconditionError("no pattern sets to summarize")
    pooled = [p for ps in pattern_sets for p in ps.patterns]
    prompt = templates.get("superego.rules").render(
        patterns=numbered_block(pooled), count=n
    )
    items, raw = _sized_list_call(
        backend,
        prompt,
        stage="superego.rules",
        target=n,
        label="rules",
        parse_error=RuleParseError,
        max_tokens=max_tokens,
        ledger=ledger,
    )
    return RuleSet(rules=tuple(items), raw=raw)


def generate_key_points(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    rules: RuleSet,
    *,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> KeyPoints:
    """superego: turn the rule list into key points for this question.

    Exactly one call. Unnumbered output is salvaged line-by-line and marked
    ``low_confidence`` rather than re-prompted, because key points have no
    fixed cardinality to enforce.
    """
    prompt = templates.get("superego.keypoints").render(
        rules=rules.render(), question=question.text
    )
    request = _user_request(prompt, max_tokens=max_tokens)
    raw = backend.complete(request, stage="superego.keypoints", ledger=ledger).completions[0]
    items = _items(raw)
    if items:
        return KeyPoints(points=tuple(items), raw=raw)
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    if not lines:
        raise KeyPointParseError("key point reply was empty", raw)
    return KeyPoints(points=tuple(lines), low_confidence=True, raw=raw)


def generate_script(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    key_points: KeyPoints,
    *,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> Script:
    """ego: plan the solution as steps numbered contiguously from 1."""
    prompt = templates.get("ego.script").render(
        question=question.text, key_points=key_points.render()
    )
    request = _user_request(prompt, max_tokens=max_tokens)
    raw = backend.complete(request, stage="ego.script", ledger=ledger).completions[0]
    numbered = parse_numbered(raw)
    if not numbered:
        raise ScriptParseError("script reply had no numbered steps", raw)
    numbers = [n for n, _ in numbered]
    if numbers != list(range(1, len(numbers) + 1)):
        raise ScriptParseError(
            f"script steps must be contiguous from 1, got {numbers}", raw
        )
    return Script(steps=tuple(item for _, item in numbered), raw=raw)


def execute_script(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    script: Script,
    *,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> ScriptExecution:
    """ego: run the script; results align 1:1 with script steps.

    Steps the model skipped are padded with a placeholder so downstream code
    can always index execution by step; surplus step numbers are dropped.
    """
    prompt = templates.get("ego.execute").render(
        question=question.text, script=script.render()
    )
    request = _user_request(prompt, max_tokens=max_tokens)
    raw = backend.complete(request, stage="ego.execute", ledger=ledger).completions[0]
    numbered = parse_numbered(raw)
    if not numbered:
        raise ExecutionParseError("execution reply had no numbered results", raw)
    by_number: dict[int, str] = {}
    for number, item in numbered:
        by_number.setdefault(number, item)
    results = tuple(
        by_number.get(i, UNANSWERED) for i in range(1, len(script.steps) + 1)
    )
    return ScriptExecution(results=results, raw=raw)


def answer_question(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    key_points: KeyPoints,
    script: Script | None,
    execution: ScriptExecution | None,
    *,
    max_tokens: int = 256,
    ledger: CallLedger | None = None,
) -> FinalAnswer:
    """ego: commit to an answer given everything produced so far.

    ``script`` and ``execution`` may be None when the ego stages were
    disabled; the prompt says so instead of showing empty sections.
    """
    prompt = templates.get("ego.answer").render(
        question=question.text,
        key_points=key_points.render(),
        script=script.render() if script else "(not generated)",
        execution=execution.render() if execution else "(not generated)",
    )
    request = _user_request(prompt, max_tokens=max_tokens)
    raw = backend.complete(request, stage="ego.answer", ledger=ledger).completions[0]
    try:
        answer = extract_answer(raw, question.task_kind)
    except ExtractionError as exc:
        raise AnswerMissingError(
            f"answer stage reply for {question.qid!r} had no extractable answer", raw
        ) from exc
    return FinalAnswer(answer=answer, raw=raw)


def save_rules(rules: RuleSet, path: str | Path) -> None:
    payload = {"version": 1, "rules": list(rules.rules)}
    atomic_write_text(Path(path), canonical_json(payload) + "\n")


def load_rules(path: str | Path) -> RuleSet:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read rules {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != 1:
        raise SchemaError(f"rules file {path} is not a version-1 rules document")
    rules = payload.get("rules")
    if not isinstance(rules, list) or not all(isinstance(r, str) for r in rules):
        raise SchemaError(f"rules file {path} must hold a list of strings")
    return RuleSet(rules=tuple(rules))


def load_questions(path: str | Path) -> list[Question]:
    """Questions from JSONL rows: qid, text, optional gold and task_kind."""
    questions = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            questions.append(
                Question(
                    qid=str(row["qid"]),
                    text=row["text"],
                    gold=row.get("gold", ""),
                    task_kind=row.get("task_kind", "textual"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad question row {i} in {path}: {exc}") from exc
    if not questions:
        raise InputError(f"no questions in {path}")
    return questions


def load_examples(path: str | Path) -> ExampleSet:
    """Few-shot exemplars from JSONL rows: question, answer, optional reasoning."""
    examples = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            examples.append(
                Example(
                    question=row["question"],
                    answer=row["answer"],
                    reasoning=row.get("reasoning", ""),
                )
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad example row {i} in {path}: {exc}") from exc
    return ExampleSet(examples=tuple(examples))
