"""Pipeline orchestration: wire the roles together and account for every call.

Two execution modes share one record schema:

* **standard**: id samples ``l`` paths in one batched call, the superego turns
  the rule list into key points, the ego plans, executes, and answers. Five
  backend calls nominal. Role toggles carve out the ablations (id only; id +
  superego; the full three roles).
* **merged**: a single model does everything in two calls. Call one samples
  the ``l`` candidate solutions; call two emits four labeled sections (key
  points, script, script execution, final answer) in a fixed order.

Self-consistency over the id candidates is computed in both modes. When a
fallback gate is configured and the majority vote count falls strictly below
the threshold, the record is flagged and a handoff file is written for an
external decider; the pipeline still finishes and records its own answer,
which an ingested handoff answer can later replace.
"""

from __future__ import annotations

import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .answers import extract_answer, majority_vote, normalize  # noqa: F401
from .backend import Backend, CallLedger, MockBackend
from .errors import (
    AnswerMissingError,
    InputError,
    MergedParseError,
    PreconditionError,
    PsycheError,
    SchemaError,
    StageFailure,
)
from .roles import (
    AttemptSet,
    ContrastPair,
    ExampleSet,
    FinalAnswer,
    KeyPoints,
    Question,
    RuleSet,
    Script,
    ScriptExecution,
    answer_question,
    execute_script,
    extract_patterns,
    generate_attempts,
    generate_key_points,
    generate_script,
    numbered_block,
    summarize_rules,
)
from .templates import TemplateLibrary
from .util import atomic_write_text, canonical_json, read_jsonl, sha256_hex

RECORD_VERSION = 1
FAILED_ANSWER = "<failed>"

MODES = ("standard", "merged")


@dataclass(frozen=True)
class FallbackConfig:
    """Gate for handing hard questions to an external decider.

    The gate fires when the majority vote count over ``candidates`` sampled
    answers is strictly below ``threshold``.
    """

    candidates: int = 5
    threshold: int = 3
    command: str = ""
    out_dir: str = "fallback"

    def __post_init__(self) -> None:
        if self.candidates < 1:
            raise PreconditionError(f"candidates must be positive: {self.candidates}")
        if not 1 <= self.threshold <= self.candidates:
            raise PreconditionError(
                f"threshold must be in 1..{self.candidates}: {self.threshold}"
            )


def fallback_decision(consistency: int, threshold: int) -> bool:
    """True when the record should be handed off: consistency strictly below."""
    return consistency < threshold


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that shapes one run.

    The role toggles encode the ablations. Constraints: the ego needs the
    superego's key points and the rule list to exist, and rule usage needs the
    superego. Merged mode is the full method distilled into one model, so
    toggles and the fallback gate do not apply there.
    """

    mode: str = "standard"
    l: int = 5
    m: int = 3
    n: int = 10
    temperature: float = 0.7
    max_tokens: int = 1024
    superego_enabled: bool = True
    superego_rules_enabled: bool = True
    ego_enabled: bool = True
    fallback: FallbackConfig | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PreconditionError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("l", "m", "n"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be positive: {getattr(self, name)}")
        if self.superego_rules_enabled and not self.superego_enabled:
            raise PreconditionError("rule usage requires the superego")
        if self.ego_enabled and not (self.superego_enabled and self.superego_rules_enabled):
            raise PreconditionError("the ego requires the superego and the rule list")
        if self.mode == "merged":
            if not (self.superego_enabled and self.superego_rules_enabled and self.ego_enabled):
                raise PreconditionError("merged mode has no role toggles")
            if self.fallback is not None:
                raise PreconditionError("merged mode does not support the fallback gate")
        if self.fallback is not None and self.fallback.candidates != self.l:
            raise PreconditionError(
                f"fallback gate votes over l={self.l} candidates, "
                f"config says {self.fallback.candidates}"
            )

    @classmethod
    def cot_sc(cls, *, l: int = 5, temperature: float = 0.7, **kwargs) -> "PipelineConfig":
        """Self-consistency baseline: id only, answer by majority vote."""
        return cls(
            mode="standard",
            l=l,
            temperature=temperature,
            superego_enabled=False,
            superego_rules_enabled=False,
            ego_enabled=False,
            **kwargs,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.fallback is not None:
            out["fallback"] = asdict(self.fallback)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        data = dict(raw)
        if data.get("fallback") is not None:
            data["fallback"] = FallbackConfig(**data["fallback"])
        return cls(**data)


def nominal_calls(config: PipelineConfig) -> int:
    """Backend calls one clean run costs on a batching backend."""
    if config.mode == "merged":
        return 2
    calls = 1  # the batched id sampling call
    if config.superego_enabled:
        calls += 1  # key points
        calls += 3 if config.ego_enabled else 1  # script+execute+answer, or answer
    return calls


@dataclass
class ReasoningRecord:
    """Everything one question produced, ready for JSONL persistence."""

    qid: str
    question: str
    gold: str
    task_kind: str
    mode: str
    attempts: list[dict]
    attempt_answers: list[str]
    majority_answer: str
    consistency: int
    key_points: list[str] | None
    key_points_low_confidence: bool
    script: list[str] | None
    execution: list[str] | None
    final: dict
    calls: list[dict]
    total_calls: int
    config: dict
    template_digest: str
    rules_digest: str
    fallback_handoff: str = ""
    error: str = ""
    version: int = RECORD_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict) -> "ReasoningRecord":
        if not isinstance(raw, dict):
            raise SchemaError("record must be an object")
        if raw.get("version") != RECORD_VERSION:
            raise SchemaError(
                f"record version {raw.get('version')!r} unsupported "
                f"(expected {RECORD_VERSION})"
            )
        fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - fields
        if unknown:
            raise SchemaError(f"record has unknown fields: {sorted(unknown)}")
        missing = fields - set(raw)
        if missing:
            raise SchemaError(f"record is missing fields: {sorted(missing)}")
        return cls(**raw)

    @property
    def failed(self) -> bool:
        return bool(self.error)

    @property
    def final_answer(self) -> str:
        return self.final["answer"]


def _final_dict(final: FinalAnswer) -> dict:
    return {
        "answer": final.answer,
        "raw": final.raw,
        "consistency": final.consistency,
        "fallback_used": final.fallback_used,
    }


def _calls_list(ledger: CallLedger) -> list[dict]:
    return [
        {"stage": e.stage, "digest": e.digest, "latency": e.latency, "retry": e.retry}
        for e in ledger.entries
    ]


def _attempts_list(attempts: AttemptSet) -> list[dict]:
    return [
        {"text": p.text, "answer": p.answer, "extracted": p.extracted}
        for p in attempts.paths
    ]


class FallbackHook:
    """Writes handoff files and optionally pings an external command.

    The command string may contain ``{handoff}``, replaced by the handoff
    path. It runs without a shell and its exit status is recorded in the
    handoff's sibling log, never raised: a broken hook must not sink the run.
    """

    def __init__(
        self,
        out_dir: str | Path,
        command: str = "",
        runner: Callable[..., object] | None = None,
    ) -> None:
        self.out_dir = Path(out_dir)
        self.command = command
        self._runner = runner if runner is not None else subprocess.run

    def handle(self, record: ReasoningRecord) -> str:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", record.qid)
        path = self.out_dir / f"{safe}.json"
        payload = {
            "qid": record.qid,
            "question": record.question,
            "task_kind": record.task_kind,
            "attempt_answers": record.attempt_answers,
            "majority_answer": record.majority_answer,
            "consistency": record.consistency,
            "pipeline_answer": record.final["answer"],
            "answer": "",
        }
        atomic_write_text(path, canonical_json(payload) + "\n")
        if self.command:
            argv = [
                arg.replace("{handoff}", str(path))
                for arg in shlex.split(self.command)
            ]
            try:
                self._runner(argv, check=False)
            except OSError:
                pass
        return str(path)


def ingest_handoffs(
    records: Sequence[ReasoningRecord], handoff_dir: str | Path
) -> tuple[list[ReasoningRecord], int]:
    """Fold answered handoff files back into their records.

    A handoff answers its record when its ``answer`` field is non-empty; the
    external answer replaces the pipeline's verbatim and the record is marked
    as fallback-answered. Returns the updated records and how many changed.
    """
    import json

    directory = Path(handoff_dir)
    if not directory.is_dir():
        raise InputError(f"not a handoff directory: {directory}")
    answers: dict[str, str] = {}
    for file in sorted(directory.glob("*.json")):
        try:
            payload = json.loads(file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read handoff {file}: {exc}") from exc
        if payload.get("answer"):
            answers[payload["qid"]] = payload["answer"]
    changed = 0
    out = []
    for record in records:
        if record.qid in answers:
            final = dict(record.final)
            final["answer"] = answers[record.qid]
            final["fallback_used"] = True
            record = replace(record, final=final)
            changed += 1
        out.append(record)
    return out, changed


def _apply_fallback(
    record: ReasoningRecord,
    config: PipelineConfig,
    hook: FallbackHook | None,
) -> ReasoningRecord:
    if config.fallback is None:
        return record
    if not fallback_decision(record.consistency, config.fallback.threshold):
        return record
    final = dict(record.final)
    final["fallback_used"] = True
    record = replace(record, final=final)
    if hook is not None:
        record = replace(record, fallback_handoff=hook.handle(record))
    return record


def run_pipeline(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    examples: ExampleSet,
    config: PipelineConfig,
    rules: RuleSet | None = None,
    *,
    fallback_hook: FallbackHook | None = None,
    ledger: CallLedger | None = None,
) -> ReasoningRecord:
    """Run one question through the standard pipeline.

    Stage errors surface as ``StageFailure`` naming the stage that died; the
    ledger passed in (if any) keeps the calls spent before the failure.
    """
    if config.mode != "standard":
        raise PreconditionError(f"run_pipeline handles standard mode, not {config.mode!r}")
    if config.superego_rules_enabled and rules is None:
        raise PreconditionError("config enables rules but none were provided")
    ledger = ledger if ledger is not None else CallLedger()

    def _stage(stage: str, fn: Callable):
        try:
            return fn()
        except PsycheError as exc:
            raise StageFailure(stage, exc) from exc

    attempts = _stage(
        "id.attempts",
        lambda: generate_attempts(
            backend,
            templates,
            question,
            examples,
            l=config.l,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            ledger=ledger,
        ),
    )
    majority_answer, consistency = attempts.majority()

    key_points: KeyPoints | None = None
    script: Script | None = None
    execution: ScriptExecution | None = None
    if config.superego_enabled:
        effective_rules = rules if config.superego_rules_enabled else RuleSet(rules=())
        key_points = _stage(
            "superego.keypoints",
            lambda: generate_key_points(
                backend,
                templates,
                question,
                effective_rules,
                max_tokens=config.max_tokens,
                ledger=ledger,
            ),
        )
        if config.ego_enabled:
            script = _stage(
                "ego.script",
                lambda: generate_script(
                    backend,
                    templates,
                    question,
                    key_points,
                    max_tokens=config.max_tokens,
                    ledger=ledger,
                ),
            )
            execution = _stage(
                "ego.execute",
                lambda: execute_script(
                    backend,
                    templates,
                    question,
                    script,
                    max_tokens=config.max_tokens,
                    ledger=ledger,
                ),
            )
        final = _stage(
            "ego.answer",
            lambda: answer_question(
                backend,
                templates,
                question,
                key_points,
                script,
                execution,
                ledger=ledger,
            ),
        )
        final = replace(final, consistency=consistency)
    else:
        final = FinalAnswer(answer=majority_answer, raw="", consistency=consistency)

    record = ReasoningRecord(
        qid=question.qid,
        question=question.text,
        gold=question.gold,
        task_kind=question.task_kind,
        mode=config.mode,
        attempts=_attempts_list(attempts),
        attempt_answers=attempts.answers,
        majority_answer=majority_answer,
        consistency=consistency,
        key_points=list(key_points.points) if key_points else None,
        key_points_low_confidence=bool(key_points and key_points.low_confidence),
        script=list(script.steps) if script else None,
        execution=list(execution.results) if execution else None,
        final=_final_dict(final),
        calls=_calls_list(ledger),
        total_calls=ledger.total_calls,
        config=config.to_dict(),
        template_digest=templates.digest(),
        rules_digest=rules.digest() if rules else "",
    )
    return _apply_fallback(record, config, fallback_hook)


_MERGED_HEADER_RE = re.compile(
    r"^[ \t]*(key points|script execution|script|final answer)\s*:[ \t]*",
    re.IGNORECASE | re.MULTILINE,
)
MERGED_SECTIONS = ("key points", "script", "script execution", "final answer")


def parse_merged_reply(text: str) -> tuple[list[str], list[str], list[str], str]:
    """Split a merged-mode reply into its four sections, order enforced.

    Returns (key_points, script, execution, final_answer_text) with the
    execution padded or truncated to the script's length.
    """
    from .roles import UNANSWERED, parse_numbered

    found = [(m.group(1).lower(), m.start(), m.end()) for m in _MERGED_HEADER_RE.finditer(text)]
    names = [name for name, _, _ in found]
    if names != list(MERGED_SECTIONS):
        raise MergedParseError(
            f"expected sections {list(MERGED_SECTIONS)} in order, found {names}", text
        )
    bodies: list[str] = []
    for i, (_, _, end) in enumerate(found):
        stop = found[i + 1][1] if i + 1 < len(found) else len(text)
        bodies.append(text[end:stop].strip())
    kp_body, script_body, execution_body, final_body = bodies

    key_points = [item for _, item in parse_numbered(kp_body)]
    if not key_points:
        raise MergedParseError("key points section has no numbered items", text)
    script = [item for _, item in parse_numbered(script_body)]
    if not script:
        raise MergedParseError("script section has no numbered steps", text)
    executed = dict()
    for number, item in parse_numbered(execution_body):
        executed.setdefault(number, item)
    if not executed:
        raise MergedParseError("script execution section has no numbered results", text)
    execution = [executed.get(i, UNANSWERED) for i in range(1, len(script) + 1)]
    if not final_body:
        raise MergedParseError("final answer section is empty", text)
    return key_points, script, execution, final_body.splitlines()[0].strip()


def render_merged_sections(
    key_points: Sequence[str],
    script: Sequence[str],
    execution: Sequence[str],
    answer: str,
) -> str:
    """The canonical four-section body; inverse of :func:`parse_merged_reply`."""
    return (
        "Key points:\n"
        f"{numbered_block(key_points)}\n\n"
        "Script:\n"
        f"{numbered_block(script)}\n\n"
        "Script execution:\n"
        f"{numbered_block(execution)}\n\n"
        f"Final answer: {answer}"
    )


def run_merged(
    backend: Backend,
    templates: TemplateLibrary,
    question: Question,
    examples: ExampleSet,
    config: PipelineConfig,
    *,
    ledger: CallLedger | None = None,
) -> ReasoningRecord:
    """Run one question through the merged two-call pipeline."""
    if config.mode != "merged":
        raise PreconditionError(f"run_merged handles merged mode, not {config.mode!r}")
    ledger = ledger if ledger is not None else CallLedger()

    try:
        attempts = generate_attempts(
            backend,
            templates,
            question,
            examples,
            l=config.l,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            ledger=ledger,
        )
    except PsycheError as exc:
        raise StageFailure("id.attempts", exc) from exc
    majority_answer, consistency = attempts.majority()

    prompt = templates.get("merged").render(
        question=question.text, attempts=attempts.render()
    )
    from .backend import ChatMessage, ChatRequest

    request = ChatRequest(
        messages=(ChatMessage("user", prompt),),
        temperature=0.0,
        max_tokens=config.max_tokens,
    )
    try:
        raw = backend.complete(request, stage="merged", ledger=ledger).completions[0]
        key_points, script, execution, final_text = parse_merged_reply(raw)
        answer = normalize(final_text, question.task_kind)
        if not answer:
            raise AnswerMissingError("merged reply's final answer normalized to nothing", raw)
    except PsycheError as exc:
        raise StageFailure("merged", exc) from exc

    final = FinalAnswer(answer=answer, raw=raw, consistency=consistency)
    return ReasoningRecord(
        qid=question.qid,
        question=question.text,
        gold=question.gold,
        task_kind=question.task_kind,
        mode=config.mode,
        attempts=_attempts_list(attempts),
        attempt_answers=attempts.answers,
        majority_answer=majority_answer,
        consistency=consistency,
        key_points=key_points,
        key_points_low_confidence=False,
        script=script,
        execution=execution,
        final=_final_dict(final),
        calls=_calls_list(ledger),
        total_calls=ledger.total_calls,
        config=config.to_dict(),
        template_digest=templates.digest(),
        rules_digest="",
    )


def _failure_record(
    question: Question,
    config: PipelineConfig,
    templates: TemplateLibrary,
    rules: RuleSet | None,
    ledger: CallLedger,
    error: Exception,
) -> ReasoningRecord:
    return ReasoningRecord(
        qid=question.qid,
        question=question.text,
        gold=question.gold,
        task_kind=question.task_kind,
        mode=config.mode,
        attempts=[],
        attempt_answers=[],
        majority_answer="",
        consistency=0,
        key_points=None,
        key_points_low_confidence=False,
        script=None,
        execution=None,
        final={"answer": FAILED_ANSWER, "raw": "", "consistency": None, "fallback_used": False},
        calls=_calls_list(ledger),
        total_calls=ledger.total_calls,
        config=config.to_dict(),
        template_digest=templates.digest(),
        rules_digest=rules.digest() if rules else "",
        error=f"{type(error).__name__}: {error}",
    )


def run_batch(
    backend: Backend,
    templates: TemplateLibrary,
    questions: Sequence[Question],
    examples: ExampleSet,
    config: PipelineConfig,
    rules: RuleSet | None = None,
    *,
    workers: int = 1,
    fallback_hook: FallbackHook | None = None,
) -> list[ReasoningRecord]:
    """Run many questions, draining failures into per-question error records.

    A question that dies mid-pipeline becomes a record with ``error`` set and
    the calls it spent; it never takes the batch down. A mock backend replays
    fixtures in a fixed order, so it forces sequential execution regardless
    of ``workers``.
    """
    if workers < 1:
        raise PreconditionError(f"workers must be positive: {workers}")
    if isinstance(backend, MockBackend):
        workers = 1

    def run_one(question: Question) -> ReasoningRecord:
        ledger = CallLedger()
        try:
            if config.mode == "merged":
                return run_merged(
                    backend, templates, question, examples, config, ledger=ledger
                )
            return run_pipeline(
                backend,
                templates,
                question,
                examples,
                config,
                rules,
                fallback_hook=fallback_hook,
                ledger=ledger,
            )
        except PsycheError as exc:
            return _failure_record(question, config, templates, rules, ledger, exc)

    if workers == 1:
        return [run_one(q) for q in questions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, questions))


def develop_rules(
    backend: Backend,
    templates: TemplateLibrary,
    questions: Sequence[Question],
    examples: ExampleSet,
    *,
    l: int = 5,
    m: int = 3,
    n: int = 10,
    temperature: float = 0.7,
    max_tokens: int = 1024,
    ledger: CallLedger | None = None,
) -> RuleSet:
    """Offline rule development over a training subset with gold answers.

    For every question the id gets wrong (majority vote vs. gold), the
    superego extracts ``m`` error patterns from the contrast between gold and
    the wrong prediction; one final call distills all patterns into ``n``
    rules. Questions whose attempts all fail extraction are skipped, they
    carry no usable prediction to contrast.
    """
    ledger = ledger if ledger is not None else CallLedger()
    missing_gold = [q.qid for q in questions if not q.gold]
    if missing_gold:
        raise PreconditionError(
            f"rule development needs gold answers; missing for {missing_gold[:5]}"
        )
    pattern_sets = []
    for question in questions:
        try:
            attempts = generate_attempts(
                backend,
                templates,
                question,
                examples,
                l=l,
                temperature=temperature,
                max_tokens=max_tokens,
                ledger=ledger,
            )
        except PsycheError:
            continue
        majority_answer, _ = attempts.majority()
        if majority_answer == normalize(question.gold, question.task_kind):
            continue
        pair = ContrastPair(question=question, wrong=majority_answer)
        pattern_sets.append(
            extract_patterns(
                backend, templates, pair, m=m, max_tokens=max_tokens, ledger=ledger
            )
        )
    if not pattern_sets:
        raise PreconditionError(
            "the id answered every development question correctly; "
            "no errors to extract rules from"
        )
    return summarize_rules(
        backend, templates, pattern_sets, n=n, max_tokens=max_tokens, ledger=ledger
    )


def write_records(path: str | Path, records: Iterable[ReasoningRecord]) -> int:
    """Append-free write: the whole record list as canonical JSONL."""
    lines = [record.to_json() for record in records]
    atomic_write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


def read_records(path: str | Path) -> list[ReasoningRecord]:
    return [ReasoningRecord.from_dict(row) for row in read_jsonl(path)]


@dataclass(frozen=True)
class RunManifest:
    """Fingerprint of a run: what ran, over what, producing how many calls.

    ``run_id`` is derived from the config and input digests only, so two runs
    of the same setup agree on it; timestamps are informational.
    """

    run_id: str
    mode: str
    config: dict
    template_digest: str
    rules_digest: str
    question_count: int
    record_count: int
    failed_count: int
    total_calls: int
    started_at: str
    finished_at: str

    def to_dict(self) -> dict:
        return asdict(self)


def build_manifest(
    config: PipelineConfig,
    templates: TemplateLibrary,
    rules: RuleSet | None,
    questions: Sequence[Question],
    records: Sequence[ReasoningRecord],
    *,
    started_at: str,
    finished_at: str,
) -> RunManifest:
    template_digest = templates.digest()
    rules_digest = rules.digest() if rules else ""
    identity = canonical_json(
        {
            "config": config.to_dict(),
            "templates": template_digest,
            "rules": rules_digest,
            "qids": [q.qid for q in questions],
        }
    )
    return RunManifest(
        run_id=sha256_hex(identity)[:16],
        mode=config.mode,
        config=config.to_dict(),
        template_digest=template_digest,
        rules_digest=rules_digest,
        question_count=len(questions),
        record_count=len(records),
        failed_count=sum(1 for r in records if r.failed),
        total_calls=sum(r.total_calls for r in records),
        started_at=started_at,
        finished_at=finished_at,
    )
