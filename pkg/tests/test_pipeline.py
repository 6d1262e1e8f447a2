"""Pipeline orchestration: call budgets, ablations, fallback, merged mode, batches."""

from __future__ import annotations

import json

import pytest

from psyche.backend import CallLedger, MockBackend
from psyche.errors import (
    MergedParseError,
    PreconditionError,
    SchemaError,
    StageFailure,
)
from psyche.pipeline import (
    FAILED_ANSWER,
    FallbackConfig,
    FallbackHook,
    PipelineConfig,
    ReasoningRecord,
    build_manifest,
    develop_rules,
    fallback_decision,
    ingest_handoffs,
    nominal_calls,
    parse_merged_reply,
    read_records,
    render_merged_sections,
    run_batch,
    run_merged,
    run_pipeline,
    write_records,
)
from psyche.roles import Example, ExampleSet, Question, RuleSet
from psyche.templates import TemplateLibrary

TEMPLATES = TemplateLibrary.default()
Q = Question(qid="q1", text="What is 2 + 2?", gold="4", task_kind="math")
EXAMPLES = ExampleSet(
    examples=(Example(question="What is 1 + 1?", answer="2", reasoning="1 + 1 = 2."),)
)
RULES = RuleSet(rules=tuple(f"rule {i}" for i in range(1, 11)))


def _attempts(*answers: str) -> list[str]:
    return [f"Thinking it through. Final answer: {a}" for a in answers]


def _standard_fixtures(final: str = "Final answer: 4", answers=("4", "4", "4", "5", "5")):
    return [
        ("id.attempts", _attempts(*answers)),
        ("superego.keypoints", ["1. mind the operator\n2. check the sum"]),
        ("ego.script", ["1. add the numbers\n2. report the total"]),
        ("ego.execute", ["1. 2 + 2 = 4\n2. total is 4"]),
        ("ego.answer", [final]),
    ]


def test_full_standard_run_costs_five_calls():
    backend = MockBackend(_standard_fixtures())
    config = PipelineConfig()
    record = run_pipeline(backend, TEMPLATES, Q, EXAMPLES, config, RULES)
    assert record.total_calls == 5 == nominal_calls(config)
    assert record.final["answer"] == "4"
    assert record.consistency == 3
    assert record.final["consistency"] == 3
    assert record.majority_answer == "4"
    assert record.key_points == ["mind the operator", "check the sum"]
    assert record.script == ["add the numbers", "report the total"]
    assert record.execution == ["2 + 2 = 4", "total is 4"]
    assert [c["stage"] for c in record.calls] == [
        "id.attempts",
        "superego.keypoints",
        "ego.script",
        "ego.execute",
        "ego.answer",
    ]
    assert not record.failed
    backend.assert_exhausted()


def test_nominal_calls_table():
    assert nominal_calls(PipelineConfig()) == 5
    assert nominal_calls(PipelineConfig(ego_enabled=False)) == 3
    assert (
        nominal_calls(
            PipelineConfig(superego_rules_enabled=False, ego_enabled=False)
        )
        == 3
    )
    assert nominal_calls(PipelineConfig.cot_sc()) == 1
    assert nominal_calls(PipelineConfig(mode="merged")) == 2


def test_cot_sc_answers_by_majority():
    backend = MockBackend([("id.attempts", _attempts("4", "5", "4", "6", "4"))])
    config = PipelineConfig.cot_sc()
    record = run_pipeline(backend, TEMPLATES, Q, EXAMPLES, config)
    assert record.total_calls == 1
    assert record.final["answer"] == "4"
    assert record.consistency == 3
    assert record.key_points is None
    assert record.script is None


def test_ablation_without_ego_costs_three_calls():
    backend = MockBackend(
        [
            ("id.attempts", _attempts("4", "4", "5")),
            ("superego.keypoints", ["1. check the operator"]),
            ("ego.answer", ["Final answer: 4"]),
        ]
    )
    config = PipelineConfig(l=3, ego_enabled=False)
    record = run_pipeline(backend, TEMPLATES, Q, EXAMPLES, config, RULES)
    assert record.total_calls == 3
    assert record.script is None
    assert record.execution is None
    assert record.key_points == ["check the operator"]


def test_ablation_without_rules_runs_superego_bare():
    backend = MockBackend(
        [
            ("id.attempts", _attempts("4", "4", "5")),
            ("superego.keypoints", ["1. check the operator"]),
            ("ego.answer", ["Final answer: 4"]),
        ]
    )
    config = PipelineConfig(l=3, superego_rules_enabled=False, ego_enabled=False)
    record = run_pipeline(backend, TEMPLATES, Q, EXAMPLES, config, rules=None)
    assert record.total_calls == 3
    assert record.rules_digest == ""


def test_config_constraints():
    with pytest.raises(PreconditionError):
        PipelineConfig(superego_enabled=False, superego_rules_enabled=True)
    with pytest.raises(PreconditionError):
        PipelineConfig(superego_enabled=False, superego_rules_enabled=False, ego_enabled=True)
    with pytest.raises(PreconditionError):
        PipelineConfig(superego_rules_enabled=False, ego_enabled=True)
    with pytest.raises(PreconditionError):
        PipelineConfig(mode="merged", ego_enabled=False)
    with pytest.raises(PreconditionError):
        PipelineConfig(mode="merged", fallback=FallbackConfig())
    with pytest.raises(PreconditionError):
        PipelineConfig(l=3, fallback=FallbackConfig(candidates=5))
    with pytest.raises(PreconditionError):
        PipelineConfig(mode="sideways")
    with pytest.raises(PreconditionError):
        FallbackConfig(candidates=5, threshold=6)


def test_run_pipeline_requires_rules_when_enabled():
    backend = MockBackend([])
    with pytest.raises(PreconditionError):
        run_pipeline(backend, TEMPLATES, Q, EXAMPLES, PipelineConfig(), rules=None)


def test_stage_failure_names_the_stage():
    backend = MockBackend([("id.attempts", _attempts("4", "4", "4", "4", "4"))])
    with pytest.raises(StageFailure) as exc:
        run_pipeline(backend, TEMPLATES, Q, EXAMPLES, PipelineConfig(), RULES)
    assert exc.value.stage == "superego.keypoints"


def test_fallback_decision_is_strictly_below():
    assert [fallback_decision(c, 3) for c in (1, 2, 3, 4, 5)] == [
        True,
        True,
        False,
        False,
        False,
    ]


def test_fallback_flags_and_writes_handoff(tmp_path):
    backend = MockBackend(_standard_fixtures(answers=("4", "4", "5", "6", "7")))
    config = PipelineConfig(fallback=FallbackConfig(out_dir=str(tmp_path)))
    hook = FallbackHook(tmp_path)
    record = run_pipeline(
        backend, TEMPLATES, Q, EXAMPLES, config, RULES, fallback_hook=hook
    )
    assert record.consistency == 2
    assert record.final["fallback_used"]
    assert record.fallback_handoff
    payload = json.loads((tmp_path / "q1.json").read_text(encoding="utf-8"))
    assert payload["qid"] == "q1"
    assert payload["consistency"] == 2
    assert payload["pipeline_answer"] == "4"
    assert payload["answer"] == ""
    # the pipeline still ran to completion and paid full price
    assert record.total_calls == 5


def test_fallback_quiet_when_consistent(tmp_path):
    backend = MockBackend(_standard_fixtures())
    config = PipelineConfig(fallback=FallbackConfig(out_dir=str(tmp_path)))
    hook = FallbackHook(tmp_path)
    record = run_pipeline(
        backend, TEMPLATES, Q, EXAMPLES, config, RULES, fallback_hook=hook
    )
    assert record.consistency == 3
    assert not record.final["fallback_used"]
    assert record.fallback_handoff == ""
    assert not list(tmp_path.glob("*.json"))


def test_fallback_hook_runs_command(tmp_path):
    calls = []
    hook = FallbackHook(tmp_path, command="notify --path {handoff}", runner=lambda argv, check: calls.append(argv))
    backend = MockBackend(_standard_fixtures(answers=("4", "5", "6", "7", "8")))
    config = PipelineConfig(fallback=FallbackConfig(out_dir=str(tmp_path)))
    run_pipeline(backend, TEMPLATES, Q, EXAMPLES, config, RULES, fallback_hook=hook)
    assert calls == [["notify", "--path", str(tmp_path / "q1.json")]]


def test_ingest_handoffs_replaces_answer_verbatim(tmp_path):
    backend = MockBackend(_standard_fixtures(answers=("4", "5", "6", "7", "8")))
    config = PipelineConfig(fallback=FallbackConfig(out_dir=str(tmp_path)))
    hook = FallbackHook(tmp_path)
    record = run_pipeline(
        backend, TEMPLATES, Q, EXAMPLES, config, RULES, fallback_hook=hook
    )
    handoff = tmp_path / "q1.json"
    payload = json.loads(handoff.read_text(encoding="utf-8"))
    payload["answer"] = "The Answer Is 4"
    handoff.write_text(json.dumps(payload), encoding="utf-8")
    updated, changed = ingest_handoffs([record], tmp_path)
    assert changed == 1
    assert updated[0].final["answer"] == "The Answer Is 4"
    assert updated[0].final["fallback_used"]


def test_ingest_ignores_unanswered_handoffs(tmp_path):
    backend = MockBackend(_standard_fixtures(answers=("4", "5", "6", "7", "8")))
    config = PipelineConfig(fallback=FallbackConfig(out_dir=str(tmp_path)))
    hook = FallbackHook(tmp_path)
    record = run_pipeline(
        backend, TEMPLATES, Q, EXAMPLES, config, RULES, fallback_hook=hook
    )
    updated, changed = ingest_handoffs([record], tmp_path)
    assert changed == 0
    assert updated[0].final["answer"] == record.final["answer"]


MERGED_REPLY = """Key points:
1. mind the operator
2. check the sum

Script:
1. add the numbers
2. report the total

Script execution:
1. 2 + 2 = 4
2. total is 4

Final answer: 4
"""


def test_run_merged_costs_two_calls():
    backend = MockBackend(
        [
            ("id.attempts", _attempts("4", "4", "4", "5", "5")),
            ("merged", [MERGED_REPLY]),
        ]
    )
    config = PipelineConfig(mode="merged")
    record = run_merged(backend, TEMPLATES, Q, EXAMPLES, config)
    assert record.total_calls == 2 == nominal_calls(config)
    assert [c["stage"] for c in record.calls] == ["id.attempts", "merged"]
    assert record.final["answer"] == "4"
    assert record.consistency == 3
    assert record.key_points == ["mind the operator", "check the sum"]
    assert record.script == ["add the numbers", "report the total"]
    assert record.execution == ["2 + 2 = 4", "total is 4"]
    backend.assert_exhausted()


def test_parse_merged_reply_sections():
    kp, script, execution, final = parse_merged_reply(MERGED_REPLY)
    assert kp == ["mind the operator", "check the sum"]
    assert script == ["add the numbers", "report the total"]
    assert execution == ["2 + 2 = 4", "total is 4"]
    assert final == "4"


def test_parse_merged_reply_pads_execution():
    reply = MERGED_REPLY.replace("1. 2 + 2 = 4\n2. total is 4", "2. total is 4")
    _, _, execution, _ = parse_merged_reply(reply)
    assert execution == ["[unanswered]", "total is 4"]


def test_parse_merged_reply_rejects_disorder():
    swapped = (
        "Script:\n1. a\n\nKey points:\n1. b\n\nScript execution:\n1. c\n\nFinal answer: d"
    )
    with pytest.raises(MergedParseError):
        parse_merged_reply(swapped)


def test_parse_merged_reply_rejects_missing_section():
    no_exec = "Key points:\n1. a\n\nScript:\n1. b\n\nFinal answer: c"
    with pytest.raises(MergedParseError):
        parse_merged_reply(no_exec)


def test_parse_merged_reply_rejects_empty_final():
    reply = MERGED_REPLY.replace("Final answer: 4\n", "Final answer:\n")
    with pytest.raises(MergedParseError):
        parse_merged_reply(reply)


def test_render_parse_merged_inverse():
    kp = ["watch the units", "round at the end"]
    script = ["compute the rate", "multiply by time"]
    execution = ["rate is 3", "distance is 12"]
    rendered = render_merged_sections(kp, script, execution, "12")
    assert parse_merged_reply(rendered) == (kp, script, execution, "12")


def _record() -> ReasoningRecord:
    backend = MockBackend(_standard_fixtures())
    return run_pipeline(backend, TEMPLATES, Q, EXAMPLES, PipelineConfig(), RULES)


def test_record_round_trips_through_dict():
    record = _record()
    clone = ReasoningRecord.from_dict(json.loads(record.to_json()))
    assert clone.to_json() == record.to_json()


def test_record_from_dict_rejects_bad_schema():
    good = _record().to_dict()
    wrong_version = dict(good, version=99)
    with pytest.raises(SchemaError):
        ReasoningRecord.from_dict(wrong_version)
    extra = dict(good, surprise=1)
    with pytest.raises(SchemaError):
        ReasoningRecord.from_dict(extra)
    missing = dict(good)
    del missing["consistency"]
    with pytest.raises(SchemaError):
        ReasoningRecord.from_dict(missing)


def test_records_file_round_trip(tmp_path):
    records = [_record(), _record()]
    path = tmp_path / "records.jsonl"
    assert write_records(path, records) == 2
    loaded = read_records(path)
    assert [r.to_json() for r in loaded] == [r.to_json() for r in records]


def test_run_batch_collects_records():
    q2 = Question(qid="q2", text="What is 3 + 3?", gold="6", task_kind="math")
    fixtures = _standard_fixtures() + _standard_fixtures(final="Final answer: 6")
    backend = MockBackend(fixtures)
    records = run_batch(backend, TEMPLATES, [Q, q2], EXAMPLES, PipelineConfig(), RULES)
    assert [r.qid for r in records] == ["q1", "q2"]
    assert sum(r.total_calls for r in records) == 10
    backend.assert_exhausted()


def test_run_batch_drains_failures():
    q2 = Question(qid="q2", text="What is 3 + 3?", gold="6", task_kind="math")
    # q2 only has its attempts fixture; the keypoints call will find the
    # queue exhausted and the batch must keep going
    fixtures = _standard_fixtures() + [("id.attempts", _attempts("6", "6", "6", "6", "6"))]
    backend = MockBackend(fixtures)
    records = run_batch(backend, TEMPLATES, [Q, q2], EXAMPLES, PipelineConfig(), RULES)
    assert not records[0].failed
    assert records[1].failed
    assert records[1].final["answer"] == FAILED_ANSWER
    assert "superego.keypoints" in records[1].error
    assert records[1].total_calls == 1  # the attempts call it did spend


def test_run_batch_forces_sequential_on_mock():
    questions = [
        Question(qid=f"q{i}", text=f"What is {i} + {i}?", gold=str(2 * i), task_kind="math")
        for i in range(1, 5)
    ]
    fixtures = []
    for i in range(1, 5):
        fixtures.append(("id.attempts", _attempts(str(2 * i), str(2 * i), "0")))
    backend = MockBackend(fixtures)
    config = PipelineConfig.cot_sc(l=3)
    records = run_batch(backend, TEMPLATES, questions, EXAMPLES, config, workers=8)
    assert [r.final["answer"] for r in records] == ["2", "4", "6", "8"]


def test_run_batch_parallel_threads():
    class EchoBackend:
        supports_batch = True

        def complete(self, request, *, stage, ledger=None):
            from psyche.backend import ChatResponse, LedgerEntry

            if ledger is not None:
                ledger.append(
                    LedgerEntry(stage=stage, digest=request.digest(), latency=0.0)
                )
            text = request.messages[0].content
            number = text.rsplit("What is ", 1)[1].split(" +")[0]
            reply = f"Final answer: {int(number) * 2}"
            return ChatResponse(completions=(reply,) * request.sample_count)

    questions = [
        Question(qid=f"q{i}", text=f"What is {i} + {i}?", gold=str(2 * i), task_kind="math")
        for i in range(1, 9)
    ]
    records = run_batch(
        EchoBackend(), TEMPLATES, questions, EXAMPLES, PipelineConfig.cot_sc(l=3), workers=4
    )
    assert [r.final["answer"] for r in records] == [str(2 * i) for i in range(1, 9)]
    assert all(r.total_calls == 1 for r in records)


def test_develop_rules_learns_from_wrong_answers():
    q_right = Question(qid="r1", text="What is 1 + 1?", gold="2", task_kind="math")
    q_wrong = Question(qid="w1", text="What is 6 * 7?", gold="42", task_kind="math")
    fixtures = [
        ("id.attempts", _attempts("2", "2", "2")),
        ("id.attempts", _attempts("41", "41", "40")),
        ("superego.pattern", ["1. multiplied wrong\n2. dropped a carry\n3. rushed"]),
        ("superego.rules", ["\n".join(f"{i}. rule {i}" for i in range(1, 11))]),
    ]
    backend = MockBackend(fixtures)
    ledger = CallLedger()
    rules = develop_rules(
        backend, TEMPLATES, [q_right, q_wrong], EXAMPLES, l=3, m=3, n=10, ledger=ledger
    )
    assert len(rules.rules) == 10
    assert ledger.total_calls == 4
    backend.assert_exhausted()


def test_develop_rules_needs_gold_and_errors():
    no_gold = Question(qid="x", text="mystery?")
    with pytest.raises(PreconditionError):
        develop_rules(MockBackend([]), TEMPLATES, [no_gold], EXAMPLES)
    all_right = Question(qid="r", text="What is 1 + 1?", gold="2", task_kind="math")
    backend = MockBackend([("id.attempts", _attempts("2", "2", "2"))])
    with pytest.raises(PreconditionError):
        develop_rules(backend, TEMPLATES, [all_right], EXAMPLES, l=3)


def test_manifest_run_id_tracks_setup():
    records = [_record()]
    manifest = build_manifest(
        PipelineConfig(),
        TEMPLATES,
        RULES,
        [Q],
        records,
        started_at="2026-01-01T00:00:00Z",
        finished_at="2026-01-01T00:05:00Z",
    )
    again = build_manifest(
        PipelineConfig(),
        TEMPLATES,
        RULES,
        [Q],
        records,
        started_at="2026-02-02T00:00:00Z",
        finished_at="2026-02-02T00:05:00Z",
    )
    assert manifest.run_id == again.run_id
    other = build_manifest(
        PipelineConfig(l=7, fallback=None),
        TEMPLATES,
        RULES,
        [Q],
        records,
        started_at="",
        finished_at="",
    )
    assert other.run_id != manifest.run_id
    assert manifest.total_calls == 5
    assert manifest.failed_count == 0
    assert manifest.record_count == 1
