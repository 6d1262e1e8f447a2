"""Training sample construction, review workflow, and guarded export."""

from __future__ import annotations

import json

import pytest

from psyche.backend import MockBackend
from psyche.dataset import (
    STAGE_ATTEMPTS,
    STAGE_SECTIONS,
    RecordStore,
    TrainingSample,
    build_training_samples,
    load_split_manifest,
)
from psyche.errors import (
    InputError,
    NothingToExportError,
    PreconditionError,
    SchemaError,
    SplitViolationError,
)
from psyche.pipeline import PipelineConfig, parse_merged_reply, run_pipeline
from psyche.roles import Example, ExampleSet, Question, RuleSet
from psyche.templates import TemplateLibrary

TEMPLATES = TemplateLibrary.default()
EXAMPLES = ExampleSet(
    examples=(Example(question="What is 1 + 1?", answer="2", reasoning="1 + 1 = 2."),)
)
RULES = RuleSet(rules=tuple(f"rule {i}" for i in range(1, 11)))


def _record(qid: str = "q1", final: str = "Final answer: 4", gold: str = "4"):
    backend = MockBackend(
        [
            ("id.attempts", ["2 + 2 = 4. Final answer: 4", "gibberish!?", "Final answer: 4"]),
            ("superego.keypoints", ["1. mind the operator\n2. check the sum"]),
            ("ego.script", ["1. add the numbers\n2. report the total"]),
            ("ego.execute", ["1. 2 + 2 = 4\n2. total is 4"]),
            ("ego.answer", [final]),
        ]
    )
    question = Question(qid=qid, text="What is 2 + 2?", gold=gold, task_kind="math")
    return run_pipeline(backend, TEMPLATES, question, EXAMPLES, PipelineConfig(l=3), RULES)


def test_build_samples_both_stages():
    samples = build_training_samples([_record()], TEMPLATES, EXAMPLES)
    by_stage = {}
    for s in samples:
        by_stage.setdefault(s.stage, []).append(s)
    # two extracted paths -> two stage-1 samples; one stage-2 sample
    assert len(by_stage[STAGE_ATTEMPTS]) == 2
    assert len(by_stage[STAGE_SECTIONS]) == 1
    assert {s.qid for s in samples} == {"q1"}
    assert all(s.review_status == "unreviewed" for s in samples)


def test_stage1_prompt_matches_inference_prompt():
    record = _record()
    samples = build_training_samples(
        [record], TEMPLATES, EXAMPLES, stages=(STAGE_ATTEMPTS,)
    )
    expected = TEMPLATES.get("id.attempts").render(
        examples=EXAMPLES.render(), question=record.question
    )
    assert all(s.prompt == expected for s in samples)
    assert samples[0].target == "2 + 2 = 4. Final answer: 4"


def test_stage2_target_parses_back_into_sections():
    record = _record()
    (sample,) = build_training_samples(
        [record], TEMPLATES, EXAMPLES, stages=(STAGE_SECTIONS,)
    )
    kp, script, execution, answer = parse_merged_reply(sample.target)
    assert kp == record.key_points
    assert script == record.script
    assert execution == record.execution
    assert answer == record.final["answer"]
    assert "Attempt 1:" in sample.prompt
    assert record.question in sample.prompt


def test_build_skips_incorrect_records_by_default():
    wrong = _record(final="Final answer: 7")
    assert build_training_samples([wrong], TEMPLATES, EXAMPLES) == []
    kept = build_training_samples(
        [wrong], TEMPLATES, EXAMPLES, require_correct=False
    )
    assert kept


def test_build_skips_goldless_records_when_requiring_correct():
    goldless = _record(gold="")
    assert build_training_samples([goldless], TEMPLATES, EXAMPLES) == []
    assert build_training_samples(
        [goldless], TEMPLATES, EXAMPLES, require_correct=False
    )


def test_build_stage2_needs_full_sections():
    backend = MockBackend([("id.attempts", ["Final answer: 4"] * 3)])
    question = Question(qid="c1", text="What is 2 + 2?", gold="4", task_kind="math")
    record = run_pipeline(
        backend, TEMPLATES, question, EXAMPLES, PipelineConfig.cot_sc(l=3)
    )
    samples = build_training_samples([record], TEMPLATES, EXAMPLES)
    assert {s.stage for s in samples} == {STAGE_ATTEMPTS}


def test_build_rejects_unknown_stage():
    with pytest.raises(PreconditionError):
        build_training_samples([_record()], TEMPLATES, EXAMPLES, stages=(3,))


def test_oversize_flagging():
    samples = build_training_samples(
        [_record()], TEMPLATES, EXAMPLES, max_input_tokens=10
    )
    assert samples and all(s.oversize for s in samples)


def test_sample_round_trip_and_schema():
    (sample,) = build_training_samples(
        [_record()], TEMPLATES, EXAMPLES, stages=(STAGE_SECTIONS,)
    )
    clone = TrainingSample.from_dict(json.loads(sample.to_json()))
    assert clone == sample
    with pytest.raises(SchemaError):
        TrainingSample.from_dict(dict(sample.to_dict(), version=9))
    with pytest.raises(SchemaError):
        TrainingSample.from_dict(dict(sample.to_dict(), extra=True))
    broken = sample.to_dict()
    del broken["target"]
    with pytest.raises(SchemaError):
        TrainingSample.from_dict(broken)


def test_sample_validation():
    with pytest.raises(PreconditionError):
        TrainingSample(sample_id="x", qid="q", stage=5, prompt="p", target="t")
    with pytest.raises(PreconditionError):
        TrainingSample(
            sample_id="x", qid="q", stage=1, prompt="p", target="t", review_status="maybe"
        )
    with pytest.raises(PreconditionError):
        TrainingSample(sample_id="x", qid="q", stage=1, prompt="", target="t")


def _store() -> RecordStore:
    return RecordStore(build_training_samples([_record()], TEMPLATES, EXAMPLES))


def test_store_rejects_duplicates():
    store = _store()
    with pytest.raises(InputError):
        store.add(next(iter(store)))


def test_store_review_moves_forward_only():
    store = _store()
    sid = next(iter(store)).sample_id
    store.review(sid, "reviewed")
    assert store.get(sid).review_status == "reviewed"
    store.review(sid, "reviewed")  # idempotent at the same level
    store.review(sid, "consensus")
    with pytest.raises(InputError):
        store.review(sid, "unreviewed")
    with pytest.raises(InputError):
        store.review(sid, "confused")
    with pytest.raises(InputError):
        store.review("ghost", "reviewed")


def test_store_status_counts():
    store = _store()
    sid = next(iter(store)).sample_id
    store.review(sid, "consensus")
    counts = store.status_counts()
    assert counts["consensus"] == 1
    assert counts["unreviewed"] == len(store) - 1


def test_store_save_load_round_trip(tmp_path):
    store = _store()
    sid = next(iter(store)).sample_id
    store.review(sid, "reviewed")
    path = tmp_path / "store.jsonl"
    assert store.save(path) == len(store)
    loaded = RecordStore.load(path)
    assert len(loaded) == len(store)
    assert loaded.get(sid).review_status == "reviewed"
    assert [s.to_json() for s in loaded] == [s.to_json() for s in store]


def test_export_requires_review(tmp_path):
    store = _store()
    out = tmp_path / "train.jsonl"
    with pytest.raises(NothingToExportError):
        store.export(out, min_status="reviewed")
    for sample in list(store):
        store.review(sample.sample_id, "reviewed")
    summary = store.export(out, min_status="reviewed")
    assert summary["exported"] == len(store)
    assert summary["below_status"] == 0
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert all(set(row) == {"prompt", "target", "stage"} for row in rows)


def test_export_unreviewed_floor_allows_everything(tmp_path):
    store = _store()
    summary = store.export(tmp_path / "train.jsonl", min_status="unreviewed")
    assert summary["exported"] == len(store)


def test_export_withholds_oversize(tmp_path):
    samples = build_training_samples(
        [_record()], TEMPLATES, EXAMPLES, max_input_tokens=10
    )
    store = RecordStore(samples)
    with pytest.raises(NothingToExportError):
        store.export(tmp_path / "train.jsonl", min_status="unreviewed")


def test_export_stage_filter(tmp_path):
    store = _store()
    summary = store.export(
        tmp_path / "s2.jsonl", min_status="unreviewed", stages=(STAGE_SECTIONS,)
    )
    assert summary["exported"] == 1
    assert summary["stages"] == [STAGE_SECTIONS]


def test_export_refuses_test_split_leakage(tmp_path):
    store = _store()
    out = tmp_path / "train.jsonl"
    with pytest.raises(SplitViolationError):
        store.export(out, min_status="unreviewed", test_qids={"q1"})
    assert not out.exists()


def test_load_split_manifest(tmp_path):
    jsonl = tmp_path / "test.jsonl"
    jsonl.write_text('{"qid": "a"}\n{"qid": "b"}\n', encoding="utf-8")
    assert load_split_manifest(jsonl) == {"a", "b"}
    plain = tmp_path / "test.txt"
    plain.write_text("x\n\ny\n", encoding="utf-8")
    assert load_split_manifest(plain) == {"x", "y"}
    empty = tmp_path / "empty.txt"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(InputError):
        load_split_manifest(empty)
