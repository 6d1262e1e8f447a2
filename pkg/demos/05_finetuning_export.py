"""
From records to a two-stage fine-tuning corpus
==============================================

Completed runs become training samples in two flavors: stage 1 pairs the
sampling prompt with each reasoning path that extracted an answer, stage 2
pairs the merged prompt with the canonical four-section body. Prompts are
rendered through the same templates inference uses, so a model tuned on the
export sees exactly what it will see at run time. Samples carry a review
status; the export refuses test-split leakage and withholds oversize rows.
"""

import json
import tempfile
from pathlib import Path

from psyche import (
    Example,
    ExampleSet,
    MockBackend,
    PipelineConfig,
    Question,
    RecordStore,
    RuleSet,
    TemplateLibrary,
    build_training_samples,
    run_batch,
)
from psyche.errors import NothingToExportError

examples = ExampleSet(
    examples=(Example(question="What is 2 + 2?", reasoning="", answer="4"),)
)
questions = [
    Question(qid="ft-1", text="What is 12 * 3?", gold="36", task_kind="math"),
    Question(qid="ft-2", text="What is 9 * 9?", gold="81", task_kind="math"),
]

def scripted(answer, bad):
    return [
        ("id.attempts", [f"Final answer: {answer}"] * 4 + [f"Final answer: {bad}"]),
        ("superego.keypoints", ["1. Multiply, do not add"]),
        ("ego.script", ["1. Multiply the operands\n2. State the product"]),
        ("ego.execute", [f"1. The product is {answer}\n2. Stated"]),
        ("ego.answer", [f"Final answer: {answer}"]),
    ]

backend = MockBackend(scripted("36", "15") + scripted("81", "18"))
templates = TemplateLibrary.default()
records = run_batch(
    backend, templates, questions, examples, PipelineConfig(),
    RuleSet(rules=("Multiply when combining equal groups",)),
)

# Only correct, completed records qualify by default. Each record yields one
# stage-1 sample per extracted path plus one stage-2 sample.
samples = build_training_samples(records, templates, examples)
store = RecordStore(samples)
print("built samples:", sorted(s.sample_id for s in store))
print("status counts:", store.status_counts())

with tempfile.TemporaryDirectory() as scratch:
    out = Path(scratch) / "train.jsonl"

    # Everything is still unreviewed, so there is nothing to export yet.
    try:
        store.export(out)
    except NothingToExportError as exc:
        print("export before review:", exc)

    for sample_id in [s.sample_id for s in store]:
        store.review(sample_id, "reviewed")
    summary = store.export(out, test_qids=frozenset({"held-out-9"}))
    print("export summary:", summary)

    first = json.loads(out.read_text(encoding="utf-8").splitlines()[0])
    print("first exported row: stage", first["stage"],
          "| prompt starts:", repr(first["prompt"][:40]))
    print("  target starts:", repr(first["target"][:40]))
