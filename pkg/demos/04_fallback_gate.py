"""
Handing low-confidence questions to an external decider
=======================================================

When the majority vote over the sampled attempts is weaker than a threshold
(strictly below), the record is flagged and written out as a handoff file.
The pipeline still finishes its full run either way; an external tool (or a
person) fills in the handoff's "answer" field later, and ingesting the
directory folds those answers back into the records verbatim.
"""

import json
import tempfile
from pathlib import Path

from psyche import (
    ExampleSet,
    FallbackConfig,
    FallbackHook,
    MockBackend,
    PipelineConfig,
    Question,
    RuleSet,
    TemplateLibrary,
    ingest_handoffs,
    run_batch,
)

question = Question(
    qid="hard-1",
    text="A riddle with five mutually contradictory readings?",
    gold="the fourth reading",
    task_kind="textual",
)

# Five attempts, five different answers: consistency 1, well below 3.
backend = MockBackend(
    [
        ("id.attempts", [f"Final answer: the {w} reading" for w in
                         ("first", "second", "third", "fourth", "fifth")]),
        ("superego.keypoints", ["1. Compare the readings clause by clause"]),
        ("ego.script", ["1. Eliminate readings contradicted by the text"]),
        ("ego.execute", ["1. Could not eliminate down to one reading"]),
        ("ego.answer", ["Final answer: the second reading"]),
    ]
)

with tempfile.TemporaryDirectory() as scratch:
    handoff_dir = Path(scratch) / "handoffs"
    config = PipelineConfig(fallback=FallbackConfig(candidates=5, threshold=3))
    hook = FallbackHook(handoff_dir)

    records = run_batch(
        backend,
        TemplateLibrary.default(),
        [question],
        ExampleSet(examples=()),
        config,
        RuleSet(rules=("Read every clause",)),
        fallback_hook=hook,
    )
    record = records[0]
    print("consistency:", record.consistency, "-> fallback_used:",
          record.final["fallback_used"])
    print("pipeline answered:", record.final["answer"])
    print("handoff written to:", record.fallback_handoff)

    # Someone (or something) answers the handoff file.
    handoff_path = Path(record.fallback_handoff)
    payload = json.loads(handoff_path.read_text(encoding="utf-8"))
    payload["answer"] = "the fourth reading"
    handoff_path.write_text(json.dumps(payload), encoding="utf-8")

    # Ingest replaces the pipeline answer verbatim, only where answered.
    updated, changed = ingest_handoffs(records, handoff_dir)
    print(f"ingested {changed} answer(s); final is now:",
          updated[0].final["answer"])
