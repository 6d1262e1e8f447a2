"""
One question through the three roles
=====================================

The standard pipeline spends exactly five backend calls per question: one
batched sampling call for the id role, one key-point call for the superego,
and a script / execution / answer trio for the ego. This demo replays a
scripted backend so it runs offline and always the same way.
"""

from psyche import (
    CallLedger,
    Example,
    ExampleSet,
    MockBackend,
    PipelineConfig,
    Question,
    RuleSet,
    TemplateLibrary,
    run_pipeline,
)

question = Question(
    qid="demo-1",
    text="A crate holds 24 bottles. How many bottles are in 7 crates?",
    gold="168",
    task_kind="math",
)

examples = ExampleSet(
    examples=(
        Example(
            question="What is 3 * 4?",
            reasoning="Three groups of four make twelve.",
            answer="12",
        ),
    )
)

rules = RuleSet(
    rules=(
        "Restate what the question asks before computing",
        "Multiply when combining equal groups",
        "Check arithmetic by recomputing once",
    )
)

# The scripted replies, one fixture per backend call, in pipeline order.
backend = MockBackend(
    [
        (
            "id.attempts",
            [
                "7 crates of 24 bottles: 7 * 24 = 168.\nFinal answer: 168",
                "Final answer: 168",
                "24 + 7 = 31 bottles.\nFinal answer: 31",
                "Final answer: 168",
                "Final answer: 170",
            ],
        ),
        ("superego.keypoints", ["1. Multiply crates by bottles per crate\n2. Do not add the counts"]),
        ("ego.script", ["1. Multiply 24 by 7\n2. Report the product"]),
        ("ego.execute", ["1. 24 * 7 = 168\n2. The product is 168"]),
        ("ego.answer", ["Final answer: 168"]),
    ]
)

ledger = CallLedger()
record = run_pipeline(
    backend,
    TemplateLibrary.default(),
    question,
    examples,
    PipelineConfig(),
    rules,
    ledger=ledger,
)

# The record keeps everything each role produced.
print("sampled answers:", record.attempt_answers)
print("majority vote:  ", record.majority_answer, f"(consistency {record.consistency})")
print("key points:     ", record.key_points)
print("script:         ", record.script)
print("execution:      ", record.execution)
print("final answer:   ", record.final["answer"])

# The ledger shows the fixed five-call budget.
print("calls:          ", [entry.stage for entry in ledger.entries])
print("total:          ", ledger.total_calls)
