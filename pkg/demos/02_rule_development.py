"""
Developing rules from wrong answers
===================================

Rules are built offline from a training split with gold answers. For every
question the id role gets wrong, the superego turns the contrast between the
gold answer and the wrong majority vote into exactly three error patterns;
one final call distills all collected patterns into exactly ten rules. A
right answer costs one call, a wrong one costs two.
"""

import tempfile
from pathlib import Path

from psyche import (
    CallLedger,
    ExampleSet,
    MockBackend,
    Question,
    TemplateLibrary,
    develop_rules,
    load_rules,
    save_rules,
)

questions = [
    Question(qid="train-1", text="What is 12 * 3?", gold="36", task_kind="math"),
    Question(qid="train-2", text="What is 9 + 8?", gold="17", task_kind="math"),
]

# train-1 goes wrong (the id adds instead of multiplying), train-2 is fine,
# so only train-1 produces a pattern call.
backend = MockBackend(
    [
        ("id.attempts", ["Final answer: 15"] * 4 + ["Final answer: 36"]),
        (
            "superego.pattern",
            [
                "1. Added the operands instead of multiplying\n"
                "2. Never restated what the question asked\n"
                "3. Skipped the arithmetic recheck"
            ],
        ),
        ("id.attempts", ["Final answer: 17"] * 5),
        (
            "superego.rules",
            [
                "\n".join(
                    f"{i}. Rule distilled from the observed mistakes, number {i}"
                    for i in range(1, 11)
                )
            ],
        ),
    ]
)

ledger = CallLedger()
rules = develop_rules(
    backend, TemplateLibrary.default(), questions, ExampleSet(examples=()), ledger=ledger
)

print(f"developed {len(rules.rules)} rules with {ledger.total_calls} calls:")
for i, rule in enumerate(rules.rules, 1):
    print(f"  {i:2d}. {rule}")

# Rules persist as a small versioned JSON file and load back identical.
with tempfile.TemporaryDirectory() as scratch:
    path = Path(scratch) / "rules.json"
    save_rules(rules, path)
    assert load_rules(path).rules == rules.rules
    print("round-tripped through", path.name)
