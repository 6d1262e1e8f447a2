"""
Scoring a run: EM, the two conditional accuracies, and densities
================================================================

EM is plain exact match. PM conditions on the gold answer appearing among
the sampled attempts (did deliberation keep a correct intuition?), RM on it
appearing in none of them (did deliberation recover what intuition missed?).
Correct answers split exactly between the two numerators. A vote-only
baseline can never score RM: its prediction is always one of the attempts.
"""

from psyche import (
    EvalItem,
    compute_metrics,
    consistency_distribution,
    decomposition_check,
    kde_density,
    pairwise_compare,
)

# Hand-built items; in practice these come from items_from_records(records).
full_run = [
    EvalItem("q1", "36", "36", ("36", "36", "15", "15", "35"), "36", 2, "math"),
    EvalItem("q2", "17", "17", ("17", "17", "17", "12", "12"), "17", 3, "math"),
    EvalItem("q3", "42", "42", ("41", "40", "39", "38", "44"), "41", 1, "math"),
    EvalItem("q4", "8", "9", ("9", "9", "9", "9", "8"), "9", 4, "math"),
]

metrics = decomposition_check(full_run)  # compute + verify the identities
print("full pipeline:")
print(f"  EM {metrics.em:.2f}  PM {metrics.pm:.2f}  RM {metrics.rm:.2f}")
print(
    f"  correct answers {round(metrics.em * metrics.count)}"
    f" = PM numerator {metrics.pm_numerator} + RM numerator {metrics.rm_numerator}"
)

# The same questions answered by majority vote alone: q3's recovery is gone.
vote_only = [
    EvalItem(item.qid, item.gold, item.majority_answer, item.attempt_answers,
             item.majority_answer, item.consistency, item.task_kind)
    for item in full_run
]
baseline = compute_metrics(vote_only)
print("vote-only baseline:")
print(f"  EM {baseline.em:.2f}  RM {baseline.rm:.2f} (always zero here)")

# Question-level agreement between the two runs.
compared = pairwise_compare(full_run, vote_only)
print("pairwise:")
print(f"  both correct {compared.both_correct}, full-only {compared.a_only},"
      f" baseline-only {compared.b_only}, both wrong {compared.both_wrong}")
print(f"  full-only qids: {list(compared.a_only_qids)}")

# Consistency values summarize how much the attempts agreed; the density
# table shows their distribution and flags bimodal splits.
histogram = consistency_distribution(full_run)
table = kde_density([item.consistency for item in full_run])
print("consistency density:")
print(f"  histogram {histogram}, bandwidth {table.bandwidth:.3f},"
      f" integral {table.integral():.3f}, modes {table.mode_count()}")
