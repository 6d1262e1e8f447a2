"""Run evaluation: exact match, conditional accuracies, comparisons, densities.

Three headline numbers describe a run:

* **EM**: fraction of questions answered exactly right (after normalization).
* **PM**: accuracy conditioned on the gold answer appearing among the sampled
  attempt answers; how often the pipeline keeps a correct intuition.
* **RM**: accuracy conditioned on the gold answer appearing in none of the
  attempts; how often deliberation recovers what intuition missed. A
  majority-vote baseline can never score here, its prediction is always one
  of the attempts.

PM and RM condition on disjoint events, so correct answers split exactly
between the two numerators: ``em * count == pm_numerator + rm_numerator``.
``decomposition_check`` enforces that identity plus the input hygiene it
rests on (attempt answers already normalized, majority consistent with the
vote).

``rm_majority`` is a diagnostic variant that conditions on the majority vote
being wrong instead of the gold being absent; it is reported alongside, never
in place of, RM.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .answers import TASK_KINDS, normalize
from .errors import ConsistencyCheckError, InputError, PreconditionError
from .pipeline import ReasoningRecord


@dataclass(frozen=True)
class EvalItem:
    """One scored question: what was predicted vs. what was sampled."""

    qid: str
    gold: str
    prediction: str
    attempt_answers: tuple[str, ...]
    majority_answer: str
    consistency: int
    task_kind: str = "textual"
    failed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "attempt_answers", tuple(self.attempt_answers))
        if self.task_kind not in TASK_KINDS:
            raise PreconditionError(f"unknown task_kind {self.task_kind!r}")

    @classmethod
    def from_record(cls, record: ReasoningRecord) -> "EvalItem":
        return cls(
            qid=record.qid,
            gold=record.gold,
            prediction=record.final["answer"],
            attempt_answers=tuple(record.attempt_answers),
            majority_answer=record.majority_answer,
            consistency=record.consistency,
            task_kind=record.task_kind,
            failed=record.failed,
        )

    @property
    def gold_norm(self) -> str:
        return normalize(self.gold, self.task_kind)

    @property
    def correct(self) -> bool:
        if self.failed:
            return False
        return normalize(self.prediction, self.task_kind) == self.gold_norm

    @property
    def gold_in_attempts(self) -> bool:
        gold = self.gold_norm
        return any(normalize(a, self.task_kind) == gold for a in self.attempt_answers)


@dataclass(frozen=True)
class RunMetrics:
    """EM plus the two conditional accuracies with their raw tallies."""

    count: int
    failed_count: int
    em: float
    pm: float | None
    rm: float | None
    rm_majority: float | None
    pm_numerator: int
    pm_denominator: int
    rm_numerator: int
    rm_denominator: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def compute_metrics(items: Sequence[EvalItem]) -> RunMetrics:
    if not items:
        raise PreconditionError("nothing to evaluate")
    missing = [item.qid for item in items if not item.gold]
    if missing:
        raise PreconditionError(f"items without gold answers: {missing[:5]}")

    pm_num = pm_den = rm_num = rm_den = 0
    maj_wrong = maj_wrong_correct = 0
    correct_total = 0
    for item in items:
        correct = item.correct
        correct_total += correct
        if item.gold_in_attempts:
            pm_den += 1
            pm_num += correct
        else:
            rm_den += 1
            rm_num += correct
        majority_right = (
            normalize(item.majority_answer, item.task_kind) == item.gold_norm
        )
        if not majority_right:
            maj_wrong += 1
            maj_wrong_correct += correct

    return RunMetrics(
        count=len(items),
        failed_count=sum(item.failed for item in items),
        em=correct_total / len(items),
        pm=_ratio(pm_num, pm_den),
        rm=_ratio(rm_num, rm_den),
        rm_majority=_ratio(maj_wrong_correct, maj_wrong),
        pm_numerator=pm_num,
        pm_denominator=pm_den,
        rm_numerator=rm_num,
        rm_denominator=rm_den,
    )


def decomposition_check(items: Sequence[EvalItem]) -> RunMetrics:
    """Compute metrics and verify the identities they must satisfy.

    Raises ``ConsistencyCheckError`` naming the offending qids when an item's
    attempt answers are not normalization fixed points, when its recorded
    majority disagrees with a recount of the vote, or when correct answers do
    not split exactly into the PM and RM numerators.
    """
    from .answers import majority_vote

    offending: list[str] = []
    for item in items:
        fixed = all(
            normalize(a, item.task_kind) == a for a in item.attempt_answers
        )
        if not fixed:
            offending.append(item.qid)
            continue
        if item.attempt_answers:
            _, count = majority_vote(list(item.attempt_answers))
            recounted = [
                a
                for a in item.attempt_answers
                if list(item.attempt_answers).count(a) == count
            ]
            if item.majority_answer not in recounted or item.consistency != count:
                offending.append(item.qid)
    if offending:
        raise ConsistencyCheckError(
            f"{len(offending)} item(s) violate evaluation preconditions",
            offending=offending,
        )
    metrics = compute_metrics(items)
    pm_den_complement = metrics.count - metrics.pm_denominator
    correct_total = round(metrics.em * metrics.count)
    if metrics.pm_numerator + metrics.rm_numerator != correct_total:
        raise ConsistencyCheckError(
            "correct answers do not decompose into PM + RM numerators",
            offending=[],
        )
    if metrics.rm_denominator != pm_den_complement:
        raise ConsistencyCheckError(
            "PM and RM denominators do not partition the items",
            offending=[],
        )
    return metrics


@dataclass(frozen=True)
class PairwiseComparison:
    """Question-level agreement between two runs over the same questions."""

    count: int
    both_correct: int
    a_only: int
    b_only: int
    both_wrong: int
    a_only_qids: tuple[str, ...]
    b_only_qids: tuple[str, ...]

    def to_dict(self) -> dict:
        return asdict(self)


def pairwise_compare(
    items_a: Sequence[EvalItem], items_b: Sequence[EvalItem]
) -> PairwiseComparison:
    """Contingency table of correctness for two runs, aligned by qid."""
    by_a = {item.qid: item for item in items_a}
    by_b = {item.qid: item for item in items_b}
    if len(by_a) != len(items_a) or len(by_b) != len(items_b):
        raise InputError("duplicate qids in a run")
    if set(by_a) != set(by_b):
        only_a = sorted(set(by_a) - set(by_b))[:5]
        only_b = sorted(set(by_b) - set(by_a))[:5]
        raise InputError(
            f"runs cover different questions (a-only {only_a}, b-only {only_b})"
        )
    both = a_only = b_only = neither = 0
    a_only_qids: list[str] = []
    b_only_qids: list[str] = []
    for qid in sorted(by_a):
        ca, cb = by_a[qid].correct, by_b[qid].correct
        if ca and cb:
            both += 1
        elif ca:
            a_only += 1
            a_only_qids.append(qid)
        elif cb:
            b_only += 1
            b_only_qids.append(qid)
        else:
            neither += 1
    return PairwiseComparison(
        count=len(by_a),
        both_correct=both,
        a_only=a_only,
        b_only=b_only,
        both_wrong=neither,
        a_only_qids=tuple(a_only_qids),
        b_only_qids=tuple(b_only_qids),
    )


_DEGENERATE_BANDWIDTH = 0.1


def silverman_bandwidth(values: Sequence[float]) -> float:
    """Rule-of-thumb bandwidth: ``0.9 * min(std, iqr/1.34) * n**(-1/5)``.

    Sample standard deviation (ddof=1) and linearly interpolated quartiles.
    When the dispersion estimate vanishes (constant or near-constant data),
    a small fixed bandwidth keeps the density well-defined.
    """
    data = np.asarray(list(values), dtype=float)
    if data.size == 0:
        raise PreconditionError("no values for bandwidth selection")
    if data.size == 1:
        return _DEGENERATE_BANDWIDTH
    std = float(np.std(data, ddof=1))
    q75, q25 = np.percentile(data, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    bandwidth = 0.9 * spread * data.size ** (-1 / 5)
    return bandwidth if bandwidth > 0 else _DEGENERATE_BANDWIDTH


@dataclass(frozen=True)
class DensityTable:
    """A kernel density estimate on an even grid."""

    grid: tuple[float, ...]
    density: tuple[float, ...]
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(np.asarray(self.density), np.asarray(self.grid)))

    def mode_count(self) -> int:
        d = np.asarray(self.density)
        interior = (d[1:-1] > d[:-2]) & (d[1:-1] > d[2:])
        return int(np.count_nonzero(interior))

    @property
    def bimodal(self) -> bool:
        return self.mode_count() >= 2

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "density": list(self.density),
            "bandwidth": self.bandwidth,
            "modes": self.mode_count(),
            "integral": self.integral(),
        }


def kde_density(
    values: Sequence[float],
    *,
    grid_size: int = 256,
    bandwidth: float | None = None,
) -> DensityTable:
    """Gaussian KDE over ``values`` on a grid spanning the data ±4 bandwidths.

    The grid is wide enough that the density integrates to 1 within 0.01.
    """
    data = np.asarray(list(values), dtype=float)
    if data.size == 0:
        raise PreconditionError("no values for density estimation")
    if grid_size < 8:
        raise PreconditionError(f"grid_size too small: {grid_size}")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(data)
    if h <= 0:
        raise PreconditionError(f"bandwidth must be positive: {h}")
    grid = np.linspace(data.min() - 4 * h, data.max() + 4 * h, grid_size)
    z = (grid[:, None] - data[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (data.size * h * np.sqrt(2 * np.pi))
    return DensityTable(
        grid=tuple(float(x) for x in grid),
        density=tuple(float(y) for y in density),
        bandwidth=float(h),
    )


def consistency_distribution(items: Sequence[EvalItem]) -> dict[int, int]:
    """How many items landed on each consistency value."""
    out: dict[int, int] = {}
    for item in items:
        out[item.consistency] = out.get(item.consistency, 0) + 1
    return dict(sorted(out.items()))


def items_from_records(records: Sequence[ReasoningRecord]) -> list[EvalItem]:
    return [EvalItem.from_record(record) for record in records]
