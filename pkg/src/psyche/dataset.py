"""Fine-tuning dataset construction from reasoning records.

Distilling the pipeline into a single model takes two training stages, and
each stage gets its own samples:

* **stage 1** (one sample per sampled path): prompt is the id role's question
  prompt, target is one reasoning path. Teaches candidate generation.
* **stage 2** (one sample per record): prompt is the merged-mode prompt
  (question plus the candidate solutions), target is the four-section body
  (key points, script, script execution, final answer). Teaches deliberation.

Prompts are rendered with the same templates inference uses, so a tuned model
sees at inference exactly the format it was trained on.

Samples pass through a review workflow (unreviewed -> reviewed -> consensus,
no downgrades) before export. Export refuses to produce an empty file and
refuses loudly when any exported sample's question appears in a held-out test
split; silent leakage is the one failure mode this module must never have.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    InputError,
    NothingToExportError,
    PreconditionError,
    SchemaError,
    SplitViolationError,
)
from .evaluation import EvalItem
from .pipeline import ReasoningRecord, render_merged_sections
from .roles import ExampleSet
from .templates import TemplateLibrary
from .util import approx_token_count, atomic_write_text, canonical_json, read_jsonl

SAMPLE_VERSION = 1
STAGE_ATTEMPTS = 1
STAGE_SECTIONS = 2
REVIEW_STATUSES = ("unreviewed", "reviewed", "consensus")


@dataclass(frozen=True)
class TrainingSample:
    """One prompt/target pair, tracked through review."""

    sample_id: str
    qid: str
    stage: int
    prompt: str
    target: str
    review_status: str = "unreviewed"
    oversize: bool = False
    version: int = SAMPLE_VERSION

    def __post_init__(self) -> None:
        if self.stage not in (STAGE_ATTEMPTS, STAGE_SECTIONS):
            raise PreconditionError(f"unknown training stage: {self.stage}")
        if self.review_status not in REVIEW_STATUSES:
            raise PreconditionError(f"unknown review status: {self.review_status!r}")
        if not self.prompt or not self.target:
            raise PreconditionError(f"sample {self.sample_id!r} has an empty side")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainingSample":
        if not isinstance(raw, Mapping):
            raise SchemaError("training sample must be an object")
        if raw.get("version") != SAMPLE_VERSION:
            raise SchemaError(
                f"sample version {raw.get('version')!r} unsupported "
                f"(expected {SAMPLE_VERSION})"
            )
        fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - fields
        if unknown:
            raise SchemaError(f"sample has unknown fields: {sorted(unknown)}")
        missing = fields - set(raw)
        if missing:
            raise SchemaError(f"sample is missing fields: {sorted(missing)}")
        return cls(**dict(raw))


def _attempts_block(record: ReasoningRecord) -> str:
    blocks = [
        f"Attempt {i}:\n{attempt['text'].strip()}"
        for i, attempt in enumerate(record.attempts, 1)
    ]
    return "\n\n".join(blocks)


def build_training_samples(
    records: Sequence[ReasoningRecord],
    templates: TemplateLibrary | None = None,
    examples: ExampleSet | None = None,
    *,
    stages: Sequence[int] = (STAGE_ATTEMPTS, STAGE_SECTIONS),
    max_input_tokens: int = 4096,
    require_correct: bool = True,
) -> list[TrainingSample]:
    """Turn records into training samples.

    Failed records never qualify. With ``require_correct`` (the default) a
    record must also have answered its question right; records without a gold
    answer cannot qualify then. Stage-2 samples additionally need the full
    section set (key points, script, execution), so id-only ablation records
    yield stage-1 samples at most. Samples whose prompt and target together
    exceed ``max_input_tokens`` (approximate) are flagged, not dropped.
    """
    templates = templates if templates is not None else TemplateLibrary.default()
    examples = examples if examples is not None else ExampleSet(examples=())
    unknown = set(stages) - {STAGE_ATTEMPTS, STAGE_SECTIONS}
    if unknown:
        raise PreconditionError(f"unknown stages requested: {sorted(unknown)}")

    id_template = templates.get("id.attempts")
    merged_template = templates.get("merged")
    samples: list[TrainingSample] = []
    for record in records:
        if record.failed:
            continue
        if require_correct and not (record.gold and EvalItem.from_record(record).correct):
            continue
        if STAGE_ATTEMPTS in stages:
            prompt = id_template.render(
                examples=examples.render(), question=record.question
            )
            extracted = [a for a in record.attempts if a["extracted"]]
            for i, attempt in enumerate(extracted, 1):
                target = attempt["text"]
                samples.append(
                    TrainingSample(
                        sample_id=f"{record.qid}.s1.{i}",
                        qid=record.qid,
                        stage=STAGE_ATTEMPTS,
                        prompt=prompt,
                        target=target,
                        oversize=approx_token_count(prompt + target) > max_input_tokens,
                    )
                )
        if STAGE_SECTIONS in stages:
            if not (record.key_points and record.script and record.execution):
                continue
            prompt = merged_template.render(
                question=record.question, attempts=_attempts_block(record)
            )
            target = render_merged_sections(
                record.key_points,
                record.script,
                record.execution,
                record.final["answer"],
            )
            samples.append(
                TrainingSample(
                    sample_id=f"{record.qid}.s2",
                    qid=record.qid,
                    stage=STAGE_SECTIONS,
                    prompt=prompt,
                    target=target,
                    oversize=approx_token_count(prompt + target) > max_input_tokens,
                )
            )
    return samples


def load_split_manifest(path: str | Path) -> frozenset[str]:
    """Question ids of a held-out split: JSONL rows with ``qid`` or bare lines."""
    qids: set[str] = set()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read split manifest {path}: {exc}") from exc
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            try:
                row = json.loads(line)
                qids.add(str(row["qid"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise InputError(f"bad manifest line {i + 1} in {path}: {exc}") from exc
        else:
            qids.add(line)
    if not qids:
        raise InputError(f"split manifest {path} names no questions")
    return frozenset(qids)


class RecordStore:
    """Training samples under review, keyed by sample id.

    Review only moves forward: unreviewed to reviewed to consensus. Exports
    draw from samples at or above a minimum status.
    """

    def __init__(self, samples: Iterable[TrainingSample] = ()) -> None:
        self._samples: dict[str, TrainingSample] = {}
        for sample in samples:
            self.add(sample)

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples.values())

    def get(self, sample_id: str) -> TrainingSample:
        try:
            return self._samples[sample_id]
        except KeyError:
            raise InputError(f"no sample {sample_id!r} in the store") from None

    def add(self, sample: TrainingSample) -> None:
        if sample.sample_id in self._samples:
            raise InputError(f"duplicate sample id {sample.sample_id!r}")
        self._samples[sample.sample_id] = sample

    def add_many(self, samples: Iterable[TrainingSample]) -> int:
        count = 0
        for sample in samples:
            self.add(sample)
            count += 1
        return count

    def review(self, sample_id: str, status: str) -> TrainingSample:
        if status not in REVIEW_STATUSES:
            raise InputError(f"unknown review status {status!r}")
        sample = self.get(sample_id)
        if REVIEW_STATUSES.index(status) < REVIEW_STATUSES.index(sample.review_status):
            raise InputError(
                f"cannot demote {sample_id!r} from {sample.review_status!r} to {status!r}"
            )
        updated = replace(sample, review_status=status)
        self._samples[sample_id] = updated
        return updated

    def status_counts(self) -> dict[str, int]:
        counts = {status: 0 for status in REVIEW_STATUSES}
        for sample in self:
            counts[sample.review_status] += 1
        return counts

    def save(self, path: str | Path) -> int:
        lines = [sample.to_json() for sample in self]
        atomic_write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))
        return len(lines)

    @classmethod
    def load(cls, path: str | Path) -> "RecordStore":
        return cls(TrainingSample.from_dict(row) for row in read_jsonl(path))

    def export(
        self,
        path: str | Path,
        *,
        min_status: str = "reviewed",
        test_qids: frozenset[str] | set[str] = frozenset(),
        stages: Sequence[int] = (STAGE_ATTEMPTS, STAGE_SECTIONS),
    ) -> dict:
        """Write trainer-ready JSONL rows (prompt, target, stage).

        Only samples at or above ``min_status`` and in the requested stages
        qualify; oversize samples are withheld. Any qualifying sample whose
        question belongs to the test split aborts the whole export.
        """
        if min_status not in REVIEW_STATUSES:
            raise InputError(f"unknown review status {min_status!r}")
        floor = REVIEW_STATUSES.index(min_status)
        in_stage = [sample for sample in self if sample.stage in stages]
        qualifying = [
            sample
            for sample in in_stage
            if REVIEW_STATUSES.index(sample.review_status) >= floor
        ]
        leaked = sorted({s.qid for s in qualifying if s.qid in test_qids})
        if leaked:
            raise SplitViolationError(
                f"{len(leaked)} exported question(s) belong to the test split: "
                f"{leaked[:5]}"
            )
        exportable = [s for s in qualifying if not s.oversize]
        if not exportable:
            raise NothingToExportError(
                f"no samples at status >= {min_status!r} to export"
            )
        lines = [
            canonical_json({"prompt": s.prompt, "target": s.target, "stage": s.stage})
            for s in exportable
        ]
        atomic_write_text(Path(path), "\n".join(lines) + "\n")
        return {
            "exported": len(exportable),
            "withheld_oversize": len(qualifying) - len(exportable),
            "below_status": len(in_stage) - len(qualifying),
            "stages": sorted(set(s.stage for s in exportable)),
        }
