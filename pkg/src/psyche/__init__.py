"""Three-role (id / superego / ego) reasoning pipeline over chat backends.

The package splits multi-step question answering across three roles: the id
samples candidate reasoning paths, the superego distills past mistakes into
rules and question-specific key points, and the ego plans, executes, and
answers. A merged two-call mode runs the same shape through one tuned model.
Everything runs against a pluggable chat-completions backend with per-call
accounting, and the results feed an evaluation harness and a fine-tuning
dataset exporter.
"""

from __future__ import annotations

from .answers import extract_answer, majority_vote, normalize
from .backend import (
    Backend,
    BackendConfig,
    CallLedger,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    LedgerEntry,
    MockBackend,
    load_backend_config,
    mock_from_json,
    sample_completions,
)
from .dataset import (
    RecordStore,
    TrainingSample,
    build_training_samples,
    load_split_manifest,
)
from .errors import PsycheError
from .evaluation import (
    DensityTable,
    EvalItem,
    PairwiseComparison,
    RunMetrics,
    compute_metrics,
    consistency_distribution,
    decomposition_check,
    items_from_records,
    kde_density,
    pairwise_compare,
    silverman_bandwidth,
)
from .pipeline import (
    FallbackConfig,
    FallbackHook,
    PipelineConfig,
    ReasoningRecord,
    RunManifest,
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
from .roles import (
    AttemptSet,
    ContrastPair,
    Example,
    ExampleSet,
    FinalAnswer,
    KeyPoints,
    PatternSet,
    Question,
    ReasoningPath,
    RuleSet,
    Script,
    ScriptExecution,
    answer_question,
    execute_script,
    extract_patterns,
    generate_attempts,
    generate_key_points,
    generate_script,
    load_examples,
    load_questions,
    load_rules,
    save_rules,
    summarize_rules,
)
from .templates import STAGES, PromptTemplate, TemplateLibrary

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # answers
    "extract_answer",
    "majority_vote",
    "normalize",
    # backend
    "Backend",
    "BackendConfig",
    "CallLedger",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "HttpBackend",
    "LedgerEntry",
    "MockBackend",
    "load_backend_config",
    "mock_from_json",
    "sample_completions",
    # roles
    "AttemptSet",
    "ContrastPair",
    "Example",
    "ExampleSet",
    "FinalAnswer",
    "KeyPoints",
    "PatternSet",
    "Question",
    "ReasoningPath",
    "RuleSet",
    "Script",
    "ScriptExecution",
    "answer_question",
    "execute_script",
    "extract_patterns",
    "generate_attempts",
    "generate_key_points",
    "generate_script",
    "load_examples",
    "load_questions",
    "load_rules",
    "save_rules",
    "summarize_rules",
    # templates
    "STAGES",
    "PromptTemplate",
    "TemplateLibrary",
    # pipeline
    "FallbackConfig",
    "FallbackHook",
    "PipelineConfig",
    "ReasoningRecord",
    "RunManifest",
    "build_manifest",
    "develop_rules",
    "fallback_decision",
    "ingest_handoffs",
    "nominal_calls",
    "parse_merged_reply",
    "read_records",
    "render_merged_sections",
    "run_batch",
    "run_merged",
    "run_pipeline",
    "write_records",
    # evaluation
    "DensityTable",
    "EvalItem",
    "PairwiseComparison",
    "RunMetrics",
    "compute_metrics",
    "consistency_distribution",
    "decomposition_check",
    "items_from_records",
    "kde_density",
    "pairwise_compare",
    "silverman_bandwidth",
    # dataset
    "RecordStore",
    "TrainingSample",
    "build_training_samples",
    "load_split_manifest",
    # errors
    "PsycheError",
]
