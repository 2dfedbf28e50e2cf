"""Knowledge-based VQA engine: multi-level retrieval over a multimodal
knowledge base, critic-gated passage filtering, prompt-orchestrated answer
generation through pluggable backends, rule-based verifiable rewards, and a
group-relative RL training core exercised on toy policies."""

from .backends import (
    BackendError,
    Backends,
    BackendSpec,
    GenerationRequest,
    GenerationResult,
    load_backend_spec,
    make_backends,
    make_mock_backends,
)
from .core import (
    Dataset,
    Document,
    GroundTruth,
    KnowledgeBase,
    Passage,
    PipelineConfig,
    Query,
    QuestionKind,
    QuestionTask,
    RetrievalHit,
    RetrievalModality,
    Stage,
    ValidationError,
    config_violations,
    validate_config,
)
from .filtering import CriticVerdict, filter_passages, sweep_threshold
from .harness import (
    DataError,
    EvalReport,
    QARecord,
    RecordResult,
    build_kb_index,
    evaluate,
    ingest_kb,
    ingest_qa,
    run_batch,
    run_oracle,
    run_pipeline,
    sweep,
)
from .index import (
    EmbeddingVector,
    IndexEntry,
    ModalityTag,
    VectorIndex,
    VectorIndexError,
    build_index,
    cosine,
)
from .retrieval import (
    NoisyPassageSet,
    RetrievalError,
    coarse_retrieve,
    extract_subject,
    fine_retrieve,
    merge_rank,
)
from .rewards import (
    ExtractedAnswer,
    ExtractionPath,
    Matcher,
    NormalizedAnswer,
    RewardBreakdown,
    extract_answer,
    format_reward,
    normalize,
    psi_num,
    score_output,
    task_reward,
    total_reward,
)
from .rl import (
    AdvantageGroup,
    Completion,
    CopyTokenEnv,
    PolicySnapshot,
    RLError,
    Segment,
    ToyPolicy,
    TrainingDiverged,
    TrainingResult,
    compute_advantages,
    finite_diff_check,
    grpo_gradient,
    grpo_objective,
    sft_gradient,
    sft_loss,
    token_ratio,
    train_toy,
)

__version__ = "0.1.0"
