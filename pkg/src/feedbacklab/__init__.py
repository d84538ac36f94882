"""Reviewer-feedback pipelines: labeling, training-data forging, and
generator evaluation, with every model call behind a stub-able client."""

from .config import PipelineConfig, config_hash, load_config, parse_config
from .consensus import (
    ConsensusSet,
    MatchEdge,
    MatchScore,
    bootstrap_match_eval,
    build_consensus,
    build_stratum_table,
    calibrate_threshold,
    consensus_clusters,
    distribution_weighted,
    prefilter_pairs,
    score_model,
)
from .core import (
    AspectTag,
    AuthorAction,
    Decision,
    FeedbackDimension,
    FeedbackUnit,
    PaperRecord,
    ReviewThread,
    Source,
    Speaker,
    Turn,
    Validity,
    canonical_json,
    content_hash,
    is_actionable,
    make_unit_id,
    success_indicator,
)
from .errors import (
    ConfigError,
    FeedbackLabError,
    IngestError,
    JudgeError,
    JudgeFormatError,
    PipelineError,
    StatsError,
)
from .forge import (
    CorruptionVariant,
    build_corruption_bank,
    build_dpo,
    build_sft,
    corrupt,
    dedup_units,
    verify_and_filter,
)
from .ingest import (
    AnnotationRecord,
    DatasetStore,
    build_test_split,
    load_annotations,
    load_corpus,
    majority_vote,
    save_corpus,
)
from .judge import (
    EndpointConfig,
    HttpBackend,
    JudgeClient,
    JudgeResponse,
    PromptTemplate,
    StubBackend,
    cosine,
)
from .parse import agreement_report, parse_papers, parse_thread
from .report import EvalReport, ReportTable, render_report
from .stats import (
    ContingencyTable,
    cohen_kappa,
    fisher_exact,
    krippendorff_alpha,
    kruskal_wallis,
    mann_whitney_u,
    pabak,
    percentile_bootstrap,
)
from .successeval import (
    SuccessMode,
    UnitEvaluation,
    bootstrap_eval,
    evaluate_unit,
    success_rate,
)

__version__ = "0.1.0"
