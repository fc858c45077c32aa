"""Exemplar retrieval index, RAG pipeline, and evaluation harness for
SAR automatic target recognition."""

__version__ = "0.1.0"

from .core import (
    ClassDistribution,
    ExemplarMeta,
    ExemplarRecord,
    VehicleSpec,
    class_distribution,
    cosine_similarity,
    make_record,
    normalize,
)
from .errors import RagatrError
from .index import (
    ExemplarIndex,
    FilterClause,
    MetadataFilter,
    RetrievalHit,
    load_snapshot,
)
from .ingest import (
    DatasetManifest,
    SplitPlan,
    SyntheticCorpusConfig,
    generate_synthetic_corpus,
    parse_manifest,
    parse_vehicle_specs,
    stratified_split,
)
from .metrics import EvalReport, RetrievalOutcome, aggregate_runs, render_report
from .pipeline import (
    StructuredAnswer,
    StubGeneratorClient,
    VqaQuestion,
    answer_pipeline,
    assemble_context,
    stub_generate,
)

__all__ = [
    "ClassDistribution",
    "DatasetManifest",
    "EvalReport",
    "ExemplarIndex",
    "ExemplarMeta",
    "ExemplarRecord",
    "FilterClause",
    "MetadataFilter",
    "RagatrError",
    "RetrievalHit",
    "RetrievalOutcome",
    "SplitPlan",
    "StructuredAnswer",
    "StubGeneratorClient",
    "SyntheticCorpusConfig",
    "VehicleSpec",
    "VqaQuestion",
    "aggregate_runs",
    "answer_pipeline",
    "assemble_context",
    "class_distribution",
    "cosine_similarity",
    "generate_synthetic_corpus",
    "load_snapshot",
    "make_record",
    "normalize",
    "parse_manifest",
    "parse_vehicle_specs",
    "render_report",
    "stratified_split",
    "stub_generate",
]
