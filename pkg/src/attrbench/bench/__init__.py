from .metrics import (
    MetricsError,
    RobustnessReport,
    confusion_matrix,
    miou,
    miou_from_confusion,
    mr_from_subsets,
)
from .build import (
    Backends,
    BackendError,
    BenchmarkSet,
    SalientSample,
    SampleRecord,
    SceneSample,
    build_benchmark,
    combined_variation,
    generate_dataset,
    load_benchmark,
    parse_plan,
    robustness_report,
    select_salient,
    subset_miou,
    training_triples,
)
from .report import write_reports, load_reports

__all__ = [
    "MetricsError",
    "RobustnessReport",
    "confusion_matrix",
    "miou",
    "miou_from_confusion",
    "mr_from_subsets",
    "Backends",
    "BackendError",
    "BenchmarkSet",
    "SalientSample",
    "SampleRecord",
    "SceneSample",
    "build_benchmark",
    "combined_variation",
    "generate_dataset",
    "load_benchmark",
    "parse_plan",
    "robustness_report",
    "select_salient",
    "subset_miou",
    "training_triples",
    "write_reports",
    "load_reports",
]
