"""Retinal fundus image grading.

Grades diabetic retinopathy on a five-grade scale through a two-stage
classifier cascade and diabetic macular edema on a three-grade scale through
a pair of binary detectors joined by a rule table. Predictions come from
ensembles of models voting over ten crops of each image, after benchmark
relative pruning of weak ensemble members.
"""

from .backends import (
    FINAL_CLASS_SETS,
    TASK_CLASS_SETS,
    ClassSet,
    Manifest,
    ModelHandle,
    Prediction,
    class_set_for,
    final_class_set,
    load_manifest,
    predict,
    update_retained,
    write_manifest,
)
from .dme import DME_GRADES, DMEDecision, decision_table, grade_dme, grade_dme_batch
from .dr import DR_GRADES, DRDecision, grade_dr, grade_dr_batch
from .ensemble import (
    EnsembleSpec,
    PruneReport,
    VoteRecord,
    ensemble_vote,
    exact_threshold,
    model_vote,
    prune,
    vote,
)
from .errors import BackendError, ConfigError, FundusGradeError, InvalidInputError
from .evaluation import (
    ConfusionMatrix,
    EvalResult,
    LabeledDataset,
    confusion,
    evaluate,
    load_labels,
    split_dataset,
    task_dataset,
    task_truth,
    task_view,
)
from .fixtures import ModelProfile, make_dme_fixture, make_dr_fixture
from .golden import GOLDEN_RECORDS, golden_report, run_golden_checks
from .preprocess import (
    ChannelStats,
    CropSet,
    RawImage,
    TensorImage,
    load_image,
    minmax_normalize,
    preprocess_image,
    resize_bilinear,
    standardize,
    ten_crop,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ChannelStats",
    "ClassSet",
    "ConfigError",
    "ConfusionMatrix",
    "CropSet",
    "DME_GRADES",
    "DMEDecision",
    "DR_GRADES",
    "DRDecision",
    "EnsembleSpec",
    "EvalResult",
    "FINAL_CLASS_SETS",
    "FundusGradeError",
    "GOLDEN_RECORDS",
    "InvalidInputError",
    "LabeledDataset",
    "Manifest",
    "ModelHandle",
    "ModelProfile",
    "Prediction",
    "PruneReport",
    "RawImage",
    "TASK_CLASS_SETS",
    "TensorImage",
    "VoteRecord",
    "class_set_for",
    "confusion",
    "decision_table",
    "ensemble_vote",
    "evaluate",
    "exact_threshold",
    "final_class_set",
    "golden_report",
    "grade_dme",
    "grade_dme_batch",
    "grade_dr",
    "grade_dr_batch",
    "load_image",
    "load_labels",
    "load_manifest",
    "make_dme_fixture",
    "make_dr_fixture",
    "minmax_normalize",
    "model_vote",
    "predict",
    "preprocess_image",
    "prune",
    "resize_bilinear",
    "run_golden_checks",
    "split_dataset",
    "standardize",
    "task_dataset",
    "task_truth",
    "task_view",
    "ten_crop",
    "update_retained",
    "vote",
    "write_manifest",
]
