"""Membership inference against contrastively pre-trained image encoders.

The pieces compose bottom-up: :mod:`data` (datasets, splits, augmentation),
:mod:`contrastive` (encoders and pre-training), :mod:`encoder` (black-box
access), :mod:`membership` (similarity features), :mod:`classifiers`,
:mod:`baselines`, :mod:`evaluation`, and :mod:`experiment` / :mod:`cli` for
orchestrated runs.
"""
from .classifiers import (
    MEMBER,
    NON_MEMBER,
    SetClassifier,
    ThresholdClassifier,
    VectorClassifier,
    fit_threshold,
    infer_membership,
    load_classifier,
    save_classifier,
    train_set_classifier,
    train_vector_classifier,
)
from .data import AugmentationPipeline, DatasetSplit, augment, make_concat_nonmembers, make_splits
from .encoder import BlackBoxEncoder, connect_remote, embed_batch, load_local
from .evaluation import BackgroundKnowledge, EvaluationReport, evaluate
from .membership import (
    LabeledMembershipRecord,
    MembershipFeatureSet,
    build_inference_training_set,
    extract_membership_features,
    similarity,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationPipeline",
    "BackgroundKnowledge",
    "BlackBoxEncoder",
    "DatasetSplit",
    "EvaluationReport",
    "LabeledMembershipRecord",
    "MEMBER",
    "MembershipFeatureSet",
    "NON_MEMBER",
    "SetClassifier",
    "ThresholdClassifier",
    "VectorClassifier",
    "augment",
    "build_inference_training_set",
    "connect_remote",
    "embed_batch",
    "evaluate",
    "extract_membership_features",
    "fit_threshold",
    "infer_membership",
    "load_classifier",
    "load_local",
    "make_concat_nonmembers",
    "make_splits",
    "save_classifier",
    "similarity",
    "train_set_classifier",
    "train_vector_classifier",
]
