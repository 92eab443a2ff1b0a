"""CRP-AML network: feature fusion, context encoders, training, evaluation."""

from .features import (
    AssembledDataset,
    DerivedFeatures,
    FeatureSchema,
    FittedArtifacts,
    RawFeatures,
    assemble_input,
    extract_features,
    fit_artifacts,
    fit_schema,
    stratified_split,
)
from .network import CRPNetwork, NetworkConfig, load_checkpoint, save_checkpoint
from .training import (
    Prediction,
    TrainResult,
    ablate,
    evaluate,
    score,
    train,
    train_on_dataset,
)

__all__ = [
    "AssembledDataset",
    "CRPNetwork",
    "DerivedFeatures",
    "FeatureSchema",
    "FittedArtifacts",
    "NetworkConfig",
    "Prediction",
    "RawFeatures",
    "TrainResult",
    "ablate",
    "assemble_input",
    "evaluate",
    "extract_features",
    "fit_artifacts",
    "fit_schema",
    "load_checkpoint",
    "save_checkpoint",
    "score",
    "stratified_split",
    "train",
    "train_on_dataset",
]
