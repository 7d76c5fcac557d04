"""Relation-oriented clustering: discover novel relation types in unlabeled
entity-pair data by learning cluster-friendly representations from labeled
pre-defined relations."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    LinearAdapter,
    RelationInstance,
    SyntheticSpec,
    encode_entity_pair,
    generate_synthetic,
    load_dataset,
    save_instances,
)
from .metrics import MetricsReport, adjusted_rand_index, b_cubed, v_measure
from .train import TrainConfig, TrainReport, evaluate, train

__all__ = [
    "Dataset",
    "LinearAdapter",
    "MetricsReport",
    "RelationInstance",
    "SyntheticSpec",
    "TrainConfig",
    "TrainReport",
    "adjusted_rand_index",
    "b_cubed",
    "encode_entity_pair",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "save_instances",
    "train",
    "v_measure",
]
