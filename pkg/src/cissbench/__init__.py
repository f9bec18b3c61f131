"""Class-incremental semantic segmentation benchmark with forgetting diagnostics."""

__version__ = "0.1.0"

from .taskstream import (  # noqa: E402
    BACKGROUND_ID,
    IGNORE_ID,
    REGIMES,
    ClassCatalog,
    SegDataset,
    SyntheticSceneConfig,
    TaskDefinition,
    build_task_stream,
    generate_synthetic_dataset,
    make_tasks,
)
from .segnet import MiniSeg, load_snapshot, save_snapshot  # noqa: E402
from .trainer import METHODS, TrainConfig, run_sequence, train_offline, train_task  # noqa: E402

__all__ = [
    "BACKGROUND_ID",
    "IGNORE_ID",
    "METHODS",
    "REGIMES",
    "ClassCatalog",
    "MiniSeg",
    "SegDataset",
    "SyntheticSceneConfig",
    "TaskDefinition",
    "TrainConfig",
    "build_task_stream",
    "generate_synthetic_dataset",
    "load_snapshot",
    "make_tasks",
    "run_sequence",
    "save_snapshot",
    "train_offline",
    "train_task",
]
