"""Vision-language state space model with a manipulation policy head."""

from ._core import (
    CheckpointError,
    DataError,
    Error,
    Image,
    IoError,
    Model,
    NumericError,
    ShapeError,
    attention,
    bench_scaling,
    collect_episode,
    discretize_zoh,
    evaluate,
    read_rmim,
    scene_image,
    selective_scan,
    write_rmim,
)

__all__ = [
    "CheckpointError",
    "DataError",
    "Error",
    "Image",
    "IoError",
    "Model",
    "NumericError",
    "ShapeError",
    "attention",
    "bench_scaling",
    "collect_episode",
    "discretize_zoh",
    "evaluate",
    "read_rmim",
    "scene_image",
    "selective_scan",
    "write_rmim",
]
