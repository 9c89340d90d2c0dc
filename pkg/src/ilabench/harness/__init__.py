"""Training, transfer evaluation, analysis experiments and the CLI."""

from .batchio import decode_batch, encode_batch, load_batch, originals_hash, save_batch
from .experiments import (
    BoundaryGrid,
    PipelineConfig,
    PipelineResult,
    angle_by_layer,
    boundary_grid,
    delta_angles,
    linearity_check,
    plane_basis,
    rank_correlation,
    run_pipeline,
    sweep,
    transfer_matrix,
)
from .manifest import ExperimentManifest, run_id
from .reports import AngleProfile, TableReport, TransferReport, TransferRow, report_csv, write_report
from .training import TrainConfig, accuracy, train_model

__all__ = [
    "AngleProfile", "BoundaryGrid", "ExperimentManifest", "PipelineConfig", "PipelineResult",
    "TableReport", "TrainConfig", "TransferReport", "TransferRow", "accuracy", "angle_by_layer",
    "boundary_grid", "decode_batch", "delta_angles", "encode_batch", "linearity_check", "load_batch",
    "originals_hash", "plane_basis", "rank_correlation", "report_csv", "run_id", "run_pipeline",
    "save_batch", "sweep", "train_model", "transfer_matrix", "write_report",
]
