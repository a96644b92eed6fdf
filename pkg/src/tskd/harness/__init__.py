"""Experiment orchestration: configs, grids, multi-seed tables, PCA export and the CLI."""
from .config import ExperimentConfig, GridSpec, HeadChoice, load_config
from .experiments import (
    Experiment,
    GridError,
    RunSpec,
    run_ablation_table5,
    run_ablation_table6,
    run_grid,
    run_matrix,
)
from .pca import ExportError, export_pca, fit_pca
from .report import ReportTable, RunResult, aggregate

__all__ = [
    "Experiment",
    "ExperimentConfig",
    "ExportError",
    "GridError",
    "GridSpec",
    "HeadChoice",
    "ReportTable",
    "RunResult",
    "RunSpec",
    "aggregate",
    "export_pca",
    "fit_pca",
    "load_config",
    "run_ablation_table5",
    "run_ablation_table6",
    "run_grid",
    "run_matrix",
]
