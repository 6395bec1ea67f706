from .config import ConfigError, RunConfig, VARIANTS, load_run_config, \
    run_config_from_mapping, with_overrides
from .model import Model
from .training import (
    TrainingAbort,
    TrainResult,
    ablate,
    degree_sweep,
    export_graph,
    fit_vae,
    metrics_fingerprint,
    train,
)

__all__ = [
    "ConfigError",
    "Model",
    "RunConfig",
    "TrainResult",
    "TrainingAbort",
    "VARIANTS",
    "ablate",
    "degree_sweep",
    "export_graph",
    "fit_vae",
    "load_run_config",
    "metrics_fingerprint",
    "run_config_from_mapping",
    "train",
    "with_overrides",
]
