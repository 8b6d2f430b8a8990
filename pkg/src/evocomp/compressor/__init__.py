from evocomp.compressor.model import (
    CompressorConfig,
    CompressorParams,
    ForwardOutput,
    adapt_dim,
    forward,
    grad_check,
    init_params,
    load_params,
    ratio_to_r,
    save_params,
    select_top_r,
)
from evocomp.compressor.training import TrainResult, train, write_history_csv

__all__ = [
    "CompressorConfig",
    "CompressorParams",
    "ForwardOutput",
    "TrainResult",
    "adapt_dim",
    "forward",
    "grad_check",
    "init_params",
    "load_params",
    "ratio_to_r",
    "save_params",
    "select_top_r",
    "train",
    "write_history_csv",
]
