from .data import (DataSplits, Dataset, dataset_from_bytes, dataset_to_bytes,
                   load_dataset, make_synthetic_dataset, read_logits,
                   save_dataset, save_json, write_logits)
from .metrics import (CorrelationReport, VarianceRatios,
                      layer_correlation_report, variance_ratio)
from .sweep import (CSV_HEADER, METHODS, SweepConfig, compress, format_rows,
                    parse_rows, run_sweep)
from .train import (ARCHITECTURES, TrainConfig, TrainHistory, build_network,
                    evaluate, predict_logits, train)

__all__ = [
    "ARCHITECTURES", "CSV_HEADER", "CorrelationReport", "DataSplits",
    "Dataset", "METHODS", "SweepConfig", "TrainConfig", "TrainHistory",
    "VarianceRatios", "build_network", "compress", "dataset_from_bytes",
    "dataset_to_bytes", "evaluate", "format_rows", "layer_correlation_report",
    "load_dataset", "make_synthetic_dataset", "parse_rows", "predict_logits",
    "read_logits", "run_sweep", "save_dataset", "save_json", "train",
    "variance_ratio", "write_logits",
]
