"""Near-zero-cost auxiliary estimators read out of dynamic channel-pruning masks."""

__version__ = "0.1.0"

from .core import (
    AudioStream,
    BaselineFeatures,
    FilteredMasks,
    MaskTensor,
    StftConfig,
    StreamManifest,
    TargetSeries,
    frame_index_of,
    read_mask_file,
    write_mask_file,
)
from .features import filter_masks, rank_features, restrict_blocks, stft_logmag, zscore
from .inferbank import PredictorBank, compile_bank, infer_frame, op_count, stream_infer
from .probes import FitConfig, ProbeModel, fit_logistic, fit_ridge, predict_frame, train_suite

__all__ = [
    "AudioStream", "BaselineFeatures", "FilteredMasks", "MaskTensor", "StftConfig",
    "StreamManifest", "TargetSeries", "frame_index_of", "read_mask_file", "write_mask_file",
    "filter_masks", "rank_features", "restrict_blocks", "stft_logmag", "zscore",
    "PredictorBank", "compile_bank", "infer_frame", "op_count", "stream_infer",
    "FitConfig", "ProbeModel", "fit_logistic", "fit_ridge", "predict_frame", "train_suite",
]
