"""Probe input matrices: variance-filtered masks, baselines and ranked subsets."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .core import AudioStream, BaselineFeatures, FilteredMasks, MaskTensor, StftConfig
from .targets import frame_signal

DEFAULT_TAU = 0.005
LOG_EPS = 1e-9


def filter_masks(G: MaskTensor | FilteredMasks, tau: float = DEFAULT_TAU) -> FilteredMasks:
    """Keep channels whose population standard deviation exceeds ``tau``.

    Applied to an already filtered set the original channel map is kept.
    """
    if G.n_frames < 2:
        raise ValueError("need at least 2 frames to estimate channel std")
    std = G.bits.astype(np.float64).std(axis=0)
    keep = np.flatnonzero(std > tau)
    if isinstance(G, FilteredMasks):
        cmap = G.channel_map[keep]
    else:
        cmap = keep
    return FilteredMasks(G.bits[:, keep], cmap, std[keep], G.n_blocks, G.channels_per_block, tau)


def restrict_blocks(fm: FilteredMasks, blocks: Iterable[int]) -> FilteredMasks:
    blocks = sorted(set(int(b) for b in blocks))
    if any(b < 0 or b >= fm.n_blocks for b in blocks):
        raise ValueError(f"block index out of range [0, {fm.n_blocks})")
    keep = np.flatnonzero(np.isin(fm.blocks, blocks))
    if keep.size == 0:
        raise ValueError(f"no kept channels in blocks {blocks}")
    return select_columns(fm, keep)


def select_columns(fm: FilteredMasks, cols: Sequence[int]) -> FilteredMasks:
    """Subset of kept channels by column position; output stays in channel order."""
    cols = np.sort(np.asarray(cols, dtype=np.int64))
    return FilteredMasks(fm.bits[:, cols], fm.channel_map[cols], fm.channel_std[cols],
                         fm.n_blocks, fm.channels_per_block, fm.tau)


def normalize_coefficients(weights: np.ndarray, feature_std: np.ndarray):
    """Scale coefficients by their input's std, then each row to unit l2 norm.

    Returns ``(normalized, zero_rows)``; all-zero rows stay zero.
    """
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64)) * np.asarray(feature_std, dtype=np.float64)
    norms = np.linalg.norm(W, axis=1)
    zero = norms == 0
    out = np.zeros_like(W)
    out[~zero] = W[~zero] / norms[~zero, None]
    return out, zero


def informativeness(models, channel_std) -> np.ndarray:
    """Per-channel l2 norm of normalized coefficients across all model rows."""
    channel_std = np.asarray(channel_std, dtype=np.float64)
    rows = []
    for m in models:
        W = np.atleast_2d(m.weights)
        if W.shape[1] != channel_std.size:
            raise ValueError(
                f"model {getattr(m, 'name', '?')} has {W.shape[1]} features, expected {channel_std.size}"
            )
        rows.append(normalize_coefficients(W, channel_std)[0])
    if not rows:
        raise ValueError("no models to rank")
    return np.linalg.norm(np.vstack(rows), axis=0)


def rank_features(models, channel_std) -> np.ndarray:
    """Column indices sorted by descending informativeness, ties by index."""
    score = informativeness(models, channel_std)
    return np.lexsort((np.arange(score.size), -score))


def top_k(fm: FilteredMasks, models, k: int = 64) -> FilteredMasks:
    return select_columns(fm, rank_features(models, fm.channel_std)[:k])


def stft(x, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex ``(L, F)`` STFT with a periodic Hann window, no padding."""
    samples = x.samples if isinstance(x, AudioStream) else x
    frames = frame_signal(samples, cfg) * hann_window(cfg.window_len)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def hann_window(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_logmag(x, cfg: StftConfig = StftConfig(), fit_stats=None, normalize=True) -> BaselineFeatures:
    """Log-magnitude spectrogram ``log(|X| + 1e-9)``, z-scored per bin."""
    logmag = np.log(np.abs(stft(x, cfg)) + LOG_EPS)
    if not normalize:
        return BaselineFeatures("stft-logmag", logmag)
    Z, (mean, std) = zscore(logmag, fit_stats)
    return BaselineFeatures("stft-logmag", Z, mean, std)


def zscore(X: np.ndarray, fit_stats=None):
    """Standardize columns; returns ``(X_norm, (mean, std))``.

    Population std is used.  Columns with zero std map to zeros.
    """
    X = np.asarray(X, dtype=np.float64)
    if fit_stats is None:
        if X.shape[0] < 2:
            raise ValueError("need at least 2 rows to fit z-score stats")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in fit_stats)
        if mean.shape != (X.shape[1],) or std.shape != (X.shape[1],):
            raise ValueError(f"stats have dimension {mean.shape}, matrix has {X.shape[1]} columns")
    out = np.zeros_like(X)
    ok = std > 0
    out[:, ok] = (X[:, ok] - mean[ok]) / std[ok]
    return out, (mean, std)
