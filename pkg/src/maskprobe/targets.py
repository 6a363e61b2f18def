"""Frame-aligned ground truths: VAD, per-frame SNR, windowed SI-SDR/PESQ, ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    BINARY,
    CONTINUOUS,
    AudioStream,
    StftConfig,
    TargetSeries,
    read_target_rows,
)

log = logging.getLogger(__name__)

DB_FLOOR = -50.0
DB_CEIL = 30.0


@dataclass(frozen=True)
class VadParams:
    smooth_len: int = 11
    threshold_db: float = -40.0
    reference_percentile: float = 95.0
    second_smooth_len: int = 11
    second_threshold: float = 0.5

    def __post_init__(self):
        for n in (self.smooth_len, self.second_smooth_len):
            if n < 1 or n % 2 == 0:
                raise ValueError("smoothing lengths must be odd and >= 1")
        if self.threshold_db >= 0:
            raise ValueError("threshold_db must be negative")
        if not 0 < self.second_threshold < 1:
            raise ValueError("second_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class WindowedMetricConfig:
    window_len: float = 1.0
    overlap: float = 0.75
    pad: float = 0.0
    clamp: tuple[float, float] | None = (DB_FLOOR, DB_CEIL)

    def __post_init__(self):
        if self.window_len <= 0:
            raise ValueError("window_len must be positive")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_len * sample_rate))

    def hop_samples(self, sample_rate: int) -> int:
        return max(1, int(round(self.window_len * (1 - self.overlap) * sample_rate)))


SISDR_WINDOWS = WindowedMetricConfig(1.0, 0.75, 0.0, (DB_FLOOR, DB_CEIL))
PESQ_WINDOWS = WindowedMetricConfig(3.0, 0.75, 0.5, None)


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Strided ``(L, window_len)`` view of ``x`` without padding."""
    x = np.asarray(x, dtype=np.float64)
    L = cfg.frame_count(x.size)
    if L == 0:
        raise ValueError(f"signal of {x.size} samples is shorter than one window ({cfg.window_len})")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)
    return view[:: cfg.hop_len][:L]


def rms_envelope(a, cfg: StftConfig = StftConfig()) -> np.ndarray:
    samples = a.samples if isinstance(a, AudioStream) else a
    frames = frame_signal(samples, cfg)
    return np.sqrt(np.mean(frames * frames, axis=1))


def moving_average(x: np.ndarray, n: int) -> np.ndarray:
    """Centered (zero-phase) moving average with edge replication."""
    if n == 1:
        return np.asarray(x, dtype=np.float64).copy()
    half = n // 2
    padded = np.pad(np.asarray(x, dtype=np.float64), half, mode="edge")
    c = np.concatenate(([0.0], np.cumsum(padded)))
    return (c[n:] - c[:-n]) / n


def vad_from_envelope(rms: np.ndarray, params: VadParams = VadParams(), name="vad") -> TargetSeries:
    rms = np.asarray(rms, dtype=np.float64)
    if rms.size == 0:
        raise ValueError("empty envelope")
    reference = np.percentile(rms, params.reference_percentile)
    threshold = reference * 10.0 ** (params.threshold_db / 20.0)
    coarse = (moving_average(rms, params.smooth_len) > threshold).astype(np.float64)
    fine = moving_average(coarse, params.second_smooth_len) > params.second_threshold
    if reference == 0:
        fine[:] = False
    return TargetSeries(name, BINARY, fine.astype(np.int64), np.ones(rms.size, dtype=bool))


def frame_snr(rms_s, rms_n, name="snr") -> TargetSeries:
    """``20 log10(rms_s / rms_n)`` clamped to [-50, 30] dB.

    Silent speech frames map to -50 dB (checked first), silent noise to 30 dB.
    """
    rms_s = np.asarray(rms_s, dtype=np.float64)
    rms_n = np.asarray(rms_n, dtype=np.float64)
    if rms_s.shape != rms_n.shape:
        raise ValueError("RMS envelopes differ in length")
    out = np.empty_like(rms_s)
    zero_s = rms_s == 0
    zero_n = (rms_n == 0) & ~zero_s
    ok = ~(zero_s | zero_n)
    out[ok] = 20.0 * np.log10(rms_s[ok] / rms_n[ok])
    out[zero_s] = DB_FLOOR
    out[zero_n] = DB_CEIL
    np.clip(out, DB_FLOOR, DB_CEIL, out=out)
    return TargetSeries(name, CONTINUOUS, out, np.ones(out.size, dtype=bool))


def window_schedule(n_samples: int, cfg: WindowedMetricConfig, sample_rate: int) -> np.ndarray:
    """``(K, 2)`` array of ``[start, stop)`` sample spans of the metric windows."""
    win = cfg.window_samples(sample_rate)
    hop = cfg.hop_samples(sample_rate)
    if n_samples < win:
        raise ValueError(f"stream of {n_samples} samples shorter than metric window ({win})")
    starts = np.arange(0, n_samples - win + 1, hop)
    return np.stack([starts, starts + win], axis=1)


def padded_windows(ref: AudioStream, est: AudioStream, cfg: WindowedMetricConfig = PESQ_WINDOWS):
    """Yield ``(start, stop, ref_chunk, est_chunk)`` with ``cfg.pad`` s of silence on both ends.

    This is the exact chunking an external per-window metric (e.g. PESQ) has
    to see so that its values line up with :func:`upsample_windowed`.
    """
    _check_pair(ref, est)
    pad = int(round(cfg.pad * ref.sample_rate))
    z = np.zeros(pad)
    for a, b in window_schedule(len(ref), cfg, ref.sample_rate):
        yield (int(a), int(b),
               np.concatenate([z, ref.samples[a:b], z]),
               np.concatenate([z, est.samples[a:b], z]))


def _check_pair(ref: AudioStream, est: AudioStream):
    if len(ref) != len(est) or ref.sample_rate != est.sample_rate:
        raise ValueError("reference and estimate must share length and rate")


def sisdr(ref: np.ndarray, est: np.ndarray, clamp=(DB_FLOOR, DB_CEIL)) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    rr = ref @ ref
    if rr == 0:
        log.debug("silent reference window, SI-SDR set to floor")
        return clamp[0] if clamp else -np.inf
    target = (est @ ref / rr) * ref
    err = est - target
    num, den = target @ target, err @ err
    with np.errstate(divide="ignore"):
        if den == 0:
            val = np.inf
        elif num == 0:
            val = -np.inf
        else:
            val = 10.0 * np.log10(num / den)
    if clamp:
        val = float(np.clip(val, clamp[0], clamp[1]))
    return float(val)


def windowed_sisdr(ref: AudioStream, est: AudioStream, cfg: WindowedMetricConfig = SISDR_WINDOWS) -> np.ndarray:
    _check_pair(ref, est)
    spans = window_schedule(len(ref), cfg, ref.sample_rate)
    return np.array([sisdr(ref.samples[a:b], est.samples[a:b], cfg.clamp) for a, b in spans])


def hann_squared(u: np.ndarray) -> np.ndarray:
    """Squared Hann taper on ``u`` in [0, 1]; zero outside."""
    u = np.asarray(u, dtype=np.float64)
    w = np.where((u >= 0) & (u <= 1), 0.5 - 0.5 * np.cos(2 * np.pi * u), 0.0)
    return w * w


def upsample_weights(n_windows: int, cfg: WindowedMetricConfig, stft: StftConfig, n_frames: int) -> np.ndarray:
    """``(L, K)`` squared-Hann weights of window ``k`` at frame ``l``.

    Positions are compared in samples using frame centers, so window and hop
    lengths need not be whole numbers of STFT frames.
    """
    rate = stft.sample_rate
    win = cfg.window_samples(rate)
    hop = cfg.hop_samples(rate)
    centers = np.arange(n_frames) * stft.hop_len + stft.window_len / 2.0
    starts = np.arange(n_windows) * hop
    u = (centers[:, None] - starts[None, :]) / win
    return hann_squared(u)


def upsample_windowed(values, cfg: WindowedMetricConfig, stft: StftConfig, n_frames: int,
                      name="windowed") -> TargetSeries:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no window values to upsample")
    W = upsample_weights(values.size, cfg, stft, n_frames)
    total = W.sum(axis=1)
    out = np.empty(n_frames)
    ok = total > 0
    out[ok] = (W[ok] @ values) / total[ok]
    if not np.all(ok):
        rate = stft.sample_rate
        win_centers = np.arange(values.size) * cfg.hop_samples(rate) + cfg.window_samples(rate) / 2.0
        centers = np.arange(n_frames)[~ok] * stft.hop_len + stft.window_len / 2.0
        nearest = np.argmin(np.abs(centers[:, None] - win_centers[None, :]), axis=1)
        out[~ok] = values[nearest]
    return TargetSeries(name, CONTINUOUS, out, np.ones(n_frames, dtype=bool))


def ingest_external_target(path, name: str, kind: str = CONTINUOUS, iqr=None,
                           n_frames: int | None = None, n_classes=None,
                           zero_invalid: bool | None = None) -> TargetSeries:
    """Read an externally computed per-frame series (PESQ, F0, ...).

    For F0-like series (``zero_invalid``, default on when ``name`` starts with
    "f0") frames with value 0 are marked invalid.
    """
    values, valid = read_target_rows(path)
    if n_frames is not None and values.size != n_frames:
        raise ValueError(f"{path}: {values.size} frames, expected {n_frames}")
    if zero_invalid is None:
        zero_invalid = name.lower().startswith("f0")
    if zero_invalid:
        valid = valid & (values != 0)
    if kind != CONTINUOUS:
        values = values.astype(np.int64)
    return TargetSeries(name, kind, values, valid, n_classes, iqr)


def gate_by_vad(ts: TargetSeries, vad: TargetSeries) -> TargetSeries:
    if vad.kind != BINARY:
        raise ValueError("VAD oracle must be a binary series")
    if len(ts) != len(vad):
        raise ValueError("series lengths differ")
    return ts.with_valid(ts.valid & vad.valid & (vad.values == 1))
