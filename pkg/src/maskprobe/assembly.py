"""Build long continuous clean/noise/noisy streams from utterance and noise pools."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.io import wavfile

from .core import (
    BINARY,
    MULTICLASS,
    AudioStream,
    Segment,
    StftConfig,
    StreamManifest,
    TargetSeries,
    validate_manifest,
)

log = logging.getLogger(__name__)

GENDERS = ("M", "F")
DEFAULT_ACCENTS = ("English", "American", "Scottish", "Irish", "Canadian", "Other")
DEFAULT_NOISE_CATEGORIES = ("Domestic", "Office", "Public", "Transportation", "Street", "Artificial")
OTHER = "Other"


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    gender: str
    accent: str
    path: str = ""
    duration: float | None = None


@dataclass(frozen=True)
class NoiseExcerpt:
    excerpt_id: str
    noise_category: str
    path: str = ""
    duration: float | None = None


@dataclass(frozen=True)
class UtterancePool:
    entries: tuple
    split: str = "train"

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")


@dataclass(frozen=True)
class NoisePool:
    entries: tuple

    def __post_init__(self):
        ids = [e.excerpt_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("excerpt ids must be unique")


def read_speech_pool(path, split="train") -> UtterancePool:
    """CSV columns: id (or utterance_id), path, speaker_id, gender, accent[, duration]."""
    base = Path(path).parent
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            uid = row.get("utterance_id") or row["id"]
            p = Path(row["path"])
            entries.append(Utterance(
                uid, row["speaker_id"], row["gender"], row["accent"],
                str(p if p.is_absolute() else base / p),
                float(row["duration"]) if row.get("duration") else None,
            ))
    return UtterancePool(tuple(entries), split)


def read_noise_pool(path) -> NoisePool:
    """CSV columns: id (or excerpt_id), path, noise_category[, duration]."""
    base = Path(path).parent
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            eid = row.get("excerpt_id") or row["id"]
            p = Path(row["path"])
            entries.append(NoiseExcerpt(
                eid, row["noise_category"], str(p if p.is_absolute() else base / p),
                float(row["duration"]) if row.get("duration") else None,
            ))
    return NoisePool(tuple(entries))


def load_wav(path, sample_rate: int) -> np.ndarray:
    """Read a mono PCM16 or float32 WAV as float64 samples."""
    rate, data = wavfile.read(path)
    if rate != sample_rate:
        raise ValueError(f"{path}: sample rate {rate} != configured {sample_rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise ValueError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")


def extract_noise(noisy: AudioStream, clean: AudioStream) -> AudioStream:
    """Recover the additive noise excerpt ``x - s``."""
    if noisy.role != "noisy" or clean.role != "clean":
        raise ValueError(f"expected (noisy, clean) streams, got ({noisy.role}, {clean.role})")
    if noisy.sample_rate != clean.sample_rate:
        raise ValueError("sample rate mismatch")
    if len(noisy) != len(clean):
        raise ValueError(f"length mismatch: {len(noisy)} vs {len(clean)}")
    return AudioStream(noisy.samples - clean.samples, noisy.sample_rate, "noise")


def _stratum(entry, keys):
    try:
        return tuple(getattr(entry, k) for k in keys)
    except AttributeError as e:
        raise ValueError(f"entry {entry!r} lacks stratum key: {e}") from None


def stratified_order(entries: Sequence, strata_keys: Sequence[str], seed: int) -> list:
    """Seeded permutation that keeps strata balanced in every prefix.

    Entries are shuffled within each stratum, then drawn round-robin with the
    stratum order reshuffled every round.  Strata that run out drop out of the
    rotation, so among strata that still have entries the prefix counts never
    differ by more than one.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("cannot order an empty pool")
    rng = np.random.default_rng(seed)
    groups: dict[tuple, list] = {}
    for e in entries:
        groups.setdefault(_stratum(e, strata_keys), []).append(e)
    names = sorted(groups)
    queues = []
    for name in names:
        g = groups[name]
        queues.append([g[i] for i in rng.permutation(len(g))])
    out = []
    pos = [0] * len(queues)
    while len(out) < len(entries):
        live = [i for i in range(len(queues)) if pos[i] < len(queues[i])]
        for i in (live[j] for j in rng.permutation(len(live))):
            out.append(queues[i][pos[i]])
            pos[i] += 1
    return out


SAMPLE_GRID = 2.0 ** -30


def _on_grid(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    if a.size and np.max(np.abs(a)) >= 2.0 ** 22:
        raise ValueError("sample magnitude too large for exact mixing")
    return np.round(a / SAMPLE_GRID) * SAMPLE_GRID


def assemble_stream(
    speech_order: Sequence[Utterance],
    noise_order: Sequence[NoiseExcerpt],
    seed: int,
    cfg: StftConfig = StftConfig(),
    loader: Callable[[object], np.ndarray] | None = None,
    split: str = "train",
):
    """Concatenate utterances and noise excerpts into one continuous mixture.

    ``loader`` maps an entry to its float64 samples; by default the entry's
    WAV file is read.  Samples are snapped to a 2**-30 grid (a no-op for
    PCM16 data, below -180 dBFS for float32), which makes every float64 sum
    on the grid exact, so ``x - n == s`` holds bit for bit.  Noise is looped when it runs out and truncated to the
    speech length; gains are left untouched.

    Returns ``(s, n, x, manifest)``.
    """
    if not speech_order or not noise_order:
        raise ValueError("speech and noise orders must be non-empty")
    if loader is None:
        loader = lambda e: load_wav(e.path, cfg.sample_rate)  # noqa: E731

    pieces, spans = [], []
    pos = 0
    for utt in speech_order:
        a = _on_grid(loader(utt))
        pieces.append(a)
        spans.append((pos, pos + a.size))
        pos += a.size
    s = np.concatenate(pieces)
    total = s.size

    # continuous noise track with its own timeline
    n = np.empty(total)
    cat_at = np.empty(total, dtype=object)
    seams = []
    filled = 0
    k = 0
    while filled < total:
        if k and k % len(noise_order) == 0:
            seams.append(filled)
            log.info("noise pool exhausted at sample %d, looping", filled)
        exc = noise_order[k % len(noise_order)]
        a = _on_grid(loader(exc))
        if a.size == 0:
            raise ValueError(f"noise excerpt {exc.excerpt_id} is empty")
        take = min(a.size, total - filled)
        n[filled:filled + take] = a[:take]
        cat_at[filled:filled + take] = exc.noise_category
        filled += take
        k += 1
    x = s + n

    h = cfg.hop_len
    segments = []
    for utt, (a, b) in zip(speech_order, spans):
        segments.append(Segment(
            utt.utterance_id, utt.speaker_id, utt.gender, utt.accent,
            str(cat_at[a]) if b > a else str(cat_at[max(a - 1, 0)]),
            a // h, b // h,
        ))
    manifest = StreamManifest(
        tuple(segments), split, int(seed), cfg, cfg.frame_count(total),
        tuple(sp // h for sp in seams),
    )
    validate_manifest(manifest)
    rate = cfg.sample_rate
    return (
        AudioStream(s, rate, "clean"),
        AudioStream(n, rate, "noise"),
        AudioStream(x, rate, "noisy"),
        manifest,
    )


def top_accents(entries: Sequence[Utterance], k: int = 5) -> tuple[str, ...]:
    """The ``k`` most frequent accents (ties by name) followed by "Other"."""
    counts = Counter(e.accent for e in entries)
    ranked = sorted(counts, key=lambda a: (-counts[a], a))
    return tuple(ranked[:k]) + (OTHER,)


def label_vocabulary(key: str, manifest: StreamManifest | None = None,
                     accents=DEFAULT_ACCENTS, noise_categories=DEFAULT_NOISE_CATEGORIES):
    if key == "gender":
        return GENDERS
    if key == "accent":
        return tuple(accents)
    if key == "noise_category":
        return tuple(noise_categories)
    if key == "speaker":
        if manifest is None:
            raise ValueError("speaker vocabulary needs a manifest")
        return tuple(sorted(manifest.speakers))
    raise ValueError(f"unknown label key {key!r}")


def labels_from_manifest(manifest: StreamManifest, key: str, vocabulary=None,
                         n_frames: int | None = None) -> TargetSeries:
    """Per-frame class index of a segment attribute.

    Accents outside the vocabulary fall into "Other" when the vocabulary has
    it; any other unknown value is an error.
    """
    vocab = tuple(vocabulary) if vocabulary is not None else label_vocabulary(key, manifest)
    index = {v: i for i, v in enumerate(vocab)}
    attr = "speaker_id" if key == "speaker" else key
    L = n_frames if n_frames is not None else manifest.n_frames
    if L is None:
        L = manifest.segments[-1].end_frame
    values = np.zeros(L, dtype=np.int64)
    for seg in manifest.segments:
        label = getattr(seg, attr)
        if label not in index:
            if key == "accent" and OTHER in index:
                label = OTHER
            else:
                raise ValueError(f"{key} value {label!r} not in vocabulary {vocab}")
        values[seg.start_frame:min(seg.end_frame, L)] = index[label]
    kind = BINARY if len(vocab) == 2 else MULTICLASS
    return TargetSeries(key, kind, values, np.ones(L, dtype=bool), len(vocab))
