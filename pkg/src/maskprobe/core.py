"""Shared domain types, frame arithmetic and on-disk containers.

Container formats
-----------------
DCPM mask file::

    bytes 0-3   magic b"DCPM"
    byte  4     version (1)
    bytes 5-8   L      (u32, little endian)
    bytes 9-12  I      (u32)
    bytes 13-16 C_res  (u32)
    then L rows of ceil(I * C_res / 8) bytes, LSB-first bit packing

Target sidecar: CSV with header ``frame,value,valid``.

Baseline feature matrix: u32 L, u32 D header followed by float32 LE values.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DCPM_MAGIC = b"DCPM"
DCPM_VERSION = 1
_DCPM_HEADER = struct.Struct("<4sBIII")

BINARY = "binary"
MULTICLASS = "multiclass"
CONTINUOUS = "continuous"
KINDS = (BINARY, MULTICLASS, CONTINUOUS)


class ContainerError(ValueError):
    """Raised when an on-disk container is malformed."""


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_len: int = 512
    hop_len: int = 256
    fft_size: int = 512

    def __post_init__(self):
        if not (0 < self.hop_len <= self.window_len <= self.fft_size):
            raise ValueError(
                f"need 0 < hop_len <= window_len <= fft_size, got "
                f"{self.hop_len}, {self.window_len}, {self.fft_size}"
            )

    @property
    def bin_count(self) -> int:
        return self.fft_size // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        """Number of full frames in a signal of ``n_samples`` (no padding)."""
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop_len + 1

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "window_len": self.window_len,
            "hop_len": self.hop_len,
            "fft_size": self.fft_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**{k: int(d[k]) for k in ("sample_rate", "window_len", "hop_len", "fft_size") if k in d})


def frame_index_of(sample_pos, cfg: StftConfig, n_frames: int | None = None) -> int:
    """Frame index containing ``sample_pos``: ``floor(pos / hop)``.

    When ``n_frames`` is given the result is clamped to ``[0, n_frames)``.
    """
    if sample_pos < 0:
        raise ValueError("sample_pos must be non-negative")
    idx = int(np.floor(sample_pos / cfg.hop_len))
    if n_frames is not None:
        idx = min(max(idx, 0), max(n_frames - 1, 0))
    return idx


# --------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class MaskTensor:
    """Per-frame binary gating decisions, shape ``(L, I * C_res)``."""

    bits: np.ndarray
    n_blocks: int
    channels_per_block: int

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[1] != self.n_blocks * self.channels_per_block:
            raise ValueError(
                f"bits must be L x {self.n_blocks * self.channels_per_block}, got {bits.shape}"
            )
        if bits.size and not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask entries must be 0 or 1")
        bits = bits.astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def n_frames(self) -> int:
        return self.bits.shape[0]

    @property
    def n_channels(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def from_blocks(cls, g: np.ndarray) -> "MaskTensor":
        """Build from an ``(L, I, C_res)`` array."""
        g = np.asarray(g)
        L, I, C = g.shape
        return cls(g.reshape(L, I * C), I, C)

    def as_blocks(self) -> np.ndarray:
        return self.bits.reshape(self.n_frames, self.n_blocks, self.channels_per_block)


def flat_channel(block: int, channel: int, channels_per_block: int) -> int:
    return block * channels_per_block + channel


@dataclass(frozen=True)
class FilteredMasks:
    """Variance-filtered subset of a mask tensor."""

    bits: np.ndarray
    channel_map: np.ndarray
    channel_std: np.ndarray
    n_blocks: int
    channels_per_block: int
    tau: float | None = None

    def __post_init__(self):
        cmap = np.asarray(self.channel_map, dtype=np.int64)
        bits = np.asarray(self.bits, dtype=np.uint8)
        std = np.asarray(self.channel_std, dtype=np.float64)
        if bits.ndim != 2 or bits.shape[1] != cmap.size or std.size != cmap.size:
            raise ValueError("bits, channel_map and channel_std disagree on C_star")
        if cmap.size > 1 and np.any(np.diff(cmap) <= 0):
            raise ValueError("channel_map must be strictly increasing")
        if cmap.size and (cmap[0] < 0 or cmap[-1] >= self.n_blocks * self.channels_per_block):
            raise ValueError("channel_map entry out of range")
        for a in (cmap, bits, std):
            a.setflags(write=False)
        object.__setattr__(self, "channel_map", cmap)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "channel_std", std)

    @property
    def n_frames(self) -> int:
        return self.bits.shape[0]

    @property
    def n_kept(self) -> int:
        return self.channel_map.size

    @property
    def blocks(self) -> np.ndarray:
        """Processing block of every kept channel."""
        return self.channel_map // self.channels_per_block

    def sidecar(self) -> dict:
        return {
            "channel_map": self.channel_map.tolist(),
            "channel_std": self.channel_std.tolist(),
            "n_blocks": self.n_blocks,
            "channels_per_block": self.channels_per_block,
            "tau": self.tau,
        }


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack an ``(L, C)`` 0/1 matrix into ``(L, ceil(C/8))`` bytes, LSB first."""
    bits = np.asarray(bits, dtype=np.uint8)
    return np.packbits(bits, axis=1, bitorder="little")


def unpack_bits(packed: np.ndarray, n_channels: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    return np.unpackbits(packed, axis=1, count=n_channels, bitorder="little")


def write_mask_file(masks: MaskTensor, path) -> None:
    header = _DCPM_HEADER.pack(
        DCPM_MAGIC, DCPM_VERSION, masks.n_frames, masks.n_blocks, masks.channels_per_block
    )
    payload = pack_bits(masks.bits) if masks.n_frames else b""
    with open(path, "wb") as f:
        f.write(header)
        f.write(bytes(np.ascontiguousarray(payload)))


def read_mask_file(path) -> MaskTensor:
    raw = Path(path).read_bytes()
    if len(raw) < _DCPM_HEADER.size:
        raise ContainerError(f"{path}: file too short for DCPM header")
    magic, version, L, I, C = _DCPM_HEADER.unpack_from(raw, 0)
    if magic != DCPM_MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != DCPM_VERSION:
        raise ContainerError(f"{path}: unsupported DCPM version {version}")
    row_bytes = (I * C + 7) // 8
    payload = raw[_DCPM_HEADER.size:]
    expected = L * row_bytes
    if len(payload) < expected:
        raise ContainerError(
            f"{path}: truncated payload, header says {L} rows of {row_bytes} bytes "
            f"but only {len(payload)} bytes present"
        )
    if len(payload) > expected:
        raise ContainerError(
            f"{path}: dimension mismatch, {len(payload) - expected} trailing bytes"
        )
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(L, row_bytes)
    return MaskTensor(unpack_bits(packed, I * C), I, C)


def write_filtered_masks(fm: FilteredMasks, path) -> None:
    """DCPM file with ``I = 1, C_res = C_star`` plus a ``.json`` sidecar."""
    path = Path(path)
    write_mask_file(MaskTensor(fm.bits, 1, fm.n_kept), path)
    sidecar_path(path).write_text(json.dumps(fm.sidecar(), indent=1))


def read_filtered_masks(path) -> FilteredMasks:
    path = Path(path)
    m = read_mask_file(path)
    side = json.loads(sidecar_path(path).read_text())
    if len(side["channel_map"]) != m.n_channels:
        raise ContainerError(f"{path}: sidecar channel_map does not match DCPM width")
    return FilteredMasks(
        m.bits,
        side["channel_map"],
        side["channel_std"],
        side["n_blocks"],
        side["channels_per_block"],
        side.get("tau"),
    )


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# --------------------------------------------------------------------------
# targets


@dataclass(frozen=True)
class TargetSeries:
    """One ground-truth value per STFT frame plus a validity mask."""

    name: str
    kind: str
    values: np.ndarray
    valid: np.ndarray
    n_classes: int | None = None
    iqr: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64 if self.kind == CONTINUOUS else np.int64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 1 or valid.shape != values.shape:
            raise ValueError("values and valid must be 1-D of equal length")
        n_classes = self.n_classes
        if self.kind == BINARY:
            n_classes = 2
        if self.kind != CONTINUOUS:
            if n_classes is None or n_classes < 2:
                raise ValueError("class targets need n_classes >= 2")
            v = values[valid]
            if v.size and (v.min() < 0 or v.max() >= n_classes):
                raise ValueError(f"{self.name}: class values outside [0, {n_classes})")
        else:
            n_classes = None
        for a in (values, valid):
            a.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "n_classes", n_classes)
        if self.iqr is not None:
            object.__setattr__(self, "iqr", (float(self.iqr[0]), float(self.iqr[1])))

    def __len__(self):
        return self.values.size

    @property
    def is_classification(self) -> bool:
        return self.kind != CONTINUOUS

    @property
    def n_outputs(self) -> int:
        """Scalar outputs a linear probe of this target emits."""
        return self.n_classes if self.kind == MULTICLASS else 1

    def with_valid(self, valid) -> "TargetSeries":
        return TargetSeries(self.name, self.kind, self.values, valid, self.n_classes, self.iqr)

    def meta(self) -> dict:
        return {"name": self.name, "kind": self.kind, "n_classes": self.n_classes,
                "iqr": list(self.iqr) if self.iqr else None}


def write_target_csv(ts: TargetSeries, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "value", "valid"])
        for i, (v, ok) in enumerate(zip(ts.values.tolist(), ts.valid.tolist())):
            w.writerow([i, repr(float(v)) if ts.kind == CONTINUOUS else int(v), int(ok)])


def read_target_rows(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``frame,value[,valid]`` CSV into (values, valid)."""
    values, valid = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = [h.strip() for h in next(reader, [])]
        if header[:2] != ["frame", "value"]:
            raise ContainerError(f"{path}: expected header frame,value[,valid], got {header}")
        has_valid = len(header) > 2 and header[2] == "valid"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                frame = int(row[0])
                value = float(row[1])
                ok = bool(int(row[2])) if has_valid else True
            except (ValueError, IndexError) as e:
                raise ContainerError(f"{path}:{lineno}: non-numeric cell ({e})") from None
            if frame != len(values):
                raise ContainerError(f"{path}:{lineno}: expected frame {len(values)}, got {frame}")
            values.append(value)
            valid.append(ok)
    return np.asarray(values, dtype=np.float64), np.asarray(valid, dtype=bool)


def read_target_csv(path, name, kind, n_classes=None, iqr=None) -> TargetSeries:
    values, valid = read_target_rows(path)
    if kind != CONTINUOUS:
        values = values.astype(np.int64)
    return TargetSeries(name, kind, values, valid, n_classes, iqr)


def write_registry(registry: dict[str, TargetSeries], out_dir, extra: dict | None = None) -> None:
    """Write every series as ``<name>.csv`` plus a ``targets.json`` index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"targets": [ts.meta() for ts in registry.values()]}
    if extra:
        index.update(extra)
    for ts in registry.values():
        write_target_csv(ts, out_dir / f"{ts.name}.csv")
    (out_dir / "targets.json").write_text(json.dumps(index, indent=1))


def read_registry(in_dir) -> dict[str, TargetSeries]:
    in_dir = Path(in_dir)
    index = json.loads((in_dir / "targets.json").read_text())
    out = {}
    for m in index["targets"]:
        out[m["name"]] = read_target_csv(
            in_dir / f"{m['name']}.csv", m["name"], m["kind"], m.get("n_classes"),
            tuple(m["iqr"]) if m.get("iqr") else None,
        )
    return out


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Segment:
    utterance_id: str
    speaker_id: str
    gender: str
    accent: str
    noise_category: str
    start_frame: int
    end_frame: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class StreamManifest:
    segments: tuple[Segment, ...]
    split: str
    seed: int
    stft: StftConfig = field(default_factory=StftConfig)
    n_frames: int | None = None
    noise_seams: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "noise_seams", tuple(int(s) for s in self.noise_seams))

    @property
    def speakers(self) -> set[str]:
        return {s.speaker_id for s in self.segments}

    def to_json(self) -> str:
        return json.dumps({
            "split": self.split,
            "seed": self.seed,
            "stft": self.stft.to_dict(),
            "n_frames": self.n_frames,
            "noise_seams": list(self.noise_seams),
            "segments": [s.to_dict() for s in self.segments],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StreamManifest":
        d = json.loads(text)
        return cls(
            tuple(Segment(**s) for s in d["segments"]),
            d["split"], d["seed"], StftConfig.from_dict(d["stft"]),
            d.get("n_frames"), tuple(d.get("noise_seams", ())),
        )

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "StreamManifest":
        return cls.from_json(Path(path).read_text())


def validate_manifest(manifest: StreamManifest) -> None:
    """Raise ``ValueError`` unless segments tile the timeline contiguously."""
    segs = manifest.segments
    if not segs:
        raise ValueError("manifest has no segments")
    if segs[0].start_frame != 0:
        raise ValueError("first segment must start at frame 0")
    for a, b in zip(segs, segs[1:]):
        if a.end_frame != b.start_frame:
            raise ValueError(f"gap or overlap between {a.utterance_id} and {b.utterance_id}")
    for s in segs:
        if s.end_frame < s.start_frame:
            raise ValueError(f"segment {s.utterance_id} has negative length")
    if manifest.n_frames is not None and segs[-1].end_frame < manifest.n_frames:
        raise ValueError("segments do not cover all frames")


def check_disjoint_speakers(train: StreamManifest, test: StreamManifest) -> None:
    shared = train.speakers & test.speakers
    if shared:
        raise ValueError(f"speakers present in both splits: {sorted(shared)}")


# --------------------------------------------------------------------------
# audio / baseline features

AUDIO_ROLES = ("clean", "noise", "noisy", "enhanced")


@dataclass(frozen=True)
class AudioStream:
    samples: np.ndarray
    sample_rate: int
    role: str = "clean"

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("audio must be mono (1-D)")
        if not np.all(np.isfinite(x)):
            raise ValueError("audio contains non-finite samples")
        if self.role not in AUDIO_ROLES:
            raise ValueError(f"unknown audio role {self.role!r}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class BaselineFeatures:
    kind: str
    values: np.ndarray
    zscore_mean: np.ndarray | None = None
    zscore_std: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def write_feature_matrix(X: np.ndarray, path) -> None:
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *X.shape))
        f.write(X.tobytes())


def read_feature_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerError(f"{path}: missing header")
    L, D = struct.unpack_from("<II", raw, 0)
    if len(raw) - 8 != 4 * L * D:
        raise ContainerError(f"{path}: payload size does not match header {L}x{D}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(L, D).astype(np.float64)
