"""Synthetic mask oracle: masks whose channels are known noisy functions of the targets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .assembly import DEFAULT_ACCENTS, DEFAULT_NOISE_CATEGORIES, GENDERS, labels_from_manifest
from .core import BINARY, CONTINUOUS, MULTICLASS, MaskTensor, Segment, StftConfig, StreamManifest, TargetSeries
from .inferbank import ROSTER_IQR
from .targets import gate_by_vad


@dataclass(frozen=True)
class ChannelRule:
    """One channel's rule.

    ``type`` is ``"equals"`` (binary target == 1), ``"threshold"``
    (value > ``threshold``) or ``"classes"`` (value in ``classes``).
    ``polarity = -1`` inverts the bit.
    """

    target: str
    type: str
    threshold: float | None = None
    classes: tuple = ()
    polarity: int = 1

    def __post_init__(self):
        if self.type not in ("equals", "threshold", "classes"):
            raise ValueError(f"unknown rule type {self.type!r}")
        if self.type == "threshold" and self.threshold is None:
            raise ValueError("threshold rule needs a threshold")
        if self.type == "classes" and not self.classes:
            raise ValueError("classes rule needs a class set")
        if self.polarity not in (1, -1):
            raise ValueError("polarity must be +1 or -1")
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self.type == "equals":
            bit = values == 1
        elif self.type == "threshold":
            bit = values > self.threshold
        else:
            bit = np.isin(values, self.classes)
        return bit if self.polarity == 1 else ~bit


@dataclass(frozen=True)
class Codebook:
    rules: tuple
    n_blocks: int = 9
    channels_per_block: int = 128
    flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(
            r if isinstance(r, ChannelRule) else ChannelRule(**r) for r in self.rules))
        if not 0 <= self.flip_prob < 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5)")
        if len(self.rules) > self.n_channels:
            raise ValueError(f"{len(self.rules)} rules do not fit into {self.n_channels} channels")

    @property
    def n_channels(self) -> int:
        return self.n_blocks * self.channels_per_block

    @property
    def constant_fraction(self) -> float:
        return 1.0 - len(self.rules) / self.n_channels

    def layout(self) -> np.ndarray:
        """Flat channel index of every rule (seeded placement)."""
        rng = np.random.default_rng([self.seed, 1])
        return rng.permutation(self.n_channels)[: len(self.rules)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rules"] = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(r).items()}
                      for r in self.rules]
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        return cls(tuple(ChannelRule(**r) for r in d["rules"]), d.get("n_blocks", 9),
                   d.get("channels_per_block", 128), d.get("flip_prob", 0.0), d.get("seed", 0))

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_codebook(registry: dict, ladder: int = 64, speaker_bits: int = 24,
                     n_blocks: int = 9, channels_per_block: int = 128,
                     flip_prob: float = 0.0, seed: int = 0) -> Codebook:
    """Codebook covering every target of ``registry``.

    Binary targets get one copy channel, K-class targets one channel per
    class, continuous targets a ladder of evenly spaced thresholds over the
    range of their valid values, and a "speaker" target ``speaker_bits``
    random class-subset channels.
    """
    rng = np.random.default_rng([seed, 2])
    rules = []
    for name, ts in registry.items():
        if name == "speaker":
            for _ in range(speaker_bits):
                subset = np.flatnonzero(rng.random(ts.n_classes) < 0.5)
                if subset.size == 0:
                    subset = np.array([0])
                rules.append(ChannelRule(name, "classes", classes=tuple(subset.tolist())))
        elif ts.kind == BINARY:
            rules.append(ChannelRule(name, "equals"))
        elif ts.kind == MULTICLASS:
            rules += [ChannelRule(name, "classes", classes=(k,)) for k in range(ts.n_classes)]
        else:
            v = ts.values[ts.valid]
            lo, hi = float(v.min()), float(v.max())
            for t in np.linspace(lo, hi, ladder + 2)[1:-1]:
                rules.append(ChannelRule(name, "threshold", threshold=float(t),
                                         polarity=int(rng.choice([-1, 1]))))
    return Codebook(tuple(rules), n_blocks, channels_per_block, flip_prob, seed)


def synth_masks(registry: dict, codebook: Codebook, strict: bool = True) -> MaskTensor:
    """Evaluate the codebook frame by frame, flipping rule bits with ``flip_prob``.

    Channels without a rule are constant (seeded 0 or 1) and never flipped.
    """
    missing = {r.target for r in codebook.rules} - set(registry)
    if missing:
        raise KeyError(f"codebook references unknown targets: {sorted(missing)}")
    if strict:
        uncovered = set(registry) - {r.target for r in codebook.rules}
        if uncovered:
            raise ValueError(f"registered targets without a channel: {sorted(uncovered)}")
    lengths = {len(ts) for ts in registry.values()}
    if len(lengths) != 1:
        raise ValueError("targets differ in length")
    L = lengths.pop()
    C = codebook.n_channels
    positions = codebook.layout()
    const_rng = np.random.default_rng([codebook.seed, 3])
    bits = np.repeat((const_rng.random(C) < 0.5)[None, :], L, axis=0)
    children = np.random.SeedSequence([codebook.seed, 4]).spawn(len(codebook.rules))
    for rule, pos, ss in zip(codebook.rules, positions, children):
        col = rule.apply(registry[rule.target].values)
        if codebook.flip_prob > 0:
            col = col ^ (np.random.default_rng(ss).random(L) < codebook.flip_prob)
        bits[:, pos] = col
    return MaskTensor(bits.astype(np.uint8), codebook.n_blocks, codebook.channels_per_block)


# --------------------------------------------------------------------------
# synthetic target streams


def make_speakers(n: int, prefix: str, seed: int = 0) -> list[dict]:
    """Speaker metadata with balanced gender and accent."""
    rng = np.random.default_rng([seed, 5])
    out = []
    for i in range(n):
        out.append({"speaker_id": f"{prefix}{i:03d}", "gender": GENDERS[i % 2],
                    "accent": DEFAULT_ACCENTS[(i // 2) % len(DEFAULT_ACCENTS)],
                    "pitch": float(rng.normal(0.0, 12.0))})
    return out


def _smooth_walk(rng, n, rho, sigma):
    """AR(1) process with stationary std ``sigma``."""
    e = rng.normal(0.0, sigma * np.sqrt(1 - rho * rho), n)
    out = np.empty(n)
    acc = rng.normal(0.0, sigma)
    for i in range(n):
        acc = rho * acc + e[i]
        out[i] = acc
    return out


def synth_targets(n_frames: int, speakers: list[dict], seed: int = 0, split: str = "train",
                  stft: StftConfig = StftConfig(), utt_frames=(120, 360)):
    """Random but plausible values for every roster target plus a speaker label.

    Returns ``(registry, manifest)``.  Utterances cycle through the speakers
    in seeded order; each has leading and trailing silence.
    """
    rng = np.random.default_rng(seed)
    segments = []
    vad = np.zeros(n_frames, dtype=np.int64)
    pos = 0
    k = 0
    order = []
    while pos < n_frames:
        if not order:
            order = list(rng.permutation(len(speakers)))
        spk = speakers[order.pop()]
        length = int(rng.integers(utt_frames[0], utt_frames[1] + 1))
        end = min(pos + length, n_frames)
        lead = int(rng.integers(5, 30))
        trail = int(rng.integers(5, 30))
        vad[min(pos + lead, end): max(end - trail, pos)] = 1
        noise = DEFAULT_NOISE_CATEGORIES[int(rng.integers(len(DEFAULT_NOISE_CATEGORIES)))]
        segments.append(Segment(f"{split}_u{k:05d}", spk["speaker_id"], spk["gender"], spk["accent"],
                                noise, pos, end))
        pos = end
        k += 1
    manifest = StreamManifest(tuple(segments), split, int(seed), stft, n_frames)
    pitch = {s["speaker_id"]: s["pitch"] for s in speakers}

    snr_in = np.clip(-2.5 + _smooth_walk(rng, n_frames, 0.97, 7.0), -50, 30)
    snr_enh = np.clip(7.5 + 0.5 * snr_in + _smooth_walk(rng, n_frames, 0.9, 1.5), -50, 30)
    sisdr_in = np.clip(4.5 + 0.6 * snr_in + _smooth_walk(rng, n_frames, 0.95, 2.0), -50, 30)
    sisdr_enh = np.clip(12.5 + 0.4 * sisdr_in + _smooth_walk(rng, n_frames, 0.95, 1.0), -50, 30)
    pesq_in = np.clip(1.45 + 0.02 * snr_in + _smooth_walk(rng, n_frames, 0.98, 0.1), 1.0, 4.5)
    pesq_enh = np.clip(2.75 + 0.01 * snr_in + _smooth_walk(rng, n_frames, 0.98, 0.08), 1.0, 4.5)
    f0 = np.zeros(n_frames)
    wiggle = _smooth_walk(rng, n_frames, 0.9, 10.0)
    for seg in segments:
        base = (120.0 if seg.gender == "M" else 200.0) + pitch[seg.speaker_id]
        sl = slice(seg.start_frame, seg.end_frame)
        f0[sl] = np.where(vad[sl] == 1, base + wiggle[sl], 0.0)

    ones = np.ones(n_frames, dtype=bool)
    vad_ts = TargetSeries("vad", BINARY, vad, ones)

    def cont(name, v):
        return TargetSeries(name, CONTINUOUS, v, ones, iqr=ROSTER_IQR.get(name))

    registry = {
        "vad": vad_ts,
        "gender": gate_by_vad(labels_from_manifest(manifest, "gender"), vad_ts),
        "accent": gate_by_vad(labels_from_manifest(manifest, "accent"), vad_ts),
        "noise_category": labels_from_manifest(manifest, "noise_category"),
        "snr_in": gate_by_vad(cont("snr_in", snr_in), vad_ts),
        "snr_enh": gate_by_vad(cont("snr_enh", snr_enh), vad_ts),
        "sisdr_in": gate_by_vad(cont("sisdr_in", sisdr_in), vad_ts),
        "sisdr_enh": gate_by_vad(cont("sisdr_enh", sisdr_enh), vad_ts),
        "pesq_in": cont("pesq_in", pesq_in),
        "pesq_enh": cont("pesq_enh", pesq_enh),
        "f0": TargetSeries("f0", CONTINUOUS, f0, f0 != 0, iqr=ROSTER_IQR["f0"]),
    }
    # speaker label over the split's own speaker list
    vocab = [s["speaker_id"] for s in speakers]
    registry["speaker"] = labels_from_manifest(manifest, "speaker", vocab)
    return registry, manifest
