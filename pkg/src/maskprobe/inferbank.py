"""All probes compiled into one gather-and-sum predictor over binary masks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BINARY, CONTINUOUS, MULTICLASS
from .probes import ProbeModel, scores_to_class

# Canonical target order; bank rows follow it when compiled with ``roster_order``.
ROSTER = (
    ("vad", BINARY, 2, None),
    ("gender", BINARY, 2, None),
    ("accent", MULTICLASS, 6, None),
    ("noise_category", MULTICLASS, 6, None),
    ("snr_in", CONTINUOUS, None, (-13.0, 8.0)),
    ("snr_enh", CONTINUOUS, None, (1.0, 14.0)),
    ("sisdr_in", CONTINUOUS, None, (-1.0, 10.0)),
    ("sisdr_enh", CONTINUOUS, None, (8.0, 17.0)),
    ("pesq_in", CONTINUOUS, None, (1.2, 1.7)),
    ("pesq_enh", CONTINUOUS, None, (2.6, 2.9)),
    ("f0", CONTINUOUS, None, (110.0, 200.0)),
)
ROSTER_NAMES = tuple(r[0] for r in ROSTER)
ROSTER_IQR = {r[0]: r[3] for r in ROSTER if r[3]}


def roster_outputs() -> int:
    """Scalar outputs of the full roster: one per binary/regression task, K per K-class task."""
    return sum(k if kind == MULTICLASS else 1 for _, kind, k, _ in ROSTER)


def roster_order(models):
    """Sort models by roster position; unknown names go last, alphabetically."""
    pos = {n: i for i, n in enumerate(ROSTER_NAMES)}
    return sorted(models, key=lambda m: (pos.get(m.name, len(pos)), m.name))


@dataclass(frozen=True)
class PredictorBank:
    weights: np.ndarray
    bias: np.ndarray
    outputs: tuple
    models: tuple
    feature_space: dict

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def channel_map(self):
        return self.feature_space.get("channel_map")

    def output_names(self) -> list[str]:
        return [t if c is None else f"{t}.{c}" for t, c in self.outputs]

    def to_dict(self) -> dict:
        return {
            "feature_space": self.feature_space,
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "outputs": [list(o) for o in self.outputs],
            "models": [dict(m) for m in self.models],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorBank":
        W = np.asarray(d["weights"], dtype=np.float64).reshape(d["shape"])
        return cls(W, np.asarray(d["bias"], dtype=np.float64),
                   tuple(tuple(o) for o in d["outputs"]), tuple(d["models"]), d["feature_space"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "PredictorBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compile_bank(models) -> PredictorBank:
    models = list(models)
    if not models:
        raise ValueError("no models to compile")
    space = models[0].feature_space
    D = models[0].n_features
    for m in models[1:]:
        if m.feature_space != space or m.n_features != D:
            raise ValueError(f"model {m.name} uses a different feature space than {models[0].name}")
    outputs, info = [], []
    row = 0
    for m in models:
        if m.kind == MULTICLASS:
            outputs += [(m.name, k) for k in range(m.n_outputs)]
        else:
            outputs.append((m.name, None))
        info.append({"name": m.name, "kind": m.kind, "row": row, "rows": m.n_outputs,
                     "n_classes": m.n_classes, "iqr": list(m.iqr) if m.iqr else None,
                     "alpha": m.alpha})
        row += m.n_outputs
    W = np.vstack([m.weights for m in models])
    b = np.concatenate([m.bias for m in models])
    return PredictorBank(W, b, tuple(outputs), tuple(info), space)


def split_bank(bank: PredictorBank) -> list[ProbeModel]:
    """Undo :func:`compile_bank`."""
    out = []
    for m in bank.models:
        r = slice(m["row"], m["row"] + m["rows"])
        out.append(ProbeModel(m["name"], m["kind"], bank.weights[r].copy(), bank.bias[r].copy(),
                              bank.feature_space, m.get("alpha", 0.01), m.get("n_classes"),
                              tuple(m["iqr"]) if m.get("iqr") else None))
    return out


def infer_frame(bank: PredictorBank, active) -> np.ndarray:
    """``bias + sum of weight columns of active channels``, ascending channel order."""
    active = np.asarray(active, dtype=np.int64)
    if active.size:
        if active[0] < 0 or active[-1] >= bank.n_features:
            raise IndexError(f"active channel out of range [0, {bank.n_features})")
        if np.any(np.diff(active) <= 0):
            raise ValueError("active channels must be strictly increasing")
    out = bank.bias.copy()
    for c in active:
        out += bank.weights[:, c]
    return out


def infer_frames(bank: PredictorBank, bits: np.ndarray) -> np.ndarray:
    """Vectorized gather-and-sum over many frames, same accumulation order as :func:`infer_frame`."""
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[1] != bank.n_features:
        raise ValueError(f"expected frames of width {bank.n_features}, got {bits.shape}")
    out = np.tile(bank.bias, (bits.shape[0], 1))
    on = bits.astype(bool)
    for c in range(bank.n_features):
        rows = on[:, c]
        if rows.any():
            out[rows] += bank.weights[:, c]
    return out


def op_count(bank_or_outputs, n_active: int, n_features: int | None = None) -> dict:
    """Per-frame additions of the gather-and-sum.

    ``adds`` counts the activity-dependent work including bias; ``worst_case``
    is ``K_total * C_star``, the all-channels cost without bias.
    """
    if isinstance(bank_or_outputs, PredictorBank):
        K, C = bank_or_outputs.n_outputs, bank_or_outputs.n_features
    else:
        K, C = int(bank_or_outputs), n_features
    if C is not None and not 0 <= n_active <= C:
        raise ValueError(f"n_active must lie in [0, {C}]")
    return {"adds": K * n_active + K, "worst_case": K * C if C is not None else None}


@dataclass
class InferenceTable:
    columns: list
    scores: np.ndarray
    classes: dict

    def __len__(self):
        return self.scores.shape[0]

    def write_csv(self, path) -> None:
        names = list(self.classes)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame"] + self.columns + [f"{n}.class" for n in names])
            for i in range(len(self)):
                w.writerow([i] + [repr(float(v)) for v in self.scores[i]]
                           + [int(self.classes[n][i]) for n in names])


def stream_infer(bank: PredictorBank, frames, postprocess: bool = True) -> InferenceTable:
    """Run the bank over every frame; classification targets also get their argmax class."""
    bits = np.asarray(getattr(frames, "bits", frames))
    if bits.size == 0:
        bits = bits.reshape(0, bank.n_features)
    scores = infer_frames(bank, bits)
    classes = {}
    if postprocess:
        for m in bank.models:
            if m["kind"] != CONTINUOUS:
                block = scores[:, m["row"]: m["row"] + m["rows"]]
                classes[m["name"]] = scores_to_class(block, m["kind"])
    return InferenceTable(bank.output_names(), scores, classes)


def gather_bank_columns(bank: PredictorBank, masks) -> np.ndarray:
    """Pick the bank's channels out of a full mask tensor (or check a filtered one)."""
    cmap = bank.channel_map
    bits = masks.bits
    channel_map = getattr(masks, "channel_map", None)
    if channel_map is not None:
        if cmap is not None and list(channel_map) != list(cmap):
            raise ValueError("filtered masks do not match the bank's channel map")
        return bits
    if cmap is None:
        return bits
    if bits.shape[1] <= max(cmap):
        raise ValueError("mask tensor narrower than the bank's channel map")
    return bits[:, cmap]
