"""Speaker verification on mask embeddings: WCCN + LDA backend, cosine scoring, EER."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .core import StreamManifest, TargetSeries

log = logging.getLogger(__name__)

DEFAULT_LDA_DIMS = 16


def length_normalize(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    return V / np.linalg.norm(V, axis=-1, keepdims=True)


@dataclass(frozen=True)
class EmbeddingSet:
    ids: tuple
    speakers: tuple
    vectors: np.ndarray

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if V.shape[0] != len(self.ids) or len(self.ids) != len(self.speakers):
            raise ValueError("ids, speakers and vectors disagree in length")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "vectors", V)

    def __len__(self):
        return len(self.ids)

    def index(self) -> dict:
        return {u: i for i, u in enumerate(self.ids)}

    def by_speaker(self) -> dict:
        out: dict = {}
        for u, s in zip(self.ids, self.speakers):
            out.setdefault(s, []).append(u)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "ids": list(self.ids), "speakers": list(self.speakers),
            "vectors": self.vectors.tolist()}))

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        d = json.loads(Path(path).read_text())
        return cls(tuple(d["ids"]), tuple(d["speakers"]), np.asarray(d["vectors"], dtype=np.float64))


def utterance_embeddings(frames, vad: TargetSeries, manifest: StreamManifest) -> EmbeddingSet:
    """Mean of each utterance's voice-active mask rows, l2-normalized.

    Utterances without active frames (or with a zero mean) are skipped.
    """
    bits = np.asarray(getattr(frames, "bits", frames), dtype=np.float64)
    if bits.shape[0] != len(vad):
        raise ValueError("mask frames and VAD differ in length")
    active = vad.valid & (vad.values == 1)
    ids, spk, rows = [], [], []
    for seg in manifest.segments:
        a, b = seg.start_frame, min(seg.end_frame, bits.shape[0])
        sel = np.flatnonzero(active[a:b]) + a
        if sel.size == 0:
            log.warning("utterance %s has no voice-active frames, skipped", seg.utterance_id)
            continue
        mean = bits[sel].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            log.warning("utterance %s has an all-zero mean embedding, skipped", seg.utterance_id)
            continue
        ids.append(seg.utterance_id)
        spk.append(seg.speaker_id)
        rows.append(mean / norm)
    if not rows:
        raise ValueError("every utterance was skipped")
    return EmbeddingSet(tuple(ids), tuple(spk), np.vstack(rows))


def within_class_covariance(V: np.ndarray, labels) -> np.ndarray:
    """Average of per-speaker covariances (population normalization)."""
    labels = np.asarray(labels)
    D = V.shape[1]
    W = np.zeros((D, D))
    speakers = np.unique(labels)
    for s in speakers:
        Xs = V[labels == s]
        Xs = Xs - Xs.mean(axis=0)
        W += Xs.T @ Xs / Xs.shape[0]
    return W / speakers.size


@dataclass(frozen=True)
class SvBackend:
    wccn: np.ndarray
    lda: np.ndarray
    meta: dict

    @property
    def projection(self) -> np.ndarray:
        """``lda @ wccn``: maps raw embeddings to the scoring space."""
        return self.lda @ self.wccn

    def transform(self, V) -> np.ndarray:
        return length_normalize(np.atleast_2d(V) @ self.projection.T)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "wccn": self.wccn.tolist(), "lda": self.lda.tolist(), "meta": self.meta}))

    @classmethod
    def load(cls, path) -> "SvBackend":
        d = json.loads(Path(path).read_text())
        return cls(np.asarray(d["wccn"]), np.asarray(d["lda"]), d["meta"])


def fit_backend(train: EmbeddingSet, lda_dims: int = DEFAULT_LDA_DIMS) -> SvBackend:
    """WCCN whitening followed by LDA, fitted on the training embeddings.

    The WCCN matrix is the inverse Cholesky factor of the average
    within-speaker covariance, so whitened training data has identity
    within-class covariance.  A ridge of ``1e-6 * trace / D`` is added only
    when that covariance is not numerically positive definite.
    """
    V = train.vectors
    labels = np.asarray(train.speakers)
    speakers, counts = np.unique(labels, return_counts=True)
    if speakers.size < lda_dims + 1:
        raise ValueError(f"need at least {lda_dims + 1} speakers for {lda_dims} LDA dims, got {speakers.size}")
    if counts.max() < 2:
        raise ValueError("need some speaker with at least 2 utterances")
    D = V.shape[1]
    if lda_dims > D:
        raise ValueError(f"lda_dims={lda_dims} exceeds embedding width {D}")
    Sw = within_class_covariance(V, labels)
    ridge = 0.0
    try:
        chol = linalg.cholesky(Sw, lower=True)
        if np.min(np.diag(chol)) ** 2 <= 1e-12 * np.trace(Sw) / D:
            raise linalg.LinAlgError("near-singular")
    except linalg.LinAlgError:
        ridge = 1e-6 * np.trace(Sw) / D
        if ridge == 0:
            ridge = 1e-6
        chol = linalg.cholesky(Sw + ridge * np.eye(D), lower=True)
    wccn = np.ascontiguousarray(linalg.solve_triangular(chol, np.eye(D), lower=True))

    Z = V @ wccn.T
    Sw_z = within_class_covariance(Z, labels)
    mu = Z.mean(axis=0)
    Sb = np.zeros((D, D))
    for s, n in zip(speakers, counts):
        d = Z[labels == s].mean(axis=0) - mu
        Sb += n * np.outer(d, d)
    Sb /= V.shape[0]
    # generalized problem Sb v = lambda Sw v; Sw_z ~ I after WCCN
    evals, evecs = linalg.eigh(Sb, Sw_z + 1e-12 * np.eye(D))
    order = np.argsort(evals)[::-1][:lda_dims]
    lda = np.ascontiguousarray(evecs[:, order].T)
    lda /= np.linalg.norm(lda, axis=1, keepdims=True)
    meta = {"lda_dims": lda_dims, "order": "wccn-then-lda", "wccn_ridge": ridge,
            "n_speakers": int(speakers.size), "n_utterances": int(V.shape[0]),
            "lda_eigenvalues": evals[order].tolist()}
    return SvBackend(wccn, lda, meta)


@dataclass(frozen=True)
class Trial:
    enroll_ids: tuple
    test_id: str
    is_target: bool


@dataclass(frozen=True)
class TrialList:
    trials: tuple
    n_enr: int
    seed: int

    def __len__(self):
        return len(self.trials)

    @property
    def n_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="|")
            w.writerow(["enroll_ids", "test_id", "is_target"])
            for t in self.trials:
                w.writerow([",".join(t.enroll_ids), t.test_id, int(t.is_target)])

    @classmethod
    def read_csv(cls, path, n_enr=0, seed=0) -> "TrialList":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f, delimiter="|"))
        trials = tuple(Trial(tuple(r["enroll_ids"].split(",")), r["test_id"], bool(int(r["is_target"])))
                       for r in rows)
        return cls(trials, n_enr or (len(trials[0].enroll_ids) if trials else 0), seed)


def make_trials(test: EmbeddingSet, n_enr: int = 1, ratio: int = 10, seed: int = 0) -> TrialList:
    """Enrollment/test trials with ``ratio`` non-target trials per target trial.

    Every speaker enrolls ``n_enr`` seeded utterances; each remaining
    utterance gives one target trial.  Non-target trials pair an enrollment
    set with a remaining utterance of another speaker, sampled without
    replacement and capped at the number of such pairs.
    """
    rng = np.random.default_rng(seed)
    groups = test.by_speaker()
    enroll, rest = {}, {}
    for spk in sorted(groups):
        utts = sorted(groups[spk])
        if len(utts) <= n_enr:
            log.warning("speaker %s has %d utterances (<= N_enr=%d), skipped", spk, len(utts), n_enr)
            continue
        pick = set(rng.choice(len(utts), size=n_enr, replace=False).tolist())
        enroll[spk] = tuple(utts[i] for i in sorted(pick))
        rest[spk] = [u for i, u in enumerate(utts) if i not in pick]
    targets = [Trial(enroll[s], u, True) for s in enroll for u in rest[s]]

    speakers = list(enroll)
    pool = [(s, t) for s in speakers for t in speakers if t != s]
    sizes = np.array([len(rest[t]) for _, t in pool], dtype=np.int64)
    available = int(sizes.sum())
    wanted = ratio * len(targets)
    if wanted > available:
        log.info("only %d non-target pairs available (%d requested)", available, wanted)
    n_non = min(wanted, available)
    flat = np.sort(rng.choice(available, size=n_non, replace=False)) if n_non else np.array([], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    nontargets = []
    for f in flat.tolist():
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        s, t = pool[k]
        nontargets.append(Trial(enroll[s], rest[t][f - offsets[k]], False))
    return TrialList(tuple(targets + nontargets), n_enr, seed)


def score_trials(backend: SvBackend, embeddings: EmbeddingSet, trials: TrialList,
                 enroll_stage: str = "raw") -> np.ndarray:
    """Cosine scores; multi-utterance enrollment is averaged before projection
    (``enroll_stage="raw"``) or after it (``"projected"``)."""
    idx = embeddings.index()
    missing = {u for t in trials.trials for u in (*t.enroll_ids, t.test_id) if u not in idx}
    if missing:
        raise KeyError(f"utterances without embeddings: {sorted(missing)[:5]}")
    V = embeddings.vectors
    scores = np.empty(len(trials))
    for i, t in enumerate(trials.trials):
        enr_rows = V[[idx[u] for u in t.enroll_ids]]
        if enroll_stage == "raw":
            e = backend.transform(enr_rows.mean(axis=0))[0]
        elif enroll_stage == "projected":
            e = length_normalize(backend.transform(enr_rows).mean(axis=0))
        else:
            raise ValueError(f"unknown enroll_stage {enroll_stage!r}")
        v = backend.transform(V[idx[t.test_id]])[0]
        scores[i] = float(np.clip(e @ v, -1.0, 1.0))
    return scores


def det_curve(scores, is_target):
    """False-accept and false-reject rates at thresholds between sorted scores.

    Thresholds: below the minimum, every midpoint between distinct scores,
    above the maximum.  A trial is accepted when its score exceeds the
    threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    u = np.unique(scores)
    thr = np.concatenate(([u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]))
    tgt = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non, thr, side="right") / non.size
    return thr, far, frr


def eer(scores, is_target) -> float:
    """Equal error rate, linearly interpolated where FAR and FRR cross."""
    is_target = np.asarray(is_target, dtype=bool)
    if is_target.all() or not is_target.any():
        raise ValueError("EER needs both target and non-target trials")
    _, far, frr = det_curve(scores, is_target)
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(far[i])
    t = d[i - 1] / (d[i - 1] - d[i])
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


def write_scores_csv(trials: TrialList, scores, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="|")
        w.writerow(["enroll_ids", "test_id", "is_target", "score"])
        for t, s in zip(trials.trials, scores):
            w.writerow([",".join(t.enroll_ids), t.test_id, int(t.is_target), repr(float(s))])
