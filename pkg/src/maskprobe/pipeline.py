"""Config-driven pipeline runs with a reproducibility manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .core import (
    ContainerError,
    FilteredMasks,
    StreamManifest,
    read_filtered_masks,
    read_mask_file,
    read_registry,
    write_filtered_masks,
    write_mask_file,
    write_registry,
)
from .evalmetrics import evaluate_model, heatmap_rows, pca_fit, subsample_frames, write_heatmap_csv, write_projection_csv
from .features import filter_masks, rank_features, restrict_blocks, select_columns
from .inferbank import ROSTER_NAMES, compile_bank, op_count, roster_order, stream_infer
from .probes import FitConfig, load_models, save_models, train_suite
from .sv import eer, fit_backend, make_trials, score_trials, utterance_embeddings, write_scores_csv
from .synth import Codebook, default_codebook, make_speakers, synth_masks, synth_targets

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("synth", "features", "train", "topk", "eval", "infer", "sv")


class ConfigError(ValueError):
    """Bad or inconsistent run configuration (exit code 2)."""


class MissingArtifact(ConfigError):
    def __init__(self, stage, artifact):
        super().__init__(f"stage '{stage}' needs artifact '{artifact}', which no earlier stage "
                         f"produced and [inputs] does not provide")
        self.stage = stage
        self.artifact = artifact


def stage_seed(master: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def load_config(path) -> dict:
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    def __init__(self, config: dict, run_dir, base_dir=None):
        self.config = config
        self.dir = Path(run_dir)
        self.base = Path(base_dir) if base_dir else Path.cwd()
        run = config.get("run", {})
        self.master_seed = int(run.get("seed", 0))
        self.stages = list(run.get("stages", ["synth", "features", "train", "eval", "infer", "sv"]))
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; choose from {STAGES}")
        self.record_timings = bool(run.get("record_timings", False))
        self.artifacts: dict[str, Path] = {}
        for key, value in config.get("inputs", {}).items():
            p = Path(value)
            self.artifacts[key] = p if p.is_absolute() else self.base / p
        self.seeds: dict[str, int] = {}
        self.timings: dict[str, float] = {}

    def seed(self, stage: str) -> int:
        sec = self.config.get(stage, {})
        s = int(sec["seed"]) if "seed" in sec else stage_seed(self.master_seed, stage)
        self.seeds[stage] = s
        return s

    def need(self, stage: str, *names):
        out = []
        for n in names:
            if n not in self.artifacts:
                raise MissingArtifact(stage, n)
            if not self.artifacts[n].exists():
                raise MissingArtifact(stage, f"{n} ({self.artifacts[n]})")
            out.append(self.artifacts[n])
        return out if len(out) > 1 else out[0]

    def out(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def execute(self) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        for stage in STAGES:
            if stage not in self.stages:
                continue
            t0 = time.perf_counter()
            getattr(self, f"stage_{stage}")(self.config.get(stage, {}))
            self.timings[stage] = time.perf_counter() - t0
            log.info("stage %s done in %.2fs", stage, self.timings[stage])
        self.write_manifest()
        return self.dir

    # ------------------------------------------------------------------ stages

    def stage_synth(self, cfg):
        seed = self.seed("synth")
        rng = np.random.default_rng(seed)
        s_train, s_test, s_cb = (int(v) for v in rng.integers(0, 2**31, 3))
        train_spk = make_speakers(int(cfg.get("train_speakers", 40)), "p", s_train)
        test_spk = make_speakers(int(cfg.get("test_speakers", 20)), "t", s_test)
        reg_tr, man_tr = synth_targets(int(cfg.get("train_frames", 10000)), train_spk, s_train, "train")
        reg_te, man_te = synth_targets(int(cfg.get("test_frames", 10000)), test_spk, s_test, "test")
        if "codebook" in cfg:
            cb = Codebook.load(self.base / cfg["codebook"])
        else:
            cb = default_codebook(reg_tr, int(cfg.get("ladder", 64)), int(cfg.get("speaker_bits", 24)),
                                  int(cfg.get("n_blocks", 9)), int(cfg.get("channels_per_block", 128)),
                                  float(cfg.get("flip_prob", 0.0)), s_cb)
        cb.save(self.out("synth/codebook.json"))
        for split, reg, man in (("train", reg_tr, man_tr), ("test", reg_te, man_te)):
            write_registry(reg, self.out(f"{split}/targets/targets.json").parent)
            man.write(self.out(f"{split}/manifest.json"))
            write_mask_file(synth_masks(reg, cb, strict=split == "train"), self.out(f"{split}/masks.dcpm"))
            self.artifacts[f"{split}_targets"] = self.dir / split / "targets"
            self.artifacts[f"{split}_manifest"] = self.dir / split / "manifest.json"
            self.artifacts[f"{split}_masks"] = self.dir / split / "masks.dcpm"

    def stage_features(self, cfg):
        masks_tr, masks_te = self.need("features", "train_masks", "test_masks")
        fm = filter_masks(read_mask_file(masks_tr), float(cfg.get("tau", 0.005)))
        if cfg.get("blocks"):
            fm = restrict_blocks(fm, cfg["blocks"])
        test_bits = read_mask_file(masks_te).bits[:, fm.channel_map]
        fm_te = FilteredMasks(test_bits, fm.channel_map, fm.channel_std, fm.n_blocks,
                              fm.channels_per_block, fm.tau)
        write_filtered_masks(fm, self.out("train/features.dcpm"))
        write_filtered_masks(fm_te, self.out("test/features.dcpm"))
        self.artifacts["train_features"] = self.dir / "train/features.dcpm"
        self.artifacts["test_features"] = self.dir / "test/features.dcpm"

    def _fit(self, cfg):
        return FitConfig(alpha=float(cfg.get("alpha", 0.01)), max_iters=int(cfg.get("max_iters", 2000)),
                         grad_tol=float(cfg.get("grad_tol", 1e-7)))

    def _train_into(self, fm, registry, fit, models_dir):
        names = [n for n in self.config.get("train", {}).get("targets", ROSTER_NAMES) if n in registry]
        result = train_suite(fm, registry, fit, names)
        models = roster_order(result.models)
        save_models(models, models_dir)
        compile_bank(models).save(models_dir / "bank.json")
        (models_dir / "errors.json").write_text(json.dumps(result.errors, indent=1, sort_keys=True))
        return models

    def stage_train(self, cfg):
        feats, targets = self.need("train", "train_features", "train_targets")
        self.seed("train")
        self._train_into(read_filtered_masks(feats), read_registry(targets), self._fit(cfg),
                         self.out("models/bank.json").parent)
        self.artifacts["models"] = self.dir / "models"

    def stage_topk(self, cfg):
        feats, targets, models_dir = self.need("topk", "train_features", "train_targets", "models")
        k = int(cfg.get("k", 64))
        fm = read_filtered_masks(feats)
        models = load_models(models_dir)
        ranked = rank_features(models, fm.channel_std)[:k]
        top = select_columns(fm, ranked)
        write_filtered_masks(top, self.out(f"train/features_top{k}.dcpm"))
        te = read_filtered_masks(self.need("topk", "test_features"))
        write_filtered_masks(select_columns(te, ranked), self.out(f"test/features_top{k}.dcpm"))
        self._train_into(top, read_registry(targets), self._fit(self.config.get("train", {})),
                         self.out(f"models_top{k}/bank.json").parent)
        self.artifacts["models_topk"] = self.dir / f"models_top{k}"
        self.artifacts["train_features_topk"] = self.dir / f"train/features_top{k}.dcpm"
        self.artifacts["test_features_topk"] = self.dir / f"test/features_top{k}.dcpm"

    def _report(self, models_dir, feats_path, targets_path):
        fm = read_filtered_masks(feats_path)
        X = fm.bits.astype(np.float64)
        registry = read_registry(targets_path)
        models = roster_order(load_models(models_dir))
        report = {}
        for m in models:
            if m.name in registry:
                report[m.name] = evaluate_model(m, X, registry[m.name])
        return models, fm, report

    def stage_eval(self, cfg):
        models_dir, feats, targets = self.need("eval", "models", "test_features", "test_targets")
        seed = self.seed("eval")
        models, fm, report = self._report(models_dir, feats, targets)
        out = {"split": "test", "averaging": "macro", "tasks": report}
        if "models_topk" in self.artifacts:
            _, _, rep_k = self._report(self.artifacts["models_topk"], self.artifacts["test_features_topk"], targets)
            out["tasks_topk"] = rep_k
            top_models = roster_order(load_models(self.artifacts["models_topk"]))
            top_fm = read_filtered_masks(self.artifacts["train_features_topk"])
            hm = heatmap_rows(top_models, top_fm.channel_std, None, top_fm.channel_map, top_fm.channels_per_block)
        else:
            train_fm = read_filtered_masks(self.need("eval", "train_features"))
            hm = heatmap_rows(models, train_fm.channel_std, None, train_fm.channel_map, train_fm.channels_per_block)
        write_heatmap_csv(hm, self.out("reports/heatmap.csv"))
        self.out("reports/metrics.json").write_text(json.dumps(out, indent=1, sort_keys=True))

        k = int(cfg.get("pca_k", 32))
        frac = float(cfg.get("pca_fraction", 0.2))
        X = fm.bits.astype(np.float64)
        sub, idx = subsample_frames(X, frac, seed)
        k = min(k, sub.shape[1], sub.shape[0] - 1)
        pca = pca_fit(sub, k)
        registry = read_registry(targets)
        labels = {n: registry[n].values[idx].tolist() for n in ("vad", "gender") if n in registry}
        write_projection_csv(pca.transform(sub), self.out("reports/pca.csv"), idx, labels)

    def stage_infer(self, cfg):
        models_dir, feats = self.need("infer", "models", "test_features")
        from .inferbank import PredictorBank
        bank = PredictorBank.load(models_dir / "bank.json")
        fm = read_filtered_masks(feats)
        table = stream_infer(bank, fm)
        table.write_csv(self.out("reports/test_predictions.csv"))
        n_active = fm.bits.sum(axis=1)
        ops = {"n_outputs": bank.n_outputs, "n_features": bank.n_features,
               "worst_case": op_count(bank, 0)["worst_case"],
               "mean_adds": float(np.mean([op_count(bank, int(n))["adds"] for n in n_active])) if n_active.size else 0.0}
        self.out("reports/opcount.json").write_text(json.dumps(ops, indent=1, sort_keys=True))

    def stage_sv(self, cfg):
        seed = self.seed("sv")
        ftr, fte, ttr, tte, mtr, mte = self.need("sv", "train_features", "test_features", "train_targets",
                                                 "test_targets", "train_manifest", "test_manifest")
        emb = {}
        for split, f, t, m in (("train", ftr, ttr, mtr), ("test", fte, tte, mte)):
            emb[split] = utterance_embeddings(read_filtered_masks(f), read_registry(t)["vad"],
                                              StreamManifest.read(m))
            emb[split].save(self.out(f"sv/{split}_embeddings.json"))
        backend = fit_backend(emb["train"], int(cfg.get("lda_dims", 16)))
        backend.save(self.out("sv/backend.json"))
        stage = cfg.get("enroll_stage", "raw")
        results = {}
        for n_enr in cfg.get("n_enr", [1, 2, 3]):
            trials = make_trials(emb["test"], int(n_enr), int(cfg.get("ratio", 10)), seed)
            scores = score_trials(backend, emb["test"], trials, stage)
            trials.write_csv(self.out(f"sv/trials_nenr{n_enr}.csv"))
            write_scores_csv(trials, scores, self.out(f"sv/scores_nenr{n_enr}.csv"))
            results[str(n_enr)] = {"eer": eer(scores, [t.is_target for t in trials.trials]),
                                   "n_target": trials.n_target, "n_nontarget": trials.n_nontarget}
        self.out("sv/eer.json").write_text(json.dumps(
            {"enroll_stage": stage, "results": results}, indent=1, sort_keys=True))

    # ---------------------------------------------------------------- manifest

    def write_manifest(self):
        canon = json.dumps(self.config, sort_keys=True, default=str)
        files = sorted(p for p in self.dir.rglob("*") if p.is_file() and p.name != "run_manifest.json")
        manifest = {
            "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "config": self.config,
            "master_seed": self.master_seed,
            "stage_seeds": self.seeds,
            "stages": [s for s in STAGES if s in self.stages],
            "versions": {"maskprobe": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "files": {str(p.relative_to(self.dir)): _sha256(p) for p in files},
        }
        if self.record_timings:
            manifest["timings_s"] = self.timings
        (self.dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))


def run_pipeline(config_path, run_dir=None) -> Path:
    """Execute the stages listed in a TOML config; returns the run directory."""
    config_path = Path(config_path)
    config = load_config(config_path)
    out = run_dir or config.get("run", {}).get("out_dir")
    if out is None:
        raise ConfigError("no run directory: pass one or set [run] out_dir")
    out = Path(out)
    if not out.is_absolute() and run_dir is None:
        out = config_path.parent / out
    return Run(config, out, config_path.parent).execute()


__all__ = ["run_pipeline", "Run", "ConfigError", "MissingArtifact", "ContainerError", "stage_seed"]
