"""``maskprobe`` command line entry point.

Exit codes: 0 ok, 2 configuration/usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import (
    DCPM_MAGIC,
    AudioStream,
    BaselineFeatures,
    ContainerError,
    FilteredMasks,
    StftConfig,
    StreamManifest,
    check_disjoint_speakers,
    read_feature_matrix,
    read_filtered_masks,
    read_mask_file,
    read_registry,
    sidecar_path,
    write_filtered_masks,
    write_mask_file,
    write_registry,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("maskprobe")


class UsageError(Exception):
    pass


def _kv_pairs(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"expected NAME=PATH, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()] if text else []


def load_features(path):
    """A filtered DCPM (with sidecar), a raw DCPM, or a baseline float matrix."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == DCPM_MAGIC:
        if sidecar_path(path).exists():
            return read_filtered_masks(path)
        m = read_mask_file(path)
        return FilteredMasks(m.bits, np.arange(m.n_channels), m.bits.std(axis=0),
                             m.n_blocks, m.channels_per_block, None)
    return BaselineFeatures(path.stem, read_feature_matrix(path))


# ------------------------------------------------------------------ commands


def cmd_assemble(a):
    from .assembly import assemble_stream, read_noise_pool, read_speech_pool, stratified_order

    cfg = StftConfig(a.sample_rate, a.window, a.hop, a.fft)
    speech = read_speech_pool(a.speech, a.split)
    entries = speech.entries
    if a.speakers:
        keep = set(Path(a.speakers).read_text().split())
        entries = tuple(e for e in entries if e.speaker_id in keep)
    noise = read_noise_pool(a.noise)
    rng = np.random.default_rng(a.seed)
    s_speech, s_noise = (int(v) for v in rng.integers(0, 2**31, 2))
    s_order = stratified_order(entries, ("gender", "accent"), s_speech)
    n_order = stratified_order(noise.entries, ("noise_category",), s_noise)
    s, n, x, manifest = assemble_stream(s_order, n_order, a.seed, cfg, split=a.split)
    for other in a.disjoint_from or []:
        check_disjoint_speakers(manifest, StreamManifest.read(other))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, st in (("clean", s), ("noise", n), ("noisy", x)):
        np.save(out / f"{name}.npy", st.samples)
    from scipy.io import wavfile
    wavfile.write(out / "noisy.wav", cfg.sample_rate, x.samples.astype(np.float32))
    manifest.write(out / "manifest.json")
    print(f"assembled {len(s)} samples, {manifest.n_frames} frames, {len(manifest.segments)} utterances -> {out}")


def _load_stream(d: Path, name: str, rate: int, role: str):
    if (d / f"{name}.npy").exists():
        return AudioStream(np.load(d / f"{name}.npy"), rate, role)
    if (d / f"{name}.wav").exists():
        from .assembly import load_wav
        return AudioStream(load_wav(d / f"{name}.wav", rate), rate, role)
    return None


def cmd_targets(a):
    from .assembly import labels_from_manifest
    from .inferbank import ROSTER_IQR
    from .targets import (
        PESQ_WINDOWS, SISDR_WINDOWS, VadParams, frame_snr, gate_by_vad, ingest_external_target,
        rms_envelope, upsample_windowed, vad_from_envelope, windowed_sisdr,
    )
    from .core import read_target_rows

    d = Path(a.stream_dir)
    manifest = StreamManifest.read(d / "manifest.json")
    cfg = manifest.stft
    s = _load_stream(d, "clean", cfg.sample_rate, "clean")
    n = _load_stream(d, "noise", cfg.sample_rate, "noise")
    x = _load_stream(d, "noisy", cfg.sample_rate, "noisy")
    if s is None or n is None or x is None:
        raise ContainerError(f"{d}: need clean, noise and noisy streams")
    enh = _load_stream(d, "enhanced", cfg.sample_rate, "enhanced")
    L = cfg.frame_count(len(s))
    params = VadParams(a.vad_smooth, a.vad_threshold_db, 95.0, a.vad_smooth2, a.vad_threshold2)
    rms_s = rms_envelope(s, cfg)
    vad = vad_from_envelope(rms_s, params)
    reg = {"vad": vad}
    for key in ("gender", "accent"):
        reg[key] = gate_by_vad(labels_from_manifest(manifest, key, n_frames=L), vad)
    reg["noise_category"] = labels_from_manifest(manifest, "noise_category", n_frames=L)
    reg["speaker"] = labels_from_manifest(manifest, "speaker", n_frames=L)

    def gated(ts, name):
        return gate_by_vad(type(ts)(name, ts.kind, ts.values, ts.valid, None, ROSTER_IQR.get(name)), vad)

    reg["snr_in"] = gated(frame_snr(rms_s, rms_envelope(n, cfg)), "snr_in")
    reg["sisdr_in"] = gated(upsample_windowed(windowed_sisdr(s, x, SISDR_WINDOWS), SISDR_WINDOWS, cfg, L), "sisdr_in")
    if enh is not None:
        resid = AudioStream(enh.samples - s.samples, cfg.sample_rate, "noise")
        reg["snr_enh"] = gated(frame_snr(rms_s, rms_envelope(resid, cfg)), "snr_enh")
        reg["sisdr_enh"] = gated(upsample_windowed(windowed_sisdr(s, enh, SISDR_WINDOWS), SISDR_WINDOWS, cfg, L),
                                 "sisdr_enh")
    for name, path in _kv_pairs(a.external).items():
        reg[name] = ingest_external_target(path, name, iqr=ROSTER_IQR.get(name), n_frames=L)
    for name, path in _kv_pairs(a.external_windows).items():
        values, _ = read_target_rows(path)
        ts = upsample_windowed(values, PESQ_WINDOWS, cfg, L, name)
        reg[name] = type(ts)(name, ts.kind, ts.values, ts.valid, None, ROSTER_IQR.get(name))
    write_registry(reg, a.out_dir, {"vad_params": params.__dict__, "snr_scale": "20*log10 amplitude ratio"})
    print(f"wrote {len(reg)} targets of {L} frames -> {a.out_dir}")


def cmd_features(a):
    from .features import filter_masks, rank_features, restrict_blocks, select_columns
    from .probes import load_models

    fm = filter_masks(read_mask_file(a.masks), a.tau)
    if a.blocks:
        fm = restrict_blocks(fm, _int_list(a.blocks))
    if a.topk:
        if not a.models:
            raise UsageError("--topk needs --models")
        models = load_models(a.models)
        if a.per_task:
            models = [m for m in models if m.name == a.per_task]
            if not models:
                raise UsageError(f"no model named {a.per_task!r} in {a.models}")
        fm = select_columns(fm, rank_features(models, fm.channel_std)[: a.topk])
    write_filtered_masks(fm, a.out)
    print(f"kept {fm.n_kept} of {fm.n_blocks * fm.channels_per_block} channels -> {a.out}")


def cmd_train(a):
    from .inferbank import compile_bank, roster_order
    from .probes import FitConfig, save_models, train_suite

    feats = load_features(a.features)
    registry = read_registry(a.targets)
    names = a.only.split(",") if a.only else [n for n in registry if n != "speaker"]
    result = train_suite(feats, registry, FitConfig(alpha=a.alpha, max_iters=a.max_iters), names)
    models = roster_order(result.models)
    out = Path(a.out)
    save_models(models, out)
    if models:
        compile_bank(models).save(out / "bank.json")
    (out / "errors.json").write_text(json.dumps(result.errors, indent=1, sort_keys=True))
    print(f"trained {len(models)} probes ({len(result.errors)} failed) -> {out}")
    return EXIT_DATA if not models else EXIT_OK


def cmd_infer(a):
    from .inferbank import PredictorBank, gather_bank_columns, stream_infer

    bank = PredictorBank.load(a.bank)
    path = Path(a.masks)
    masks = read_filtered_masks(path) if sidecar_path(path).exists() else read_mask_file(path)
    table = stream_infer(bank, gather_bank_columns(bank, masks))
    table.write_csv(a.out)
    print(f"{len(table)} frames x {bank.n_outputs} outputs -> {a.out}")


def cmd_eval(a):
    from .evalmetrics import evaluate_model, heatmap_rows, pca_fit, subsample_frames, write_heatmap_csv, \
        write_projection_csv
    from .inferbank import roster_order
    from .probes import feature_matrix, load_models

    feats = load_features(a.features)
    registry = read_registry(a.targets)
    models = roster_order(load_models(a.models))
    if isinstance(feats, BaselineFeatures) and models and models[0].feature_space.get("type") == "baseline":
        fs = models[0].feature_space
        feats = BaselineFeatures(feats.kind, feats.values, np.asarray(fs["zscore_mean"]), np.asarray(fs["zscore_std"]))
        from .features import zscore
        X = zscore(feats.values, (feats.zscore_mean, feats.zscore_std))[0]
    else:
        X, _ = feature_matrix(feats)
    report = {m.name: evaluate_model(m, X, registry[m.name]) for m in models if m.name in registry}
    Path(a.out).write_text(json.dumps({"averaging": "macro", "tasks": report}, indent=1, sort_keys=True))
    if a.heatmap:
        if not isinstance(feats, FilteredMasks):
            raise UsageError("--heatmap needs mask features")
        std = np.asarray(json.loads(sidecar_path(a.train_features).read_text())["channel_std"]) \
            if a.train_features else feats.channel_std
        write_heatmap_csv(heatmap_rows(models, std, None, feats.channel_map, feats.channels_per_block), a.heatmap)
    if a.pca:
        sub, idx = subsample_frames(X, a.pca_fraction, a.seed)
        pca = pca_fit(sub, min(a.pca_k, sub.shape[1], sub.shape[0] - 1))
        write_projection_csv(pca.transform(sub), a.pca, idx)
    print(json.dumps(report, indent=1, sort_keys=True))


def cmd_embed(a):
    from .sv import utterance_embeddings

    feats = load_features(a.features)
    registry = read_registry(a.targets)
    frames = feats.values if isinstance(feats, BaselineFeatures) else feats
    emb = utterance_embeddings(frames, registry["vad"], StreamManifest.read(a.manifest))
    emb.save(a.out)
    print(f"{len(emb)} embeddings -> {a.out}")


def cmd_sv(a):
    from .sv import EmbeddingSet, eer, fit_backend, make_trials, score_trials, write_scores_csv

    e = Path(a.embeddings)
    train = EmbeddingSet.load(e / "train_embeddings.json")
    test = EmbeddingSet.load(e / "test_embeddings.json")
    backend = fit_backend(train, a.lda_dims)
    trials = make_trials(test, a.nenr, a.ratio, a.seed)
    scores = score_trials(backend, test, trials, a.enroll_stage)
    out = Path(a.out or e)
    out.mkdir(parents=True, exist_ok=True)
    trials.write_csv(out / f"trials_nenr{a.nenr}.csv")
    write_scores_csv(trials, scores, out / f"scores_nenr{a.nenr}.csv")
    rate = eer(scores, [t.is_target for t in trials.trials])
    print(json.dumps({"n_enr": a.nenr, "eer": rate, "n_target": trials.n_target,
                      "n_nontarget": trials.n_nontarget}))


def cmd_synth(a):
    from .synth import Codebook, default_codebook, make_speakers, synth_masks, synth_targets

    if a.generate_targets:
        speakers = make_speakers(a.speakers, a.speaker_prefix, a.seed)
        reg, manifest = synth_targets(a.generate_targets, speakers, a.seed, a.split)
        write_registry(reg, a.targets)
        manifest.write(Path(a.targets) / "manifest.json")
    registry = read_registry(a.targets)
    cb_path = Path(a.codebook)
    if cb_path.exists():
        cb = Codebook.load(cb_path)
    elif a.new_codebook:
        cb = default_codebook(registry, a.ladder, flip_prob=a.flip_prob, seed=a.seed)
        cb.save(cb_path)
    else:
        raise UsageError(f"codebook {cb_path} does not exist (use --new-codebook to create one)")
    masks = synth_masks(registry, cb, strict=not a.lenient)
    write_mask_file(masks, a.out)
    print(f"synthesized {masks.n_frames} x {masks.n_channels} masks -> {a.out}")


def cmd_run(a):
    from .pipeline import run_pipeline

    out = run_pipeline(a.config, a.out_dir)
    print(f"run directory: {out}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskprobe", description="Auxiliary estimators from dynamic channel-pruning masks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("assemble", help="build continuous clean/noise/noisy streams and a manifest")
    s.add_argument("--speech", required=True, help="speech pool CSV (id,path,speaker_id,gender,accent)")
    s.add_argument("--noise", required=True, help="noise pool CSV (id,path,noise_category)")
    s.add_argument("--split", default="train", choices=["train", "test"], help="split tag written to the manifest")
    s.add_argument("--seed", type=int, default=0, help="master seed for the stratified orders")
    s.add_argument("--speakers", help="file listing speaker ids for this split (whitespace separated)")
    s.add_argument("--disjoint-from", nargs="*", help="manifests whose speakers must not appear in this split")
    s.add_argument("--sample-rate", type=int, default=16000, help="expected WAV sample rate in Hz")
    s.add_argument("--window", type=int, default=512, help="STFT window length in samples")
    s.add_argument("--hop", type=int, default=256, help="STFT hop in samples")
    s.add_argument("--fft", type=int, default=512, help="FFT size in samples")
    s.add_argument("--out-dir", required=True, help="directory for clean/noise/noisy streams and manifest.json")
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("targets", help="compute frame-aligned ground truths for an assembled stream")
    s.add_argument("--stream-dir", required=True, help="output directory of 'assemble' (optionally with enhanced.npy/.wav)")
    s.add_argument("--out-dir", required=True, help="target directory (targets.json + one CSV per target)")
    s.add_argument("--external", nargs="*", metavar="NAME=CSV", help="per-frame series to ingest, e.g. f0=f0.csv")
    s.add_argument("--external-windows", nargs="*", metavar="NAME=CSV",
                   help="per-window PESQ values (3 s / 75%% schedule) to upsample, e.g. pesq_in=pesq.csv")
    s.add_argument("--vad-smooth", type=int, default=11, help="first moving-average length (frames, odd)")
    s.add_argument("--vad-threshold-db", type=float, default=-40.0, help="threshold relative to 95th-percentile RMS")
    s.add_argument("--vad-smooth2", type=int, default=11, help="second moving-average length (frames, odd)")
    s.add_argument("--vad-threshold2", type=float, default=0.5, help="second binarization threshold")
    s.set_defaults(func=cmd_targets)

    s = sub.add_parser("features", help="filter masks by channel std, optionally restrict blocks / pick top-k")
    s.add_argument("--masks", required=True, help="DCPM mask file")
    s.add_argument("--tau", type=float, default=0.005, help="minimum channel standard deviation")
    s.add_argument("--blocks", help="comma-separated block indices to keep")
    s.add_argument("--topk", type=int, default=0, help="keep the k most informative channels")
    s.add_argument("--models", help="directory of probes trained on the filtered masks (for --topk)")
    s.add_argument("--per-task", help="rank using only this target's probe instead of all")
    s.add_argument("--out", required=True, help="output DCPM (a .json sidecar is written next to it)")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="fit one linear probe per target")
    s.add_argument("--features", required=True, help="filtered DCPM or baseline float matrix")
    s.add_argument("--targets", required=True, help="target directory (targets.json + CSVs)")
    s.add_argument("--alpha", type=float, default=0.01, help="l2 regularization factor")
    s.add_argument("--max-iters", type=int, default=2000, help="logistic optimizer iteration cap")
    s.add_argument("--only", help="comma-separated subset of targets")
    s.add_argument("--out", required=True, help="model directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run a compiled predictor bank over mask frames")
    s.add_argument("--bank", required=True, help="bank.json written by train")
    s.add_argument("--masks", required=True, help="raw or filtered DCPM")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score trained probes on a split")
    s.add_argument("--models", required=True, help="model directory written by train")
    s.add_argument("--features", required=True, help="features of the evaluated split")
    s.add_argument("--targets", required=True, help="targets of the evaluated split")
    s.add_argument("--out", required=True, help="metrics report JSON")
    s.add_argument("--heatmap", help="write normalized coefficient heatmap CSV")
    s.add_argument("--train-features", help="training features whose channel std scales the heatmap")
    s.add_argument("--pca", help="write PCA projection CSV")
    s.add_argument("--pca-k", type=int, default=32, help="principal components to export")
    s.add_argument("--pca-fraction", type=float, default=0.2, help="fraction of frames used for PCA")
    s.add_argument("--seed", type=int, default=0, help="seed of the PCA frame subset")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("embed", help="utterance-level mask embeddings for speaker verification")
    s.add_argument("--features", required=True, help="filtered DCPM or baseline matrix")
    s.add_argument("--targets", required=True, help="target directory containing the VAD series")
    s.add_argument("--manifest", required=True, help="manifest.json of the same stream")
    s.add_argument("--out", required=True, help="embedding JSON (train_embeddings.json / test_embeddings.json)")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("sv", help="WCCN+LDA backend, trials and EER")
    s.add_argument("--embeddings", required=True, help="directory with train_embeddings.json and test_embeddings.json")
    s.add_argument("--nenr", type=int, default=1, help="enrollment utterances per speaker")
    s.add_argument("--ratio", type=int, default=10, help="non-target trials per target trial")
    s.add_argument("--lda-dims", type=int, default=16, help="LDA output dimensions")
    s.add_argument("--enroll-stage", choices=["raw", "projected"], default="raw",
                   help="average enrollment embeddings before or after projection")
    s.add_argument("--seed", type=int, default=0, help="trial sampling seed")
    s.add_argument("--out", help="output directory (default: embeddings directory)")
    s.set_defaults(func=cmd_sv)

    s = sub.add_parser("synth", help="synthesize masks from targets with a codebook")
    s.add_argument("--targets", required=True, help="target directory")
    s.add_argument("--codebook", required=True, help="codebook JSON")
    s.add_argument("--out", required=True, help="output DCPM")
    s.add_argument("--new-codebook", action="store_true", help="create a default codebook if missing")
    s.add_argument("--ladder", type=int, default=64, help="thresholds per continuous target (new codebooks)")
    s.add_argument("--flip-prob", type=float, default=0.0, help="bit flip probability (new codebooks)")
    s.add_argument("--generate-targets", type=int, metavar="FRAMES", help="first write synthetic targets of this length")
    s.add_argument("--speakers", type=int, default=40, help="speakers in generated targets")
    s.add_argument("--speaker-prefix", default="p", help="speaker id prefix in generated targets")
    s.add_argument("--split", default="train", help="split tag of generated targets")
    s.add_argument("--lenient", action="store_true", help="allow targets without codebook channels")
    s.add_argument("--seed", type=int, default=0, help="seed for generated targets and new codebooks")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", help="run a TOML-configured pipeline")
    s.add_argument("config")
    s.add_argument("--out-dir", help="run directory (overrides [run] out_dir)")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    from .pipeline import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"maskprobe: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"maskprobe: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
