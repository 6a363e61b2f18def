"""Fold a trained suite into one predictor bank and count its operations.

With binary inputs a linear readout is just a gather-and-sum over the active
channels, so the per-frame cost is (active channels + 1) adds per output.
"""

import time

import numpy as np

from maskprobe.features import filter_masks
from maskprobe.inferbank import compile_bank, infer_frame, op_count, stream_infer
from maskprobe.probes import FitConfig, train_suite
from maskprobe.synth import default_codebook, make_speakers, synth_masks, synth_targets

reg, _ = synth_targets(6000, make_speakers(20, "s", 4), seed=4)
fm = filter_masks(synth_masks(reg, default_codebook(reg, ladder=16, flip_prob=0.02, seed=4)))
suite = train_suite(fm, reg, FitConfig(), names=["vad", "gender", "accent", "snr_in", "f0"])

bank = compile_bank(suite.models)
print("bank: %d outputs x %d channels" % (bank.n_outputs, bank.n_features))
print("outputs:", bank.output_names())

frame = fm.bits[1234]
active = np.flatnonzero(frame)
fast = infer_frame(bank, active)
slow = np.concatenate([m.decision_function(frame[None, :].astype(float))[0] for m in suite.models])
print("gather-and-sum agrees with the per-model dot products:", np.allclose(fast, slow, rtol=1e-12))

ops = op_count(bank, active.size)
print("active channels %d -> %d adds (worst case %d)" % (active.size, ops["adds"], ops["worst_case"]))

t0 = time.perf_counter()
table = stream_infer(bank, fm)
dt = time.perf_counter() - t0
print("streamed %d frames in %.1f ms; VAD classes %s" % (len(table), 1e3 * dt, np.bincount(table.classes["vad"])))
