"""Probe masks whose channels are known functions of the targets.

The synthetic codebook writes each target into a handful of channels (with
bit-flip noise) and leaves the rest constant.  Constant channels must be
filtered out, and linear probes on the survivors should recover the targets.
"""

import numpy as np

from maskprobe.evalmetrics import evaluate_model
from maskprobe.features import filter_masks, rank_features, top_k
from maskprobe.probes import FitConfig, feature_matrix, train_suite
from maskprobe.synth import default_codebook, make_speakers, synth_masks, synth_targets

# Utterance-level labels (noise category, accent) only vary between utterances,
# so a short stream with few utterances lets the probes memorize them through
# unrelated channels.  20k frames gives about a hundred utterances.
train_reg, _ = synth_targets(20000, make_speakers(30, "tr", 1), seed=1)
test_reg, _ = synth_targets(10000, make_speakers(10, "te", 2), seed=2, split="test")

codebook = default_codebook(train_reg, ladder=32, flip_prob=0.05, seed=3)
print("codebook: %d rules in %d channels (%.0f %% constant)"
      % (len(codebook.rules), codebook.n_channels, 100 * codebook.constant_fraction))

G_train = synth_masks(train_reg, codebook)
G_test = synth_masks(test_reg, codebook, strict=False)
fm = filter_masks(G_train)
print("after the variance filter:", fm.bits.shape[1], "channels kept")

targets = ["vad", "gender", "accent", "noise_category", "snr_in", "pesq_in", "f0"]
suite = train_suite(fm, train_reg, FitConfig(alpha=0.01), names=targets)

X_test = G_test.bits[:, fm.channel_map].astype(float)
for model in suite:
    m = evaluate_model(model, X_test, test_reg[model.name])
    key = "accuracy" if "accuracy" in m else "r2"
    print("  %-15s %-9s %s = %.3f" % (model.name, model.kind, key, m[key]))

# which channels matter most across the suite?
X, _ = feature_matrix(fm)
ranking = rank_features(suite.models, X.std(axis=0))
print("top-5 channels (flat index):", fm.channel_map[ranking[:5]].tolist())
small = top_k(fm, suite.models, k=64)
print("top-64 subset shape:", small.bits.shape)
