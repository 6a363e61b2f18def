"""Speaker verification from utterance-mean masks.

Utterance embeddings are averages of the voice-active mask rows.  A WCCN +
LDA backend trained on one speaker set scores cosine trials on another.
"""

import numpy as np

from maskprobe.sv import eer, fit_backend, make_trials, score_trials, utterance_embeddings
from maskprobe.synth import default_codebook, make_speakers, synth_masks, synth_targets

train_reg, train_man = synth_targets(30000, make_speakers(40, "tr", 7), seed=7, utt_frames=(60, 120))
test_reg, test_man = synth_targets(16000, make_speakers(16, "te", 8), seed=8, split="test",
                                  utt_frames=(60, 120))

codebook = default_codebook(train_reg, ladder=16, flip_prob=0.05, seed=9)
# the codebook's speaker channels are class subsets, so the test speakers are
# encoded through their own (unseen) class indices
G_train = synth_masks(train_reg, codebook)
G_test = synth_masks(test_reg, codebook, strict=False)

emb_train = utterance_embeddings(G_train, train_reg["vad"], train_man)
emb_test = utterance_embeddings(G_test, test_reg["vad"], test_man)
print("embeddings: %d train / %d test utterances, dim %d"
      % (len(emb_train.ids), len(emb_test.ids), emb_train.vectors.shape[1]))

backend = fit_backend(emb_train, lda_dims=16)
for n_enr in (1, 2, 3):
    trials = make_trials(emb_test, n_enr=n_enr, ratio=10, seed=n_enr)
    scores = score_trials(backend, emb_test, trials)
    labels = np.array([t.is_target for t in trials.trials])
    print("N_enr=%d: %d target / %d non-target trials, EER = %.1f %%"
          % (n_enr, trials.n_target, trials.n_nontarget, 100 * eer(scores, labels)))
