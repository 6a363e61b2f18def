"""Frame-level targets from a toy clean/noise pair.

A 4 s "utterance" (two harmonic bursts) is mixed with pink-ish noise, and the
VAD, SNR and windowed SI-SDR targets are computed and upsampled to frames.
"""

import numpy as np

from maskprobe.core import AudioStream, StftConfig
from maskprobe.targets import (SISDR_WINDOWS, frame_snr, rms_envelope, upsample_windowed,
                               vad_from_envelope, windowed_sisdr)

rng = np.random.default_rng(0)
sr = 16000
t = np.arange(4 * sr) / sr

# speech stand-in: two voiced bursts with a 150 Hz fundamental
envelope = ((t > 0.5) & (t < 1.7)) | ((t > 2.2) & (t < 3.4))
clean = envelope * sum(np.sin(2 * np.pi * 150 * h * t) / h for h in range(1, 6)) * 0.2

# low-passed white noise at roughly 5 dB below the speech
noise = np.convolve(rng.standard_normal(t.size), np.ones(8) / 8, mode="same") * 0.05
noisy = clean + noise

stft = StftConfig()
L = stft.frame_count(t.size)
print("samples", t.size, "-> frames", L)

rms_s = rms_envelope(clean, stft)
rms_n = rms_envelope(noise, stft)
vad = vad_from_envelope(rms_s)
snr = frame_snr(rms_s, rms_n, name="snr_in")
print("voice-active frames: %d of %d" % (vad.values.sum(), L))
print("median SNR inside speech: %.1f dB" % np.median(snr.values[vad.values == 1]))
print("SNR in silence (floor):   %.1f dB" % snr.values[:5].mean())

# SI-SDR on 1 s windows with 75 % overlap, then spread back over the frames
per_window = windowed_sisdr(AudioStream(clean, sr, "clean"), AudioStream(noisy, sr, "noisy"))
print("per-window SI-SDR:", np.round(per_window, 1))
frames = upsample_windowed(per_window, SISDR_WINDOWS, stft, L, name="sisdr_in")
print("frame SI-SDR range: %.1f .. %.1f dB" % (frames.values.min(), frames.values.max()))
