"""
Cleaning a trial: band-pass, zero phase, spectral masking
=========================================================

A raw trial is five channels of about 384 samples at 128 Hz, riding on a
large DC offset. Each channel is cut or padded to 384 samples, run through a
linear-phase FIR band-pass forwards and backwards, then an STFT mask removes
whatever survives above the cutoff.
"""

import numpy as np

from eegtext.dsp import (FilterSpec, StftSpec, filtfilt, fir_design, fix_length, freq_response,
                         stft, stft_denoise)

fs = 128.0
t = np.arange(384) / fs

# a 10 Hz rhythm, mains hum at 60 Hz and an electrode offset
raw = 4200.0 + np.sin(2 * np.pi * 10 * t) + 0.8 * np.sin(2 * np.pi * 60 * t)

###############################################################################
# The filter: 129 Hamming-windowed taps, 0.5 to 50 Hz

taps = fir_design(FilterSpec())
for f in (0.0, 0.5, 10.0, 25.0, 50.0, 60.0):
    gain = abs(freq_response(taps, f, fs))
    print(f"{f:5.1f} Hz  {20 * np.log10(max(gain, 1e-300)):8.2f} dB")

###############################################################################
# Forward-backward filtering doubles the attenuation and cancels the delay,
# so the 10 Hz peaks stay where they were.

clean = filtfilt(fix_length(raw), taps)
lag = np.arange(-383, 384)[np.argmax(np.correlate(clean, np.sin(2 * np.pi * 10 * t), "full"))]
print("offset left after filtering:", round(float(clean[64:-64].mean()), 4))
print("lag against the 10 Hz component:", lag, "samples")

###############################################################################
# Short-time spectrum: 32-sample periodic Hann frames with a hop of 16.
# Bins are 4 Hz apart, so 60 Hz lands in bin 15.

spec = StftSpec()
frames = stft(clean, spec)
print("frames x bins:", frames.shape)
print("bin centres:", spec.bin_freqs[:5], "...", spec.bin_freqs[-3:])
print("kept bins:", np.flatnonzero(spec.mask()))

masked = stft_denoise(clean, spec)
residual_60 = np.abs(np.fft.rfft(masked * np.hanning(384)))[180]
print("60 Hz magnitude after masking: %.2e" % residual_60)
