# # Log-mel front end
#
# Clips are resampled to 32 kHz, cut into 25 ms Hann windows every 10 ms and
# mapped onto 128 mel bands. This script walks through the shapes and a few
# sanity properties.

# %%
import numpy as np

from audiokd.frontend import MelConfig, WaveformClip, compute_mel, frame_count, mel_band_centers

cfg = MelConfig()
print("window", cfg.win_length, "samples, hop", cfg.hop_length, "samples, n_fft", cfg.n_fft)

# %% [markdown]
# A ten second clip gives roughly one frame per 10 ms. Halving the time
# resolution (hop 20 ms) halves the frame count, which is what makes the
# convolutional cost scale with the hop length.

# %%
for hop in (10, 15, 20, 25):
    print(f"hop {hop:2d} ms -> {frame_count(320_000, MelConfig(hop_ms=hop))} frames")

# %% [markdown]
# A pure tone lands in the band whose centre matches its frequency.

# %%
centers = mel_band_centers(cfg)
band = 60
t = np.arange(32_000) / 32_000
spec = compute_mel(WaveformClip(np.sin(2 * np.pi * centers[band] * t)), cfg)
print(f"tone at {centers[band]:.0f} Hz peaks in band {spec.values.mean(axis=1).argmax()} (expected {band})")

# %% [markdown]
# Silence maps to the log floor everywhere.

# %%
silent = compute_mel(WaveformClip(np.zeros(32_000)), cfg).values
print("silence:", np.unique(silent), "== log(1e-5) =", np.log(1e-5))
