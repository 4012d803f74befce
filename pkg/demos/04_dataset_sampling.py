# # Manifests, importance sampling and augmentation
#
# Rare labels are drawn more often: each clip's weight is the sum over its
# labels of one over that label's frequency, and an epoch draws a subset
# without replacement.

# %%
import numpy as np

from audiokd.dataset import (DatasetManifest, ManifestRow, SamplerState, compute_sample_weights,
                             gain_augment, roll_waveform, sample_epoch, spec_masking)

rows = [ManifestRow(f"common{i}", "x.wav", (0,)) for i in range(95)]
rows += [ManifestRow(f"rare{i}", "x.wav", (1,)) for i in range(5)]
manifest = DatasetManifest(rows, class_count=2)
w = compute_sample_weights(manifest)
print("weight common:", w[0], " rare:", w[-1])

state = SamplerState(w, seed=0, sample_size=20)
counts = np.zeros(2)
for epoch in range(200):
    idx = sample_epoch(state, epoch)
    counts += [np.sum(idx < 95), np.sum(idx >= 95)]
print("share of rare clips in the drawn subsets:", counts[1] / counts.sum(), "vs 0.05 in the data")

# %% [markdown]
# Waveform and spectrogram augmentations are pure functions of their input and
# an explicit random generator.

# %%
rng = np.random.default_rng(0)
x = np.array([1.0, 2.0, 3.0, 4.0])
print("roll by 1:", roll_waveform(x, 1))
print("+6.02 dB:", gain_augment(x * 0.1, gain_db=6.0206))
spec = np.arange(40, dtype=float).reshape(4, 10)
print(spec_masking(spec, rng, n_time_masks=1, max_t=3, n_freq_masks=1, max_f=1))
