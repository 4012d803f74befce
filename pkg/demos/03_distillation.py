# # Distillation loss, teacher stores and mixup
#
# The student minimises lam * BCE(student, labels) + (1 - lam) * BCE(student,
# sigmoid(teacher / tau)). Teacher logits are precomputed and kept in a
# compact binary store.

# %%
import tempfile
from pathlib import Path

import numpy as np

from audiokd.distillation import (KDConfig, TeacherLogitsStore, average_ensemble, kd_loss, mixup_batch,
                                  read_store, sample_mix_lambda, teacher_soft_labels, write_store)

rng = np.random.default_rng(0)
z_student = rng.normal(size=(4, 6))
y = (rng.random((4, 6)) < 0.3).astype(float)
z_teacher = rng.normal(0, 2, size=(4, 6))

for lam in (0.0, 0.1, 0.5, 1.0):
    loss = kd_loss(z_student, y, teacher_soft_labels(z_teacher, 1.0), KDConfig(lam=lam))
    print(f"lam={lam:.1f}: loss {loss.item():.4f}")

# %% [markdown]
# An ensemble of teachers is the mean of their logits. Stores round-trip
# through the KDL1 file format bit for bit.

# %%
ids = [f"clip{i}" for i in range(4)]
a = TeacherLogitsStore(dict(zip(ids, z_teacher.astype(np.float32))), 6, "passt_a")
b = TeacherLogitsStore(dict(zip(ids, (z_teacher + 1).astype(np.float32))), 6, "passt_b")
ens = average_ensemble([a, b])
print("ensemble shift:", float(np.mean(ens.matrix(ids) - a.matrix(ids))))
with tempfile.TemporaryDirectory() as d:
    path = write_store(ens, Path(d) / "ens.kdl")
    print(path.stat().st_size, "bytes; round trip equal:", read_store(path) == ens)

# %% [markdown]
# Mixup blends two spectrograms; hard labels blend linearly and teacher soft
# labels blend after the sigmoid, so both stay in [0, 1].

# %%
specs = rng.normal(size=(4, 8, 10))
lam = sample_mix_lambda(0.3, rng, size=4)
soft = teacher_soft_labels(z_teacher, 1.0)
mixed_specs, mixed_y, mixed_soft = mixup_batch(specs, y, soft, lam, rng.permutation(4))
print("mixing weights", np.round(lam, 3), "(always >= 0.5)")
print("soft label range", mixed_soft.min().round(3), mixed_soft.max().round(3))
