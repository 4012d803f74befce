# # End to end on the synthetic task
#
# Generates a small version of the bundled 10-class task, trains a teacher,
# exports its logits, and trains two small students with and without the
# distillation term. Sizes are cut down so this finishes in a few minutes on
# a laptop CPU, and at this size the ordering of the two students can go either
# way; the acceptance suite runs the full-size protocol.

# %%
import tempfile
from pathlib import Path

from audiokd.dataset import TaggingDataset, read_manifest
from audiokd.distillation import KDConfig, TeacherLogitsStore
from audiokd.frontend import MelConfig
from audiokd.network import NetworkConfig
from audiokd.toy import ToyConfig, make_toy
from audiokd.trainer import ScheduleConfig, evaluate, init_state, predict, train_epoch

root = Path(tempfile.mkdtemp())
paths = make_toy(root, ToyConfig(n_train=400, n_eval=200, snr_db=(0.0, 20.0)))
mel = MelConfig(n_mels=64)
train = TaggingDataset(read_manifest(paths["train"], 10, "train"), mel)
ev = TaggingDataset(read_manifest(paths["eval"], 10, "eval"), mel)
print("features", train.features().shape)


def run(alpha, epochs, store=None, lam=1.0, seed=0):
    sched = ScheduleConfig(max_lr=3e-3, warmup_epochs=1, decay_start=0.4 * epochs,
                           decay_end=0.875 * epochs, total_epochs=epochs, batch_size=32)
    # short runs take few optimizer steps, so let batch-norm statistics follow faster
    net = NetworkConfig(alpha=alpha, n_mels=64, n_classes=10, bn_momentum=0.1)
    state = init_state(net, seed=seed)
    for _ in range(epochs):
        train_epoch(state, train, store, KDConfig(lam=lam), sched)
    return state.model


# %%
teacher = run(1.0, 20)
print("teacher mAP", round(evaluate(teacher, ev).map, 4))
store = TeacherLogitsStore(dict(zip(train.clip_ids, predict(teacher, train.features()))), 10)

# %%
for lam in (1.0, 0.1):
    student = run(0.25, 20, store if lam < 1 else None, lam)
    print(f"student lam={lam}: mAP {evaluate(student, ev).map:.4f}")
