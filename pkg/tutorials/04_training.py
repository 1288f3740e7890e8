"""
Training a small network and saving it
======================================

The loop shuffles with the plan's seed, halves the learning rate when the
validation loss stalls, and hands back the weights of the best epoch.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from cxrnet import ArrayDataset, ModelConfig, ResNet, TrainPlan, bce_loss, export_checkpoint, load_model, train
from cxrnet.data import Motif, SynthSpec, jitter, label_matrix, synth_dataset

# %% [markdown]
# The loss is binary cross-entropy averaged over all 15 outputs. A model that
# says 0.5 everywhere scores ln 2 whatever the labels are.

# %%
y = (np.random.default_rng(0).random((4, 15)) < 0.3).astype(np.float32)
print("constant 0.5:", bce_loss(y, np.full((4, 15), 0.5, np.float32)).value, "ln 2:", np.log(2))

# %% [markdown]
# Planted discs mark label 0 on half of the images.

# %%
corpus = synth_dataset(SynthSpec(n_patients=24, image_size=64, motifs=(Motif(0, radius=10),)), seed=0)
x = corpus.images[:, None].astype(np.float32) / 255
y = label_matrix(corpus.records).astype(np.float32)
train_set = ArrayDataset(x[:32], y[:32], augment=lambda im, rng: jitter(im, rng, 4))
val_set = ArrayDataset(x[32:], y[32:])

model = ResNet(ModelConfig(depth=38, width=2, input_size=64), seed=0)
plan = TrainPlan(batch_size=8, initial_lr=0.01, patience=2, max_epochs=8, seed=0)
result = train(model, plan, train_set, val_set,
               on_epoch=lambda r: print(f"epoch {r.epoch} train {r.train_loss:.4f} val {r.val_loss:.4f} lr {r.lr:g}"))
print("best epoch", result.best_epoch, "val loss", round(result.best_val_loss, 4))

# %% [markdown]
# A checkpoint is a JSON manifest plus a flat binary of named arrays. Loading
# it rebuilds the architecture from the manifest.

# %%
stem = Path(tempfile.mkdtemp()) / "model"
export_checkpoint(model, stem)
again = load_model(stem)
print("same predictions:", np.array_equal(model.predict(x[32:]), again.predict(x[32:])))
