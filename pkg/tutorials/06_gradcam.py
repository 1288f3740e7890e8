"""
Where does the network look?
============================

Grad-CAM weights each final feature map by the mean gradient of one label's
logit and keeps the positive part of the weighted sum.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from cxrnet import ArrayDataset, ModelConfig, ResNet, TrainPlan, export_heatmap, grad_cam, train
from cxrnet.data import Motif, SynthSpec, jitter, label_matrix, synth_dataset

# %% [markdown]
# Train on a corpus where a bright disc means label 0. Shifting and flipping
# the images keeps the network from memorizing positions. At 128 px the last
# stage is a 4 x 4 grid, coarse but enough to tell quadrants apart. This cell
# takes about a minute on one core.

# %%
size = 128
corpus = synth_dataset(SynthSpec(n_patients=16, image_size=size, motifs=(Motif(0, radius=28),)), seed=0)
x = corpus.images[:, None].astype(np.float32) / 255
y = label_matrix(corpus.records).astype(np.float32)
model = ResNet(ModelConfig(depth=38, width=8, input_size=size), seed=0)
train(model, TrainPlan(batch_size=16, initial_lr=1e-3, patience=5, max_epochs=100, seed=0),
      ArrayDataset(x, y, augment=jitter), ArrayDataset(x, y))

# %% [markdown]
# Count how often the hottest pixel lands inside the disc's bounding box.

# %%
hits = total = 0
for i in range(len(corpus)):
    box = corpus.box(i, 0)
    if box is None:
        continue
    r, c = grad_cam(model, x[i], label_index=0).peak
    total += 1
    hits += box[0] <= r < box[2] and box[1] <= c < box[3]
print(f"peak inside the disc on {hits} of {total} images")

# %% [markdown]
# Heatmaps export as a CSV of the coarse grid, a grayscale map and an overlay.

# %%
first = next(i for i in range(len(corpus)) if corpus.box(i, 0) is not None)
hm = grad_cam(model, x[first], label_index=0)
files = export_heatmap(hm, x[first], Path(tempfile.mkdtemp()) / "example")
print("grid", hm.grid.shape, "files", sorted(p.name for p in files.values()))
