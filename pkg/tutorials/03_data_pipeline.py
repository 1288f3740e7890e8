"""
From entry CSV to training batches
==================================

A synthetic corpus stands in for the real one: same CSV columns, PNG images,
and optionally a planted motif whose location is known.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from cxrnet.data import (AgeScaler, Motif, RecordDataset, SynthSpec, augment_train, corpus_stats, encode_labels,
                         make_splits, parse_entry_csv, preprocess_eval, synth_dataset, write_corpus)

# %% [markdown]
# Labels are a 15-vector. An empty finding string means "No Finding".

# %%
print(encode_labels("Cardiomegaly|Effusion"))
print(encode_labels(""))

# %%
root = Path(tempfile.mkdtemp())
spec = SynthSpec(n_patients=300, images_per_patient=3, skewed_patients=True, image_size=96,
                 motifs=(Motif(0, radius=14),), background_rate=0.05)
csv_path = write_corpus(synth_dataset(spec, seed=0), root)
records = parse_entry_csv(csv_path)
stats = corpus_stats(records)
print(stats.n_records, "images from", stats.n_patients, "patients")
print(stats.disease_table())
print(stats.meta_table())

# %% [markdown]
# Five patient-disjoint re-samples. Whole patients move together, so the
# image fractions are close to 70/10/20 without being exact.

# %%
plan = make_splits(records, seed=0)
for r in range(plan.n_resamples):
    c = plan.counts(records, r)
    print(r, {s: c[s]["images"] for s in c})

# %% [markdown]
# Training images are rotated, cropped, flipped and resized. Evaluation
# images are resized and centre-cropped.

# %%
raw = np.asarray(synth_dataset(spec, 0).images[0])
rng = np.random.default_rng(1)
print("train view", augment_train(raw, rng, 64).shape, "eval view", preprocess_eval(raw, 64).shape)

# %% [markdown]
# Ages are scaled with the training subset's range. The dataset object hands
# out (images, meta, labels) batches.

# %%
train_idx = plan.indices(records, 0, "train")
scaler = AgeScaler.fit([records[i].age_years for i in train_idx])
ds = RecordDataset([records[i] for i in train_idx], 64, scaler, image_dir=root / "images", train=True,
                   use_meta=True)
images, meta, labels = ds.batch(np.arange(8), rng)
print(images.shape, meta[:3], labels.sum(axis=0))
