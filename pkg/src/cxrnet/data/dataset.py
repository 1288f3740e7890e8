"""Record-backed dataset: decoded images plus scaled meta features per batch."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from cxrnet.data.records import Record, label_matrix
from cxrnet.data.transforms import AgeScaler, augment_train, load_image, preprocess_eval
from cxrnet.tensor import DTYPE


def meta_matrix(records: list[Record], scaler: AgeScaler) -> np.ndarray:
    """``[N, 3]`` rows of (scaled age, gender, view)."""
    ages = scaler(np.array([r.age_years for r in records], dtype=np.float64))
    return np.column_stack([
        np.atleast_1d(ages),
        [r.gender for r in records],
        [r.view for r in records],
    ]).astype(DTYPE)


class RecordDataset:
    """Images are read from ``image_dir / record.image_ref`` (or taken from
    ``images`` when given) and preprocessed per batch.

    With ``train=True`` and a generator, each image gets the random
    augmentation; otherwise the deterministic resize and center crop.
    """

    def __init__(self, records: list[Record], size: int, scaler: AgeScaler | None = None,
                 image_dir=None, images: np.ndarray | None = None, train: bool = False,
                 channels: int = 1, use_meta: bool = False, cache: bool = True):
        self.records = list(records)
        self.size = size
        self.scaler = scaler
        self.image_dir = Path(image_dir) if image_dir is not None else None
        self.images = images
        self.train = train
        self.channels = channels
        self.use_meta = use_meta
        self.labels = label_matrix(self.records) if self.records else np.zeros((0, 15), np.float32)
        self.meta = meta_matrix(self.records, scaler) if use_meta else None
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def raw(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        ref = Path(self.records[i].image_ref)
        img = load_image(ref if self.image_dir is None else self.image_dir / ref)
        if self._cache is not None:
            self._cache[i] = img
        return img

    def batch(self, indices, rng=None):
        indices = np.asarray(indices)
        if self.train and rng is not None:
            imgs = [augment_train(self.raw(i), rng, self.size, self.channels) for i in indices]
        else:
            imgs = [preprocess_eval(self.raw(i), self.size, self.channels) for i in indices]
        meta = None if self.meta is None else self.meta[indices]
        return np.stack(imgs), meta, self.labels[indices]

    def subset(self, indices, train: bool | None = None) -> "RecordDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return RecordDataset(
            [self.records[i] for i in indices], self.size, self.scaler, self.image_dir,
            None if self.images is None else self.images[indices],
            self.train if train is None else train, self.channels, self.use_meta,
            cache=self._cache is not None,
        )
