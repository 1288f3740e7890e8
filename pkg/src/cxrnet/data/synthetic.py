"""Small synthetic corpora with planted, known dependencies.

A bright disc (or square) drawn for label ``k`` makes that label visible in
the pixels; a meta dependency ties a label to the view or gender bit only;
``view_in_pixels`` stamps AP images with a corner marker so probes have
something to find. Every motif's bounding box is recorded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cxrnet.data.records import Record, write_entry_csv
from cxrnet.data.schema import LABELS, NO_FINDING_INDEX
from cxrnet.data.transforms import save_png


@dataclass(frozen=True)
class Motif:
    label: int
    shape: str = "disc"
    radius: int = 8
    prob: float = 0.5
    intensity: int = 230

    def __post_init__(self):
        if not 0 <= self.label < NO_FINDING_INDEX:
            raise ValueError(f"motifs mark pathologies 0..{NO_FINDING_INDEX - 1}, got {self.label}")
        if self.shape not in ("disc", "square"):
            raise ValueError(f"unknown motif shape {self.shape!r}")


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 16
    images_per_patient: int = 2
    skewed_patients: bool = False
    image_size: int = 64
    motifs: tuple[Motif, ...] = ()
    # label index -> "view" or "gender"; the label copies that bit
    meta_labels: tuple[tuple[int, str], ...] = ()
    # other pathologies switch on independently of everything with this rate
    background_rate: float = 0.0
    view_in_pixels: bool = False
    age_in_brightness: bool = False
    background: int = 70
    noise: float = 12.0
    ap_rate: float = 0.4


@dataclass
class SynthCorpus:
    records: list[Record]
    images: np.ndarray
    boxes: list[dict[int, tuple[int, int, int, int]]]
    spec: SynthSpec

    def __len__(self) -> int:
        return len(self.records)

    def box(self, i: int, label: int):
        """``(top, left, bottom, right)`` of the planted motif, bounds exclusive; None if absent."""
        return self.boxes[i].get(label)


def _patient_sizes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.skewed_patients:
        return np.full(spec.n_patients, spec.images_per_patient, dtype=np.int64)
    # heavy tail: most patients have one or two images, a few have dozens
    sizes = rng.geometric(1.0 / spec.images_per_patient, size=spec.n_patients)
    return np.minimum(sizes + (rng.random(spec.n_patients) < 0.02) * rng.integers(10, 40, spec.n_patients), 60)


def _draw_motif(img: np.ndarray, motif: Motif, rng: np.random.Generator) -> tuple[int, int, int, int]:
    size = img.shape[0]
    r = motif.radius
    margin = r + 1
    cy, cx = (int(v) for v in rng.integers(margin, size - margin, size=2))
    yy, xx = np.ogrid[:size, :size]
    if motif.shape == "disc":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    img[mask] = motif.intensity
    return cy - r, cx - r, cy + r + 1, cx + r + 1


def synth_dataset(spec: SynthSpec, seed: int) -> SynthCorpus:
    """Deterministic corpus for ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    sizes = _patient_sizes(spec, rng)
    s = spec.image_size
    records, images, boxes = [], [], []
    motif_labels = {m.label for m in spec.motifs}
    meta_deps = dict(spec.meta_labels)
    for p, count in enumerate(sizes):
        pid = f"{p + 1:05d}"
        gender = int(rng.random() < 0.5)
        age0 = float(rng.uniform(5, 90))
        for k in range(int(count)):
            view = int(rng.random() < spec.ap_rate)
            age = min(age0 + k * 0.5, 100.0)
            level = spec.background + (40.0 * age / 100.0 if spec.age_in_brightness else 0.0)
            img = level + spec.noise * rng.standard_normal((s, s))
            img = np.clip(img, 0, 255)
            y = np.zeros(len(LABELS), dtype=np.uint8)
            if spec.background_rate > 0:
                free = [i for i in range(NO_FINDING_INDEX) if i not in motif_labels and i not in meta_deps]
                y[free] = rng.random(len(free)) < spec.background_rate
            box = {}
            for m in spec.motifs:
                if rng.random() < m.prob:
                    y[m.label] = 1
                    box[m.label] = _draw_motif(img, m, rng)
            for label, source in meta_deps.items():
                y[label] = view if source == "view" else gender
            if spec.view_in_pixels and view:
                img[: s // 8, : s // 8] = 255
            if not y[:NO_FINDING_INDEX].any():
                y[NO_FINDING_INDEX] = 1
            idx = len(records)
            records.append(Record(
                image_ref=f"{idx:08d}_{k:03d}.png",
                labels=y,
                patient_id=pid,
                age_years=round(age),
                gender=gender,
                view=view,
                follow_up=k,
            ))
            images.append(np.round(img).astype(np.uint8))
            boxes.append(box)
    return SynthCorpus(records, np.stack(images), boxes, spec)


def write_corpus(corpus: SynthCorpus, root) -> Path:
    """Write ``images/*.png``, ``Data_Entry.csv`` and ``motif_boxes.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for r, img in zip(corpus.records, corpus.images):
        save_png(img, root / "images" / r.image_ref)
    csv_path = root / "Data_Entry.csv"
    write_entry_csv(corpus.records, csv_path)
    boxes = {r.image_ref: {str(k): list(v) for k, v in b.items()} for r, b in zip(corpus.records, corpus.boxes)}
    (root / "motif_boxes.json").write_text(json.dumps(boxes, indent=1, sort_keys=True) + "\n")
    return csv_path
