"""Patient-disjoint 70/10/20 re-sampling splits."""

from __future__ import annotations

import json
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cxrnet.data.records import Record
from cxrnet.errors import SplitError

SUBSETS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
N_RESAMPLES = 5


@dataclass
class SplitPlan:
    """One ``key -> subset`` map per re-sample.

    Keys are patient ids (``unit="patient"``) or image refs for externally
    supplied image lists (``unit="image"``).
    """

    seed: int
    assignments: list[dict[str, str]]
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    unit: str = "patient"
    meta: dict = field(default_factory=dict)

    @property
    def n_resamples(self) -> int:
        return len(self.assignments)

    def _key(self, record: Record) -> str:
        return record.patient_id if self.unit == "patient" else record.image_ref

    def subset_of(self, record: Record, resample: int) -> str | None:
        return self.assignments[resample].get(self._key(record))

    def indices(self, records: list[Record], resample: int, subset: str) -> np.ndarray:
        if subset not in SUBSETS:
            raise SplitError(f"unknown subset {subset!r}")
        amap = self.assignments[resample]
        return np.array([i for i, r in enumerate(records) if amap.get(self._key(r)) == subset], dtype=np.int64)

    def counts(self, records: list[Record], resample: int) -> dict[str, dict[str, int]]:
        amap = self.assignments[resample]
        images: Counter = Counter()
        patients: dict[str, set] = {s: set() for s in SUBSETS}
        for r in records:
            s = amap.get(self._key(r))
            if s is not None:
                images[s] += 1
                patients[s].add(r.patient_id)
        return {s: {"images": images[s], "patients": len(patients[s])} for s in SUBSETS}

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "unit": self.unit,
            "meta": self.meta,
            "assignments": [OrderedDict(sorted(a.items())) for a in self.assignments],
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitPlan":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SplitError(f"cannot read split plan {path}: {exc}") from exc
        return cls(d["seed"], d["assignments"], tuple(d["fractions"]), d.get("unit", "patient"), d.get("meta", {}))


def _quotas(total: int, fractions) -> np.ndarray:
    q = np.floor(np.asarray(fractions) * total + 0.5).astype(np.int64)
    q[0] = total - q[1:].sum()
    return q


def _one_resample(sizes: dict[str, int], fractions, rng: np.random.Generator) -> dict[str, str]:
    patients = list(sizes)
    rng.shuffle(patients)
    # largest patients first; the shuffle randomizes ties and the small tail fills quotas exactly
    patients.sort(key=lambda p: -sizes[p])
    quota = _quotas(sum(sizes.values()), fractions)
    remaining = quota.astype(np.float64).copy()
    assignment = {}
    for p in patients:
        n = sizes[p]
        fits = remaining >= n
        if fits.any():
            weights = np.where(fits, remaining, 0.0)
            k = int(rng.choice(len(SUBSETS), p=weights / weights.sum()))
        else:
            k = int(np.argmax(remaining / quota))
        assignment[p] = SUBSETS[k]
        remaining[k] -= n
    return assignment


def make_splits(records: list[Record], seed: int, n_resamples: int = N_RESAMPLES,
                fractions=DEFAULT_FRACTIONS, tolerance: float = 0.015) -> SplitPlan:
    """Assign whole patients to train/val/test, targeting image-count quotas.

    Each re-sample draws from its own stream derived from ``(seed, index)``.
    Raises :class:`SplitError` when a re-sample misses a fraction by more
    than ``tolerance`` (e.g. a patient owns more images than a quota).
    """
    sizes = Counter(r.patient_id for r in records)
    if len(sizes) < len(SUBSETS):
        raise SplitError(f"need at least {len(SUBSETS)} patients to split, got {len(sizes)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {fractions}")
    # stable iteration order before shuffling
    sizes = dict(sorted(sizes.items()))
    total = sum(sizes.values())
    plans = []
    for r in range(n_resamples):
        rng = np.random.default_rng([seed, r])
        amap = _one_resample(sizes, fractions, rng)
        got = np.zeros(len(SUBSETS))
        for p, s in amap.items():
            got[SUBSETS.index(s)] += sizes[p]
        off = np.abs(got / total - np.asarray(fractions))
        if off.max() > tolerance:
            worst = SUBSETS[int(off.argmax())]
            raise SplitError(
                f"re-sample {r}: {worst} fraction off by {100 * off.max():.2f} points (> {100 * tolerance:.2f}); "
                "patient sizes are too uneven for these quotas, consider a larger tolerance"
            )
        plans.append(amap)
    return SplitPlan(seed, plans, tuple(fractions), "patient")


def official_split(records: list[Record], train_val: list[str], test: list[str], seed: int = 0,
                   val_fraction: float = 0.125, val: list[str] | None = None) -> SplitPlan:
    """Single re-sample from externally provided image lists.

    Without an explicit validation list, whole patients are drawn from
    ``train_val`` until about ``val_fraction`` of its images are held out.
    """
    known = {r.image_ref for r in records}
    train_val, test = set(train_val), set(test)
    unknown = (train_val | test | set(val or ())) - known
    if unknown:
        raise SplitError(f"split lists name {len(unknown)} image(s) not in the corpus, e.g. {sorted(unknown)[0]}")
    amap: dict[str, str] = {ref: "test" for ref in test}
    if val is not None:
        amap.update({ref: "val" for ref in val})
        amap.update({ref: "train" for ref in train_val - set(val)})
    else:
        by_patient: dict[str, list[str]] = {}
        for r in records:
            if r.image_ref in train_val:
                by_patient.setdefault(r.patient_id, []).append(r.image_ref)
        patients = sorted(by_patient)
        np.random.default_rng(seed).shuffle(patients)
        target = val_fraction * len(train_val)
        held = 0
        for p in patients:
            subset = "val" if held < target else "train"
            if subset == "val":
                held += len(by_patient[p])
            for ref in by_patient[p]:
                amap[ref] = subset
    return SplitPlan(seed, [amap], DEFAULT_FRACTIONS, "image", {"source": "official"})


def read_image_list(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
