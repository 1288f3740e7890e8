"""ChestX-ray14 entry CSV ingestion and corpus statistics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cxrnet.data.schema import DISPLAY_NAMES, LABELS, NO_FINDING_INDEX, PATHOLOGIES, encode_labels
from cxrnet.errors import DataFormatError, LabelError

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "Image Index",
    "Finding Labels",
    "Follow-up #",
    "Patient ID",
    "Patient Age",
    "Patient Gender",
    "View Position",
)
MAX_AGE = 120.0


@dataclass
class Record:
    image_ref: str
    labels: np.ndarray
    patient_id: str
    age_years: float
    gender: int
    view: int
    follow_up: int = 0
    age_flagged: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        has_pathology = bool(self.labels[:NO_FINDING_INDEX].any())
        if bool(self.labels[NO_FINDING_INDEX]) == has_pathology:
            raise LabelError(f"{self.image_ref}: 'No Finding' must be set exactly when no pathology is")


def _parse_age(raw: str) -> float:
    raw = raw.strip()
    unit = raw[-1:].upper()
    if unit in ("Y", "M", "D", "W"):
        value = float(raw[:-1])
        return value * {"Y": 1.0, "M": 1 / 12, "W": 7 / 365.25, "D": 1 / 365.25}[unit]
    return float(raw)


def parse_entry_csv(path) -> list[Record]:
    """Read the published ``Data_Entry`` CSV into records.

    Gender M->1, F->0; view AP->1, PA->0. Ages above 120 are clamped to 120
    and flagged.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataFormatError(f"cannot open {path}: {exc}") from exc
    records = []
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                labels = encode_labels(row["Finding Labels"])
            except LabelError as exc:
                raise LabelError(f"{path}:{lineno}: {exc}") from None
            try:
                age = _parse_age(row["Patient Age"])
                gender = {"M": 1, "F": 0}[row["Patient Gender"].strip().upper()]
                view = {"AP": 1, "PA": 0}[row["View Position"].strip().upper()]
                follow = int(row["Follow-up #"])
            except (KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad value ({exc})") from None
            flagged = age > MAX_AGE or age < 0
            if flagged:
                log.warning("%s: age %.1f out of range, clamped", row["Image Index"], age)
            records.append(Record(
                image_ref=row["Image Index"].strip(),
                labels=labels,
                patient_id=row["Patient ID"].strip(),
                age_years=float(min(max(age, 0.0), MAX_AGE)),
                gender=gender,
                view=view,
                follow_up=follow,
                age_flagged=flagged,
            ))
    return records


def write_entry_csv(records: list[Record], path) -> None:
    """Write records in the published column layout (ages as integers)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for r in records:
            findings = "|".join(LABELS[i] for i in np.flatnonzero(r.labels))
            w.writerow([r.image_ref, findings, r.follow_up, r.patient_id, int(round(r.age_years)),
                        "M" if r.gender else "F", "AP" if r.view else "PA"])


def label_matrix(records: list[Record]) -> np.ndarray:
    return np.stack([r.labels for r in records]).astype(np.float32)


@dataclass
class CorpusStats:
    n_records: int
    n_patients: int
    positives: dict[str, int]
    female: int
    male: int
    pa: int
    ap: int
    age_mean: float
    age_std: float
    flagged_ages: int
    extra: dict = field(default_factory=dict)

    @property
    def gender_ratio(self) -> float:
        """Male over female image count."""
        return self.male / self.female

    @property
    def view_ratio(self) -> float:
        return self.pa / self.ap

    def prevalence(self, label: str) -> float:
        return 100.0 * self.positives[label] / self.n_records

    def disease_table(self) -> str:
        lines = [f"{'Pathology':<18} {'True':>8} {'False':>8} {'Prevalence [%]':>15}"]
        for name in PATHOLOGIES:
            t = self.positives[name]
            lines.append(f"{DISPLAY_NAMES[name]:<18} {t:>8,} {self.n_records - t:>8,} {self.prevalence(name):>15.2f}")
        return "\n".join(lines)

    def meta_table(self) -> str:
        return "\n".join([
            f"{'':<16} {'Male':>8} {'Female':>8} {'Ratio':>6}",
            f"{'Patient Gender':<16} {self.male:>8,} {self.female:>8,} {self.gender_ratio:>6.2f}",
            f"{'':<16} {'PA':>8} {'AP':>8} {'Ratio':>6}",
            f"{'View Position':<16} {self.pa:>8,} {self.ap:>8,} {self.view_ratio:>6.2f}",
        ])


def corpus_stats(records: list[Record]) -> CorpusStats:
    y = label_matrix(records)
    ages = np.array([r.age_years for r in records], dtype=np.float64)
    gender = np.array([r.gender for r in records])
    view = np.array([r.view for r in records])
    return CorpusStats(
        n_records=len(records),
        n_patients=len({r.patient_id for r in records}),
        positives={name: int(y[:, i].sum()) for i, name in enumerate(LABELS)},
        female=int((gender == 0).sum()),
        male=int((gender == 1).sum()),
        pa=int((view == 0).sum()),
        ap=int((view == 1).sum()),
        age_mean=float(ages.mean()),
        age_std=float(ages.std()),
        flagged_ages=sum(r.age_flagged for r in records),
    )


def age_histogram(records: list[Record], bin_width: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    ages = np.array([r.age_years for r in records])
    edges = np.arange(0.0, MAX_AGE + bin_width, bin_width)
    counts, _ = np.histogram(ages, bins=edges)
    return counts, edges
