"""Canonical label order and finding-string encoding."""

from __future__ import annotations

from itertools import combinations
from typing import Iterable

import numpy as np

from cxrnet.errors import LabelError

PATHOLOGIES = (
    "Cardiomegaly",
    "Emphysema",
    "Edema",
    "Hernia",
    "Pneumothorax",
    "Effusion",
    "Mass",
    "Fibrosis",
    "Atelectasis",
    "Consolidation",
    "Pleural_Thickening",
    "Nodule",
    "Pneumonia",
    "Infiltration",
)
NO_FINDING = "No Finding"
LABELS = PATHOLOGIES + (NO_FINDING,)
NO_FINDING_INDEX = len(PATHOLOGIES)

# names as printed in report tables
DISPLAY_NAMES = {name: name for name in LABELS}
DISPLAY_NAMES["Pleural_Thickening"] = "Pleural Thicken."
DISPLAY_NAMES[NO_FINDING] = "No Findings"

_ALIASES = {"Pleural Thickening": "Pleural_Thickening", "Pleural Thicken.": "Pleural_Thickening"}
_INDEX = {name: i for i, name in enumerate(LABELS)}


def label_index(token: str) -> int:
    token = token.strip()
    token = _ALIASES.get(token, token)
    try:
        return _INDEX[token]
    except KeyError:
        raise LabelError(f"unknown finding label {token!r}") from None


def encode_labels(findings: str | Iterable[str]) -> np.ndarray:
    """``"Cardiomegaly|Edema"`` -> 15-element 0/1 vector in schema order.

    An empty finding string means "No Finding". Combining "No Finding" with
    any pathology raises :class:`LabelError`.
    """
    tokens = [t for t in findings.split("|")] if isinstance(findings, str) else list(findings)
    tokens = [t.strip() for t in tokens if t.strip()]
    y = np.zeros(len(LABELS), dtype=np.uint8)
    for t in tokens:
        y[label_index(t)] = 1
    pathologies = y[:NO_FINDING_INDEX].any()
    if y[NO_FINDING_INDEX] and pathologies:
        raise LabelError(f"'No Finding' combined with a pathology in {findings!r}")
    if not pathologies:
        y[NO_FINDING_INDEX] = 1
    return y


def decode_labels(y) -> str:
    y = np.asarray(y)
    if y.shape != (len(LABELS),):
        raise LabelError(f"label vector must have {len(LABELS)} entries, got {y.shape}")
    names = [LABELS[i] for i in np.flatnonzero(y)]
    return "|".join(names)


def valid_label_vectors(max_pathologies: int | None = None):
    """Every valid vector: each pathology subset, with the empty set mapped to No Finding."""
    limit = len(PATHOLOGIES) if max_pathologies is None else max_pathologies
    for k in range(limit + 1):
        for combo in combinations(range(len(PATHOLOGIES)), k):
            y = np.zeros(len(LABELS), dtype=np.uint8)
            y[list(combo)] = 1
            if k == 0:
                y[NO_FINDING_INDEX] = 1
            yield y
