"""Report layouts: fold-averaged AUC grid, model-similarity matrix, single-split
comparison, and persisted score sets.

Each table is produced both as CSV and as aligned text.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cxrnet.data.schema import DISPLAY_NAMES, LABELS, NO_FINDING, PATHOLOGIES
from cxrnet.errors import MetricError
from cxrnet.metrics import EvalReport

SETUPS = ("OTS", "FT", "1channel", "large")
GROUPS = ("Without", "With")
ROW_ORDER = PATHOLOGIES + ("Average", NO_FINDING)


def _display(name: str) -> str:
    return DISPLAY_NAMES.get(name, name)


def _csv_text(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _aligned(rows: list[list[str]], rule_before: set[int] = frozenset()) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    out = []
    for i, r in enumerate(rows):
        if i in rule_before:
            out.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        cells = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


@dataclass
class Table:
    csv: str
    text: str

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        c, t = stem.with_name(stem.name + ".csv"), stem.with_name(stem.name + ".txt")
        c.write_text(self.csv)
        t.write_text(self.text)
        return c, t


# ---------------------------------------------------------------- fold-averaged AUC grid


def _cell(report: EvalReport | None, name: str, scale: float, digits: int) -> str:
    if report is None:
        return "-"
    s = report.summary(name)
    if s.n_folds == 0 or math.isnan(s.mean):
        return "-"
    cell = f"{scale * s.mean:.{digits}f} ± {scale * s.std:.{digits}f}"
    return cell + (f" ({s.n_missing} missing)" if s.n_missing and name != "Average" else "")


def auc_grid(columns: dict[tuple[str, str], EvalReport | None], scale: float = 100.0, digits: int = 1) -> Table:
    """Pathology rows x (feature group, setup) columns of ``mean ± std``.

    ``columns`` keys are ``(group, setup)`` such as ``("With", "large")``;
    absent combinations from the full 2x4 grid print as ``-``. Rows follow
    the pathology order, then Average and No Findings.
    """
    keys = [(g, s) for g in GROUPS for s in SETUPS]
    extra = [k for k in columns if k not in keys]
    keys += extra
    header = ["Pathology"] + [f"{g}/{s}" for g, s in keys]
    csv_rows = [["pathology"] + [f"{g}/{s}_{x}" for g, s in keys for x in ("mean", "std")]]
    text_rows = [header]
    for name in ROW_ORDER:
        text_rows.append([_display(name)] + [_cell(columns.get(k), name, scale, digits) for k in keys])
        row = [_display(name)]
        for k in keys:
            rep = columns.get(k)
            if rep is None or rep.summary(name).n_folds == 0:
                row += ["", ""]
            else:
                s = rep.summary(name)
                row += [repr(round(s.mean, 6)), repr(round(s.std, 6))]
        csv_rows.append(row)
    group_line = ["", *[g for g, _ in keys]]
    text = _aligned([group_line] + text_rows, rule_before={2, 2 + len(PATHOLOGIES)})
    return Table(_csv_text(csv_rows), text)


# ---------------------------------------------------------------- similarity matrix


def correlation_table(matrix: np.ndarray, tags: list[str], digits: int = 2) -> Table:
    """Symmetric K x K matrix with the diagonal printed as ``-``."""
    m = np.asarray(matrix, dtype=np.float64)
    k = len(tags)
    if m.shape != (k, k):
        raise MetricError(f"matrix {m.shape} does not match {k} model tags")
    csv_rows = [["model"] + list(tags)]
    text_rows = [[""] + list(tags)]
    for i, tag in enumerate(tags):
        csv_rows.append([tag] + ["" if i == j else repr(round(float(m[i, j]), 6)) for j in range(k)])
        text_rows.append([tag] + ["-" if i == j else f"{m[i, j]:.{digits}f}" for j in range(k)])
    return Table(_csv_text(csv_rows), _aligned(text_rows, rule_before={1}))


# ---------------------------------------------------------------- single split comparison


def single_split_table(columns: dict[str, dict[str, float | None]], digits: int = 3) -> Table:
    """Pathology rows x model columns of plain AUCs from one split.

    ``columns[name]`` maps label names (and optionally ``"Average"``) to an
    AUC or None. A missing Average is computed over the pathologies present;
    reference columns may omit No Findings, which prints as ``-``.
    """
    names = list(columns)
    filled = {}
    for n, col in columns.items():
        col = dict(col)
        if col.get("Average") is None:
            vals = [col[p] for p in PATHOLOGIES if col.get(p) is not None]
            col["Average"] = float(np.mean(vals)) if vals else None
        filled[n] = col
    csv_rows = [["pathology"] + names]
    text_rows = [["Pathology"] + names]
    for name in ROW_ORDER:
        vals = [filled[n].get(name) for n in names]
        csv_rows.append([_display(name)] + ["" if v is None else repr(round(float(v), 6)) for v in vals])
        text_rows.append([_display(name)] + ["-" if v is None else f"{v:.{digits}f}" for v in vals])
    return Table(_csv_text(csv_rows), _aligned(text_rows, rule_before={1, 1 + len(PATHOLOGIES)}))


# ---------------------------------------------------------------- score sets


SCORE_HEADER = ["image_id", "fold", "model_tag"] + list(LABELS)


@dataclass
class ScoreSet:
    image_ids: list[str]
    fold: int
    model_tag: str
    scores: np.ndarray
    truths: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.image_ids), len(LABELS)):
            raise MetricError(f"scores {self.scores.shape} do not cover {len(self.image_ids)} images x {len(LABELS)}")
        if not 0 <= self.fold < 5:
            raise MetricError(f"fold id must lie in [0, 5), got {self.fold}")
        if self.truths is not None and np.shape(self.truths) != self.scores.shape:
            raise MetricError("truths and scores are not congruent")


def write_scores(sets: list[ScoreSet], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for s in sets:
            for img, row in zip(s.image_ids, s.scores):
                w.writerow([img, s.fold, s.model_tag] + [repr(float(v)) for v in row])


def read_scores(path) -> list[ScoreSet]:
    """Score sets grouped by ``(fold, model_tag)`` in first-seen order."""
    groups: dict[tuple[int, str], tuple[list, list]] = {}
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise MetricError(f"cannot read score file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise MetricError(f"{path}: unexpected score header")
        for row in reader:
            key = (int(row[1]), row[2])
            ids, vals = groups.setdefault(key, ([], []))
            ids.append(row[0])
            vals.append([float(v) for v in row[3:]])
    return [ScoreSet(ids, f, tag, np.array(vals)) for (f, tag), (ids, vals) in groups.items()]
