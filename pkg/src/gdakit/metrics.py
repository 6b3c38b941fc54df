"""Open-set evaluation: confusion matrix over K known classes plus UNK.

OS* is the macro average of per-class accuracy over the known rows, UNK the
accuracy of the unknown row, HOS their harmonic mean, and OS the macro
average over all K+1 rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np


def confusion_matrix(true_idx, pred_idx, num_known: int) -> np.ndarray:
    """(K+1) x (K+1) counts; index K means UNK on both axes."""
    t = np.asarray(true_idx, dtype=np.intp)
    p = np.asarray(pred_idx, dtype=np.intp)
    if t.shape != p.shape:
        raise ValueError("true and predicted labels differ in length")
    size = num_known + 1
    if t.size and (t.min() < 0 or t.max() >= size or p.min() < 0 or p.max() >= size):
        raise ValueError(f"labels must lie in [0, {num_known}]")
    cm = np.zeros((size, size), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _row_accuracies(cm: np.ndarray, rows: np.ndarray) -> np.ndarray:
    counts = cm[rows].sum(axis=1)
    present = counts > 0
    if not present.any():
        raise ValueError("no samples in the requested rows")
    rows = rows[present]
    return cm[rows, rows] / cm[rows].sum(axis=1)


def os_star(cm: np.ndarray) -> float:
    """Macro accuracy over known classes (percent); empty rows are excluded."""
    k = cm.shape[0] - 1
    return float(np.mean(_row_accuracies(cm, np.arange(k))) * 100.0)


def unk_acc(cm: np.ndarray) -> float:
    """Accuracy of unknown-class rejection (percent)."""
    k = cm.shape[0] - 1
    total = cm[k].sum()
    if total == 0:
        raise ValueError("no unknown-class samples were evaluated")
    return float(cm[k, k] / total * 100.0)


def hos(os_star_value: float, unk_value: float) -> float:
    """Harmonic mean of OS* and UNK; 0 when both are 0."""
    for v in (os_star_value, unk_value):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"scores must be percentages in [0, 100], got {v}")
    s = os_star_value + unk_value
    if s == 0.0:
        return 0.0
    return 2.0 * os_star_value * unk_value / s


def os_score(cm: np.ndarray) -> float:
    """Macro accuracy over all K+1 rows, the UNK row included (percent)."""
    return float(np.mean(_row_accuracies(cm, np.arange(cm.shape[0]))) * 100.0)


@dataclass
class MetricsReport:
    os_star: float
    unk: float | None
    hos: float | None
    os: float
    nmi_domain: float | None
    confusion: list[list[int]]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())


def build_report(cm: np.ndarray, nmi_domain: float | None = None) -> MetricsReport:
    """Assemble the report; UNK and HOS are null when no unknown samples exist."""
    k = cm.shape[0] - 1
    oss = os_star(cm)
    if cm[k].sum() > 0:
        unk = unk_acc(cm)
        h = hos(oss, unk)
    else:
        unk = None
        h = None
    return MetricsReport(
        os_star=oss,
        unk=unk,
        hos=h,
        os=os_score(cm),
        nmi_domain=nmi_domain,
        confusion=cm.tolist(),
    )
