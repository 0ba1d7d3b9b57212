"""External clustering agreement: NMI and ARI from a contingency table."""
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from dpdcan.errors import ShapeError


@dataclass
class ContingencyTable:
    """Joint label counts, stored sparsely as ``{(true, pred): count}``."""

    cells: dict
    rows: dict = field(init=False, repr=False)
    cols: dict = field(init=False, repr=False)
    n: int = field(init=False)

    def __post_init__(self):
        self.rows, self.cols = Counter(), Counter()
        for (a, b), c in self.cells.items():
            self.rows[a] += c
            self.cols[b] += c
        self.n = sum(self.rows.values())

    @classmethod
    def from_labels(cls, labels, pred):
        labels = np.asarray(labels)
        pred = np.asarray(pred)
        if labels.shape != pred.shape or labels.ndim != 1:
            raise ShapeError(f"label vectors differ in length: {labels.shape} vs {pred.shape}")
        if labels.size == 0:
            raise ShapeError("need at least one sample")
        return cls(Counter(zip(labels.tolist(), pred.tolist())))

    @property
    def counts(self):
        """Dense r x c matrix with rows and columns in sorted label order."""
        ri = {k: i for i, k in enumerate(sorted(self.rows))}
        ci = {k: j for j, k in enumerate(sorted(self.cols))}
        out = np.zeros((len(ri), len(ci)), dtype=np.int64)
        for (a, b), c in self.cells.items():
            out[ri[a], ci[b]] = c
        return out


def _entropy(counts, n):
    return -sum(c / n * math.log(c / n) for c in counts)


def nmi(labels, pred) -> float:
    """Mutual information over the geometric mean of the two entropies (nats)."""
    t = ContingencyTable.from_labels(labels, pred)
    n = t.n
    h_true = _entropy(t.rows.values(), n)
    h_pred = _entropy(t.cols.values(), n)
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    if h_true == 0.0 or h_pred == 0.0:
        return 0.0
    mi = sum(c / n * math.log(c * n / (t.rows[a] * t.cols[b])) for (a, b), c in t.cells.items())
    return max(0.0, min(1.0, mi / math.sqrt(h_true * h_pred)))


def _pairs(counts):
    return sum(c * (c - 1) for c in counts) // 2


def ari(labels, pred) -> float:
    """Hubert-Arabie adjusted Rand index."""
    t = ContingencyTable.from_labels(labels, pred)
    pairs = t.n * (t.n - 1) // 2
    if pairs == 0:
        return 1.0
    sum_ij = _pairs(t.cells.values())
    sum_a = _pairs(t.rows.values())
    sum_b = _pairs(t.cols.values())
    expected = sum_a * sum_b / pairs
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


def evaluate(labels, pred, scale=1.0):
    labels = np.asarray(labels)
    pred = np.asarray(pred)
    return {
        "nmi": nmi(labels, pred) * scale,
        "ari": ari(labels, pred) * scale,
        "n": int(labels.size),
        "clusters_true": int(np.unique(labels).size),
        "clusters_pred": int(np.unique(pred).size),
    }
