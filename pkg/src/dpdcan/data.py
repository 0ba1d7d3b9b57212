"""Count matrices: validation, preprocessing, synthetic generation and file I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dpdcan.errors import DataError

MIN_CELLS = 3


@dataclass
class CountMatrix:
    cell_ids: list
    gene_ids: list
    counts: np.ndarray

    def __post_init__(self):
        self.cell_ids = [str(c) for c in self.cell_ids]
        self.gene_ids = [str(g) for g in self.gene_ids]
        self.counts = np.asarray(self.counts, dtype=np.float64)
        n, g = len(self.cell_ids), len(self.gene_ids)
        if self.counts.shape != (n, g):
            raise DataError(f"counts have shape {self.counts.shape}, ids give ({n}, {g})")
        for what, ids in (("cell", self.cell_ids), ("gene", self.gene_ids)):
            if len(set(ids)) != len(ids):
                seen = set()
                dup = next(i for i in ids if i in seen or seen.add(i))
                raise DataError(f"duplicate {what} id {dup!r}")
        if not np.all(np.isfinite(self.counts)):
            raise DataError("counts contain non-finite values")
        if np.any(self.counts < 0):
            raise DataError("counts contain negative values")

    @property
    def shape(self):
        return self.counts.shape


@dataclass
class PreprocessedData:
    cell_ids: list
    gene_ids: list
    selected_genes: np.ndarray
    raw_selected: np.ndarray
    size_factors: np.ndarray
    features: np.ndarray

    @property
    def n_cells(self):
        return self.features.shape[0]

    @property
    def n_genes(self):
        return self.features.shape[1]

    def save(self, path):
        np.savez_compressed(
            path,
            cell_ids=np.array(self.cell_ids, dtype=str),
            gene_ids=np.array(self.gene_ids, dtype=str),
            selected_genes=self.selected_genes,
            raw_selected=self.raw_selected,
            size_factors=self.size_factors,
            features=self.features,
        )

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as f:
                return cls(list(f["cell_ids"]), list(f["gene_ids"]), f["selected_genes"],
                           f["raw_selected"], f["size_factors"], f["features"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read preprocessed bundle {path}: {exc}") from exc


def preprocess(raw: CountMatrix, n_hvg: int = 2000) -> PreprocessedData:
    """Filter genes, compute size factors, pick variable genes and z-score them.

    Genes detected in fewer than three cells are dropped. A cell's size factor
    is its total count over the median total. Genes are ranked by the variance
    of ``log1p(count / size_factor)`` and the top ``n_hvg`` are kept, in their
    original order.
    """
    counts = raw.counts
    n = counts.shape[0]
    if n < 2:
        raise DataError("need at least two cells")
    totals = counts.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise DataError(f"cell {raw.cell_ids[empty[0]]!r} has zero total counts")

    keep = np.flatnonzero((counts > 0).sum(axis=0) >= MIN_CELLS)
    if keep.size == 0:
        raise DataError(f"no gene is expressed in at least {MIN_CELLS} cells")
    kept = counts[:, keep]
    totals = kept.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise DataError(f"cell {raw.cell_ids[empty[0]]!r} has zero counts after gene filtering")
    size_factors = totals / np.median(totals)

    logn = np.log1p(kept / size_factors[:, None])
    var = logn.var(axis=0)
    order = np.argsort(-var, kind="stable")[: min(n_hvg, keep.size)]
    chosen = np.sort(order)
    selected = keep[chosen]
    lx = logn[:, chosen]
    std = lx.std(axis=0)
    std[std == 0] = 1.0
    features = (lx - lx.mean(axis=0)) / std
    return PreprocessedData(
        cell_ids=list(raw.cell_ids),
        gene_ids=[raw.gene_ids[g] for g in selected],
        selected_genes=selected,
        raw_selected=counts[:, selected].copy(),
        size_factors=size_factors,
        features=features,
    )


# ---------------------------------------------------------------- synthetic

def generate_synthetic(n, d, s, separation=2.0, dropout_rate=0.1, seed=0, return_truth=False):
    """Clustered negative-binomial counts with technical dropout.

    Every cluster gets a log-mean profile: a shared baseline plus
    ``separation`` times a standard normal shift on a random 20% of the genes.
    Counts are negative binomial with per-gene dispersion; each entry is then
    zeroed independently with probability ``dropout_rate``. Labels are
    balanced and shuffled.
    """
    if s < 2 or n < s:
        raise DataError("need n >= s >= 2")
    if not 0.0 <= dropout_rate <= 1.0:
        raise DataError("dropout_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    base = rng.normal(0.5, 1.0, size=d)
    marker = rng.random((s, d)) < 0.2
    shift = separation * rng.standard_normal((s, d)) * marker
    log_mean = base[None, :] + shift
    mean = np.exp(log_mean)
    dispersion = np.exp(rng.normal(np.log(2.0), 0.5, size=d))
    labels = rng.permutation(np.arange(n) % s)
    mu = mean[labels]
    theta = np.broadcast_to(dispersion, mu.shape)
    counts = rng.negative_binomial(theta, theta / (theta + mu)).astype(np.float64)
    if dropout_rate > 0:
        counts[rng.random(counts.shape) < dropout_rate] = 0.0
    width = len(str(max(n, d) - 1))
    cm = CountMatrix([f"cell_{i:0{width}d}" for i in range(n)],
                     [f"gene_{g:0{width}d}" for g in range(d)], counts)
    if return_truth:
        return cm, labels, {"mean": mean, "dispersion": dispersion}
    return cm, labels


# ---------------------------------------------------------------- I/O

def _fmt(v):
    return f"{v:.9g}"


def read_counts(path, fmt=None) -> CountMatrix:
    """Read a cell x gene table (CSV/TSV) or a Matrix Market directory/file."""
    path = Path(path)
    if fmt is None:
        if path.is_dir() or path.suffix == ".mtx":
            fmt = "mtx"
        elif path.suffix in (".tsv", ".txt"):
            fmt = "tsv"
        else:
            fmt = "csv"
    if not path.exists():
        raise DataError(f"input {path} does not exist")
    if fmt == "mtx":
        return _read_mtx(path)
    delim = "\t" if fmt == "tsv" else ","
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    if len(rows) < 2:
        raise DataError(f"{path}: expected a header row and at least one cell")
    genes = rows[0][1:]
    cells, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(genes) + 1:
            raise DataError(f"{path}:{lineno}: expected {len(genes) + 1} fields, got {len(row)}")
        cells.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return CountMatrix(cells, genes, np.array(values, dtype=np.float64).reshape(len(cells), len(genes)))


def _read_lines(path):
    with open(path) as fh:
        return [line.rstrip("\n").split("\t")[0] for line in fh if line.strip()]


def _read_mtx(path):
    from scipy.io import mmread

    folder = path if path.is_dir() else path.parent
    matrix = path if path.is_file() else folder / "matrix.mtx"
    genes_file = next((folder / f for f in ("genes.tsv", "features.tsv") if (folder / f).exists()), None)
    barcodes = folder / "barcodes.tsv"
    if not matrix.exists() or genes_file is None or not barcodes.exists():
        raise DataError(f"{folder}: need matrix.mtx, genes.tsv (or features.tsv) and barcodes.tsv")
    mat = mmread(str(matrix))
    dense = np.asarray(mat.todense() if hasattr(mat, "todense") else mat, dtype=np.float64)
    genes = _read_lines(genes_file)
    cells = _read_lines(barcodes)
    # 10x convention: genes are rows
    if dense.shape == (len(genes), len(cells)):
        dense = dense.T
    return CountMatrix(cells, genes, dense)


def write_counts(path, cm: CountMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", *cm.gene_ids])
        for cid, row in zip(cm.cell_ids, cm.counts):
            w.writerow([cid, *(_fmt(v) for v in row)])


def write_labels(path, cell_ids, labels, header=("cell_id", "label")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for cid, lab in zip(cell_ids, labels):
            w.writerow([cid, lab])


def read_labels(path):
    """Read a two-column ``cell_id,label`` file; returns ``(ids, labels)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"label file {path} does not exist")
    delim = "\t" if path.suffix in (".tsv", ".txt") else ","
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delim) if r]
    if not rows:
        raise DataError(f"{path} is empty")
    if len(rows[0]) < 2:
        raise DataError(f"{path}: expected two columns")
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = [r[1] for r in body]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate cell ids")
    return ids, labels


def write_matrix(path, cell_ids, matrix, prefix="z"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", *(f"{prefix}{k}" for k in range(matrix.shape[1]))])
        for cid, row in zip(cell_ids, matrix):
            w.writerow([cid, *(_fmt(v) for v in row)])
