"""Count-matrix loading, quality control, HVG selection and normalisation."""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyMatrix,
    FormatError,
    InsufficientGenes,
    NegativeCount,
    ParseError,
    ZeroLibrary,
)


@dataclass(frozen=True)
class ExpressionMatrix:
    """Raw counts (cells x genes) plus the processed model input.

    Parameters
    ----------
    raw_counts
        Non-negative integer counts, shape ``(n, d')``.
    processed
        Model input, shape ``(n, d)``; ``None`` until :func:`normalize_log`.
    gene_names, cell_ids
        Identifiers aligned with the columns / rows of ``raw_counts``.
    selected_genes
        Column indices of the HVGs, ascending; ``None`` before selection.
    size_factors
        Per-cell library size divided by the median library size.
    kept_cells
        Row indices into the originally loaded file, so external label files
        can be aligned after QC.
    """

    raw_counts: np.ndarray
    gene_names: list
    cell_ids: list
    processed: np.ndarray | None = None
    selected_genes: np.ndarray | None = None
    size_factors: np.ndarray | None = None
    kept_cells: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.raw_counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.raw_counts.shape[1]

    @property
    def hvg_counts(self) -> np.ndarray:
        """Raw counts restricted to the selected genes, shape ``(n, d)``."""
        if self.selected_genes is None:
            raise ValueError("HVGs have not been selected")
        return self.raw_counts[:, self.selected_genes]


def from_counts(counts, gene_names=None, cell_ids=None) -> ExpressionMatrix:
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] == 0 or counts.shape[1] == 0:
        raise EmptyMatrix(f"count matrix has shape {counts.shape}")
    if np.any(counts < 0):
        raise NegativeCount("count matrix contains negative entries")
    if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
        raise ParseError("count matrix contains non-integral entries")
    counts = counts.astype(np.int64)
    n, g = counts.shape
    genes = list(gene_names) if gene_names is not None else [f"gene_{j}" for j in range(g)]
    cells = list(cell_ids) if cell_ids is not None else [f"cell_{i}" for i in range(n)]
    if len(genes) != g or len(cells) != n:
        raise ParseError("identifier lists do not match matrix shape")
    return ExpressionMatrix(counts, genes, cells, kept_cells=np.arange(n))


def _parse_number(tok: str, where: str):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"{where}: not a number: {tok!r}") from None
    if v < 0:
        raise NegativeCount(f"{where}: negative count {tok!r}")
    if v != int(v):
        raise ParseError(f"{where}: non-integral count {tok!r}")
    return int(v)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _load_csv(path) -> ExpressionMatrix:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(t.strip() for t in r)]
    if not rows:
        raise EmptyMatrix(f"{path}: no rows")
    header = None
    if any(not _is_number(t.strip()) for t in rows[0]):
        header = [t.strip() for t in rows[0]]
        rows = rows[1:]
    if not rows:
        raise EmptyMatrix(f"{path}: header only")
    width = len(rows[0])
    data = []
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ParseError(f"{path}: row {i + 1} has {len(r)} fields, expected {width}")
        data.append([_parse_number(t.strip(), f"{path}:{i + 1}") for t in r])
    if header is not None and len(header) != width:
        raise ParseError(f"{path}: header has {len(header)} names for {width} columns")
    return from_counts(np.array(data, dtype=np.int64), gene_names=header)


def _load_mtx(path) -> ExpressionMatrix:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise ParseError(f"{path}: missing %%MatrixMarket banner")
    banner = lines[0].lower().split()
    if len(banner) < 5 or banner[1] != "matrix" or banner[2] != "coordinate":
        raise ParseError(f"{path}: only 'matrix coordinate' files are supported")
    if banner[3] not in ("integer", "real") or banner[4] != "general":
        raise ParseError(f"{path}: unsupported field/symmetry {banner[3]} {banner[4]}")
    body = [ln for ln in lines[1:] if ln.strip() and not ln.startswith("%")]
    if not body:
        raise ParseError(f"{path}: missing size line")
    try:
        n, g, nnz = (int(t) for t in body[0].split())
    except ValueError:
        raise ParseError(f"{path}: bad size line {body[0]!r}") from None
    if n == 0 or g == 0:
        raise EmptyMatrix(f"{path}: declared shape {n}x{g}")
    if len(body) - 1 != nnz:
        raise ParseError(f"{path}: declared {nnz} entries, found {len(body) - 1}")
    counts = np.zeros((n, g), dtype=np.int64)
    for k, ln in enumerate(body[1:], start=1):
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError(f"{path}: entry {k} malformed: {ln!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"{path}: entry {k} has non-integer index") from None
        if not (1 <= i <= n and 1 <= j <= g):
            raise ParseError(f"{path}: entry {k} index ({i},{j}) out of range")
        counts[i - 1, j - 1] += _parse_number(parts[2], f"{path}: entry {k}")
    return from_counts(counts)


def load_counts(path, format: str = "csv") -> ExpressionMatrix:
    """Load a cells-by-genes count matrix from ``path``.

    ``format`` is ``"csv"`` (dense, optional gene-name header row) or
    ``"mtx"`` (Matrix Market coordinate, 1-based indices).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if format in ("csv", "dense-csv"):
        return _load_csv(path)
    if format in ("mtx", "matrix-market"):
        return _load_mtx(path)
    raise ValueError(f"unknown format {format!r}")


def write_mtx(path, counts) -> None:
    counts = np.asarray(counts, dtype=np.int64)
    rows, cols = np.nonzero(counts)
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{counts.shape[0]} {counts.shape[1]} {rows.size}\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i + 1} {j + 1} {counts[i, j]}\n")


def read_labels(path) -> list[str]:
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def encode_labels(labels) -> tuple[np.ndarray, list]:
    """Map arbitrary labels to 0..K-1 in order of first appearance."""
    mapping: dict = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(lab, len(mapping))
    return out, list(mapping)


def filter_qc(em: ExpressionMatrix, min_genes_per_cell: int, min_cells_per_gene: int) -> ExpressionMatrix:
    """Drop sparse cells, then genes detected in too few remaining cells."""
    if min_genes_per_cell < 0 or min_cells_per_gene < 0:
        raise ValueError("QC thresholds must be non-negative")
    x = em.raw_counts
    keep_cells = np.count_nonzero(x, axis=1) >= min_genes_per_cell
    x = x[keep_cells]
    keep_genes = np.count_nonzero(x, axis=0) >= min_cells_per_gene
    x = x[:, keep_genes]
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise EmptyMatrix(f"QC removed everything (left {x.shape})")
    cell_idx = np.flatnonzero(keep_cells)
    gene_idx = np.flatnonzero(keep_genes)
    kept = em.kept_cells if em.kept_cells is not None else np.arange(em.n_cells)
    return ExpressionMatrix(
        raw_counts=x,
        gene_names=[em.gene_names[j] for j in gene_idx],
        cell_ids=[em.cell_ids[i] for i in cell_idx],
        kept_cells=kept[cell_idx],
        meta=dict(em.meta),
    )


def dispersion(counts) -> np.ndarray:
    """Per-gene variance / mean of raw counts; ``-inf`` where the mean is 0."""
    counts = np.asarray(counts, dtype=np.float64)
    mean = counts.mean(axis=0)
    var = counts.var(axis=0)
    out = np.full(mean.shape, -np.inf)
    nz = mean > 0
    out[nz] = var[nz] / mean[nz]
    return out


def select_hvg(em: ExpressionMatrix, d: int) -> ExpressionMatrix:
    """Keep the ``d`` most dispersed genes (ties to the lower index)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if d > em.n_genes:
        raise InsufficientGenes(f"requested {d} HVGs but only {em.n_genes} genes remain")
    disp = dispersion(em.raw_counts)
    # stable sort on -dispersion keeps lower indices first among ties
    order = np.argsort(-disp, kind="stable")
    selected = np.sort(order[:d])
    return replace(em, selected_genes=selected, processed=None, size_factors=None)


def normalize_log(em: ExpressionMatrix) -> ExpressionMatrix:
    """Library-size normalise, log1p, then standardise each selected gene."""
    if em.selected_genes is None:
        raise ValueError("select_hvg must run before normalize_log")
    totals = em.raw_counts.sum(axis=1).astype(np.float64)
    if np.any(totals == 0):
        bad = int(np.flatnonzero(totals == 0)[0])
        raise ZeroLibrary(f"cell {em.cell_ids[bad]!r} has zero total count")
    size_factors = totals / np.median(totals)
    x = np.log1p(em.hvg_counts / size_factors[:, None])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    z = np.zeros_like(x)
    ok = std > 0
    z[:, ok] = (x[:, ok] - mean[ok]) / std[ok]
    return replace(em, processed=z, size_factors=size_factors)


def preprocess(em: ExpressionMatrix, d: int, min_genes_per_cell: int = 1, min_cells_per_gene: int = 1) -> ExpressionMatrix:
    return normalize_log(select_hvg(filter_qc(em, min_genes_per_cell, min_cells_per_gene), d))


# -- processed bundle -----------------------------------------------------------

_BUNDLE_HEAD = struct.Struct("<4sQQQ")


def save_bundle(path, em: ExpressionMatrix) -> None:
    """Write a BGD1 bundle.

    Layout (little-endian): magic ``BGD1``; ``n, d, d'`` as u64; selected
    gene indices (i64 x d); size factors (f64 x n); processed values
    (f64, n x d row-major); raw HVG counts (i64, n x d row-major); then a
    u64 length and a UTF-8 JSON trailer holding gene names, cell ids and
    kept-cell indices.
    """
    if em.processed is None:
        raise ValueError("bundle requires a processed matrix")
    n, d = em.processed.shape
    sel = np.asarray(em.meta.get("source_genes", em.selected_genes), dtype="<i8")
    trailer = json.dumps(
        {
            "gene_names": [em.gene_names[j] for j in em.selected_genes],
            "cell_ids": list(em.cell_ids),
            "kept_cells": [int(i) for i in em.kept_cells],
            "n_genes_total": int(em.meta.get("n_genes_total", em.n_genes)),
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BUNDLE_HEAD.pack(b"BGD1", n, d, int(em.meta.get("n_genes_total", em.n_genes))))
        fh.write(sel.tobytes())
        fh.write(np.asarray(em.size_factors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(em.processed, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(em.hvg_counts, dtype="<i8").tobytes())
        fh.write(struct.pack("<Q", len(trailer)))
        fh.write(trailer)


def load_bundle(path) -> ExpressionMatrix:
    """Read a BGD1 bundle; raw counts come back restricted to the HVGs."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _BUNDLE_HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, d, d_total = _BUNDLE_HEAD.unpack_from(data)
    if magic != b"BGD1":
        raise FormatError(f"{path}: bad magic {magic!r}")
    off = _BUNDLE_HEAD.size

    def take(dtype, count):
        nonlocal off
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated body")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    source = take("<i8", d).astype(np.int64)
    sf = take("<f8", n).astype(np.float64)
    processed = take("<f8", n * d).reshape(n, d).astype(np.float64)
    raw = take("<i8", n * d).reshape(n, d).astype(np.int64)
    (tlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    meta = json.loads(data[off:off + tlen].decode("utf-8"))
    if off + tlen != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return ExpressionMatrix(
        raw_counts=raw,
        gene_names=meta["gene_names"],
        cell_ids=meta["cell_ids"],
        processed=processed,
        selected_genes=np.arange(d),
        size_factors=sf,
        kept_cells=np.asarray(meta["kept_cells"], dtype=np.int64),
        meta={"source_genes": source, "n_genes_total": d_total},
    )
