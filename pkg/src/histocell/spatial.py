"""Spatial colocalization: bivariate Moran's R over RBF kernel weights.

The weight matrix uses w0_ij = exp(-d_ij^2 / 2 l^2) with a zero diagonal,
globally normalized so the total mass is exactly n (multiplying by n before
dividing keeps the 2-spot case at exactly 1).  Moran's R for two vectors is

    R = sum_ij w_ij (x_i - xbar)(y_j - ybar) / sqrt(sum (x-xbar)^2 * sum (y-ybar)^2)

Colocalization matrices hold R for every pair of cell-type columns; rows
and columns of constant types are undefined (NaN) and excluded downstream.
A hand-rolled average-linkage ordering and an SVG heatmap cover figure
output without plotting dependencies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .dataset import AbundanceMatrix, fmt_float

__all__ = [
    "WeightMatrix",
    "ColocMatrix",
    "rbf_weights",
    "morans_r",
    "colocalization_matrix",
    "average_coloc",
    "compare_colocalization",
    "upgma_order",
    "render_heatmap",
    "write_coloc_csv",
    "default_length_scale",
]

# diverging color scale endpoints (blue -> white -> red)
COLOR_NEG = (0x21, 0x66, 0xAC)
COLOR_MID = (0xFF, 0xFF, 0xFF)
COLOR_POS = (0xB2, 0x18, 0x2B)
COLOR_NAN = "#cccccc"


@dataclass
class WeightMatrix:
    n: int
    w: np.ndarray
    length_scale: float

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (self.n, self.n):
            raise ValueError("weight matrix must be n x n")
        if not np.array_equal(self.w, self.w.T):
            raise ValueError("weight matrix must be symmetric")
        if np.diagonal(self.w).any():
            raise ValueError("weight matrix diagonal must be zero")
        if (self.w < 0).any():
            raise ValueError("weights must be >= 0")
        if abs(self.w.sum() - self.n) > 1e-9:
            raise ValueError("total weight mass must equal n")


@dataclass
class ColocMatrix:
    """Symmetric C x C Moran's R matrix; NaN marks undefined entries."""

    cell_types: tuple[str, ...]
    r: np.ndarray
    sample_id: str

    def __post_init__(self) -> None:
        self.cell_types = tuple(self.cell_types)
        self.r = np.asarray(self.r, dtype=np.float64)
        c = len(self.cell_types)
        if self.r.shape != (c, c):
            raise ValueError("matrix must be C x C")
        nan = np.isnan(self.r)
        if not np.array_equal(nan, nan.T):
            raise ValueError("undefined entries must be symmetric")
        if not np.allclose(self.r[~nan], self.r.T[~nan], rtol=0.0, atol=1e-12):
            raise ValueError("matrix must be symmetric within 1e-12")
        if (~nan).any() and np.abs(self.r[~nan]).max() > 1.05:
            raise ValueError("entries out of range (|r| > 1.05)")


def rbf_weights(coords: np.ndarray, length_scale: float) -> WeightMatrix:
    """Zero-diagonal RBF kernel weights normalized to total mass n."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must be (n, 2)")
    n = coords.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 spots, got {n}")
    if length_scale <= 0:
        raise ValueError("length_scale must be > 0")
    dx = coords[:, 0][:, None] - coords[:, 0][None, :]
    dy = coords[:, 1][:, None] - coords[:, 1][None, :]
    d2 = dx * dx + dy * dy
    w0 = np.exp(-d2 / (2.0 * length_scale * length_scale))
    np.fill_diagonal(w0, 0.0)
    mass = w0.sum()
    if mass <= 0.0:
        raise ValueError("kernel mass is zero; length_scale too small for these coords")
    w = (n * w0) / mass
    return WeightMatrix(n=n, w=w, length_scale=float(length_scale))


def morans_r(x: np.ndarray, y: np.ndarray, wm: WeightMatrix) -> float:
    """Spatially weighted cross-correlation of two spot-indexed vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != wm.n or y.shape[0] != wm.n:
        raise ValueError(f"vectors must have length {wm.n}")
    a = x - x.mean()
    b = y - y.mean()
    ssa = float(a @ a)
    ssb = float(b @ b)
    if ssa == 0.0 or ssb == 0.0:
        raise ValueError("zero variance (constant vector)")
    return float(a @ wm.w @ b / np.sqrt(ssa * ssb))


def colocalization_matrix(abund: AbundanceMatrix, coords: np.ndarray,
                          length_scale: float, sample_id: str = "") -> ColocMatrix:
    """Pairwise Moran's R over cell-type columns of one sample.

    Constant columns give NaN rows/columns.  The product is symmetrized to
    remove last-ulp asymmetry from reordered summation; the diagonal is the
    univariate statistic.
    """
    wm = rbf_weights(coords, length_scale)
    values = abund.values
    if values.shape[0] != wm.n:
        raise ValueError("abundance rows must match coords")
    centered = values - values.mean(axis=0)
    ss = (centered * centered).sum(axis=0)
    cross = centered.T @ wm.w @ centered
    cross = (cross + cross.T) / 2.0
    denom = np.sqrt(np.outer(ss, ss))
    defined = ss > 0.0
    r = np.full(cross.shape, np.nan)
    mask = np.outer(defined, defined)
    r[mask] = cross[mask] / denom[mask]
    return ColocMatrix(cell_types=abund.cell_types, r=r,
                       sample_id=sample_id or "sample")


def average_coloc(mats, weights) -> ColocMatrix:
    """Entrywise weighted mean over the defined entries of several
    matrices (weights are typically spot counts)."""
    mats = list(mats)
    weights = [float(w) for w in weights]
    if not mats:
        raise ValueError("no matrices to average")
    if len(mats) != len(weights):
        raise ValueError("need one weight per matrix")
    cell_types = mats[0].cell_types
    for m in mats[1:]:
        if m.cell_types != cell_types:
            raise ValueError("cell type lists differ across matrices")
    c = len(cell_types)
    total = np.zeros((c, c))
    mass = np.zeros((c, c))
    for m, w in zip(mats, weights):
        ok = ~np.isnan(m.r)
        total[ok] += w * m.r[ok]
        mass[ok] += w
    r = np.full((c, c), np.nan)
    covered = mass > 0.0
    r[covered] = total[covered] / mass[covered]
    return ColocMatrix(cell_types=cell_types, r=r, sample_id="averaged")


def _defined_types(m: ColocMatrix) -> np.ndarray:
    return ~np.isnan(np.diagonal(m.r))


def compare_colocalization(pred: ColocMatrix, truth: ColocMatrix) -> tuple[float, float]:
    """Row-wise similarity between two colocalization maps.

    Types undefined in either matrix are dropped from both sides; each
    remaining row (including its diagonal entry) contributes one cosine
    similarity and one Pearson correlation, averaged over rows.
    """
    if pred.cell_types != truth.cell_types:
        raise ValueError("cell type lists differ")
    keep = _defined_types(pred) & _defined_types(truth)
    p = pred.r[np.ix_(keep, keep)]
    t = truth.r[np.ix_(keep, keep)]
    cosines, corrs = [], []
    for i in range(p.shape[0]):
        ok = ~(np.isnan(p[i]) | np.isnan(t[i]))
        if ok.sum() < 2:
            continue
        pr, tr = p[i, ok], t[i, ok]
        np_norm = np.sqrt(pr @ pr)
        nt_norm = np.sqrt(tr @ tr)
        pa = pr - pr.mean()
        ta = tr - tr.mean()
        sp = np.sqrt(pa @ pa)
        st = np.sqrt(ta @ ta)
        if np_norm == 0.0 or nt_norm == 0.0 or sp == 0.0 or st == 0.0:
            continue
        cosines.append(float(pr @ tr / (np_norm * nt_norm)))
        corrs.append(float(pa @ ta / (sp * st)))
    if not cosines:
        raise ValueError("no valid rows to compare")
    return float(np.mean(cosines)), float(np.mean(corrs))


# ---------------------------------------------------------------------------
# Clustermap ordering and rendering
# ---------------------------------------------------------------------------

def upgma_order(m: ColocMatrix) -> list[str]:
    """Leaf order from average-linkage clustering on distance 1 - r.

    Undefined entries count as distance 2 (maximally far).  Merge ties
    break on the lexicographically smallest cluster representatives, and
    within a merge the cluster whose first leaf name sorts lower comes
    first, so the order is a pure function of the matrix.
    """
    names = m.cell_types
    c = len(names)
    if c < 2:
        raise ValueError("need at least 2 cell types")
    dist = 1.0 - np.where(np.isnan(m.r), -1.0, m.r)
    # clusters: id -> (leaf order, representative name, size)
    clusters: dict[int, tuple[list[str], str, int]] = {
        i: ([names[i]], names[i], 1) for i in range(c)
    }
    d: dict[tuple[int, int], float] = {}
    for i in range(c):
        for j in range(i + 1, c):
            d[(i, j)] = float(dist[i, j])
    next_id = c
    while len(clusters) > 1:
        best = None
        for (i, j), value in d.items():
            rep = tuple(sorted((clusters[i][1], clusters[j][1])))
            key = (value, rep)
            if best is None or key < best[0]:
                best = (key, (i, j))
        (_, _), (i, j) = best
        leaves_i, rep_i, size_i = clusters.pop(i)
        leaves_j, rep_j, size_j = clusters.pop(j)
        if leaves_i[0] <= leaves_j[0]:
            leaves = leaves_i + leaves_j
        else:
            leaves = leaves_j + leaves_i
        merged = (leaves, min(rep_i, rep_j), size_i + size_j)
        new_d = {}
        for (a, b), value in d.items():
            if i in (a, b) or j in (a, b):
                continue
            new_d[(a, b)] = value
        for k in clusters:
            di = d.get((min(i, k), max(i, k)))
            dj = d.get((min(j, k), max(j, k)))
            new_d[(min(k, next_id), max(k, next_id))] = (size_i * di + size_j * dj) / (size_i + size_j)
        clusters[next_id] = merged
        d = new_d
        next_id += 1
    (leaves, _, _), = clusters.values()
    return leaves


def _color(value: float) -> str:
    if np.isnan(value):
        return COLOR_NAN
    v = min(1.0, max(-1.0, float(value)))
    if v < 0:
        lo, hi, f = COLOR_NEG, COLOR_MID, v + 1.0
    else:
        lo, hi, f = COLOR_MID, COLOR_POS, v
    rgb = tuple(round(a + (b - a) * f) for a, b in zip(lo, hi))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(m: ColocMatrix, order=None) -> str:
    """SVG heatmap of the matrix in the given row/column order.

    One `class="cell"` rectangle per matrix entry, diverging colors over
    [-1, 1], gray for undefined, labeled axes and a numeric legend.
    """
    if order is None:
        order = list(m.cell_types)
    if sorted(order) != sorted(m.cell_types):
        raise ValueError("order must be a permutation of the cell types")
    index = {ct: i for i, ct in enumerate(m.cell_types)}
    perm = [index[ct] for ct in order]
    r = m.r[np.ix_(perm, perm)]
    c = len(order)

    cell = 28
    label_w = 10 + 7 * max(len(ct) for ct in order)
    top = 24
    legend_h = 54
    width = label_w + c * cell + 20
    height = top + c * cell + label_w + legend_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<title>{escape(m.sample_id)} colocalization</title>",
        f'<text x="{label_w}" y="15" font-size="13">{escape(m.sample_id)}: '
        f"bivariate spatial colocalization</text>",
    ]
    for i, row_ct in enumerate(order):
        y = top + i * cell
        parts.append(f'<text x="{label_w - 4}" y="{y + cell / 2 + 4:g}" '
                     f'text-anchor="end">{escape(row_ct)}</text>')
        for j, col_ct in enumerate(order):
            x = label_w + j * cell
            value = r[i, j]
            title = "undefined" if np.isnan(value) else f"{value:.4f}"
            parts.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_color(value)}" stroke="#ffffff" stroke-width="1">'
                f"<title>{escape(row_ct)} / {escape(col_ct)}: {title}</title></rect>")
    base_y = top + c * cell
    for j, col_ct in enumerate(order):
        x = label_w + j * cell + cell / 2
        parts.append(f'<text x="{x:g}" y="{base_y + 12}" text-anchor="end" '
                     f'transform="rotate(-60 {x:g} {base_y + 12})">{escape(col_ct)}</text>')

    # numeric legend: gradient bar with endpoint/midpoint ticks
    ly = height - legend_h + 16
    lw = max(120, c * cell)
    steps = 40
    for s in range(steps):
        v = -1.0 + 2.0 * (s + 0.5) / steps
        x = label_w + s * lw / steps
        parts.append(f'<rect class="legend" x="{x:g}" y="{ly}" width="{lw / steps + 0.5:g}" '
                     f'height="12" fill="{_color(v)}"/>')
    for value, anchor in ((-1.0, "start"), (0.0, "middle"), (1.0, "end")):
        x = label_w + (value + 1.0) / 2.0 * lw
        parts.append(f'<text x="{x:g}" y="{ly + 26}" text-anchor="{anchor}">{value:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_coloc_csv(m: ColocMatrix, path) -> None:
    """C x C matrix with cell-type names on both header row and column."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["cell_type"] + list(m.cell_types))
        for i, ct in enumerate(m.cell_types):
            writer.writerow([ct] + [fmt_float(v) for v in m.r[i]])


def default_length_scale(coords: np.ndarray, multiplier: float = 1.5) -> float:
    """multiplier x median nearest-neighbor distance."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2:
        raise ValueError("need at least 2 spots")
    dx = coords[:, 0][:, None] - coords[:, 0][None, :]
    dy = coords[:, 1][:, None] - coords[:, 1][None, :]
    d2 = dx * dx + dy * dy
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    median = float(np.median(nn))
    if median == 0.0:
        raise ValueError("nearest-neighbor distances are all zero; set an explicit length scale")
    return multiplier * median
