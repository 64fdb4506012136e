"""Response statistics, sub-population binning, downstream weights/impact and correlations."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .gfb import SF_RANGE, CellType

DEFAULT_SF_EDGES = np.geomspace(SF_RANGE[0], SF_RANGE[1], 6)
DEFAULT_NX_EDGES = np.array([0.1, 0.595, 1.09, 1.585])
N_ACTIVATION_BINS = 4
N_SPARSENESS_BINS = 4


# --- response statistics ------------------------------------------------

def sparseness(a, axis: int = 0) -> np.ndarray:
    """Selectivity of non-negative responses along ``axis`` (the stimulus axis).

    ``S = (1 - mean(a)^2 / mean(a^2)) / (1 - 1/b)``; a unit that never
    responds gets ``S = 0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = a.shape[axis]
    if b < 2:
        raise ValueError(f"sparseness needs at least 2 stimuli, got {b}")
    m1 = a.mean(axis=axis)
    m2 = (a * a).mean(axis=axis)
    return _sparseness_from_moments(m1, m2, b)


def _sparseness_from_moments(m1, m2, b):
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (1.0 - m1 * m1 / m2) / (1.0 - 1.0 / b)
    s = np.where(m2 > 0, s, 0.0)
    return np.clip(s, 0.0, 1.0)


@dataclass
class ResponseStats:
    mean_activation: np.ndarray
    sparseness: np.ndarray
    n_images: int = 0


class ResponseAccumulator:
    """Streams V1 activation batches ``[B, C, H, W]`` into per-unit moments."""

    def __init__(self):
        self.s1 = None
        self.s2 = None
        self.n = 0

    def update(self, acts) -> None:
        a = np.asarray(acts, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None, None]
        if self.s1 is None:
            self.s1 = np.zeros(a.shape[1:])
            self.s2 = np.zeros(a.shape[1:])
        elif a.shape[1:] != self.s1.shape:
            raise ValueError(f"batch shape {a.shape[1:]} differs from {self.s1.shape}")
        self.s1 += a.sum(0)
        self.s2 += (a * a).sum(0)
        self.n += a.shape[0]

    def finalize(self) -> ResponseStats:
        if self.n < 2:
            raise ValueError(f"need at least 2 images, got {self.n}")
        m1 = self.s1 / self.n
        m2 = self.s2 / self.n
        s = _sparseness_from_moments(m1, m2, self.n)
        c = m1.shape[0]
        return ResponseStats(
            mean_activation=m1.reshape(c, -1).mean(1),
            sparseness=s.reshape(c, -1).mean(1),
            n_images=self.n,
        )


def response_stats(acts) -> ResponseStats:
    """Per-channel mean activation and mean per-unit sparseness.

    ``acts`` is ``[B, C, H, W]`` (or ``[B, C]``), or an iterable of such
    batches.
    """
    acc = ResponseAccumulator()
    if isinstance(acts, np.ndarray) or hasattr(acts, "shape"):
        acc.update(acts)
    else:
        for batch in acts:
            acc.update(batch)
    return acc.finalize()


# --- binning ------------------------------------------------------------

def bin_index(values, edges, name: str = "value") -> np.ndarray:
    """Right-open bins, last bin right-closed; values outside raise."""
    v = np.asarray(values, dtype=np.float64)
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or len(e) < 2 or not np.all(np.diff(e) > 0):
        raise ValueError(f"{name} edges must be strictly increasing")
    bad = (v < e[0]) | (v > e[-1]) | ~np.isfinite(v)
    if bad.any():
        raise ValueError(f"{int(bad.sum())} {name} values outside [{e[0]}, {e[-1]}]")
    idx = np.searchsorted(e, v, side="right") - 1
    return np.minimum(idx, len(e) - 2)


@dataclass
class BinTable:
    """Sub-population grid over ``cell_type x axis0 x axis1``.

    Means of empty cells are NaN; their count and impact are 0.
    """

    axes: tuple[str, str]
    edges: tuple[np.ndarray, np.ndarray]
    count: np.ndarray
    mean_activation: np.ndarray
    mean_sparseness: np.ndarray
    mean_abs_weight: np.ndarray
    impact: np.ndarray
    assignment: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def shape(self):
        return self.count.shape

    @property
    def n_cells(self) -> int:
        return self.count.size

    def rows(self):
        for ct in range(self.shape[0]):
            for i in range(self.shape[1]):
                for j in range(self.shape[2]):
                    yield {
                        "cell_type": CellType(ct).name.lower(),
                        f"{self.axes[0]}_bin": i,
                        f"{self.axes[0]}_lo": self.edges[0][i],
                        f"{self.axes[0]}_hi": self.edges[0][i + 1],
                        f"{self.axes[1]}_bin": j,
                        f"{self.axes[1]}_lo": self.edges[1][j],
                        f"{self.axes[1]}_hi": self.edges[1][j + 1],
                        "count": self.count[ct, i, j],
                        "mean_activation": self.mean_activation[ct, i, j],
                        "mean_sparseness": self.mean_sparseness[ct, i, j],
                        "mean_abs_weight": self.mean_abs_weight[ct, i, j],
                        "impact": self.impact[ct, i, j],
                    }


def _cell_types(descs_or_types) -> np.ndarray:
    items = list(descs_or_types)
    if items and hasattr(items[0], "cell_type"):
        return np.array([int(d.cell_type) for d in items])
    return np.asarray(items, dtype=int)


def _tabulate(axes, edges, cell_type, i0, i1, stats: ResponseStats, weights) -> BinTable:
    shape = (2, len(edges[0]) - 1, len(edges[1]) - 1)
    flat = np.ravel_multi_index((cell_type, i0, i1), shape)
    n = np.bincount(flat, minlength=int(np.prod(shape))).astype(float)

    def cell_mean(v):
        s = np.bincount(flat, weights=np.asarray(v, dtype=np.float64), minlength=n.size)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, s / n, np.nan).reshape(shape)

    act = cell_mean(stats.mean_activation)
    w = cell_mean(weights)
    return BinTable(
        axes=axes,
        edges=(np.asarray(edges[0], float), np.asarray(edges[1], float)),
        count=n.reshape(shape),
        mean_activation=act,
        mean_sparseness=cell_mean(stats.sparseness),
        mean_abs_weight=w,
        impact=downstream_impact(n.reshape(shape), act, w),
        assignment=flat,
    )


def bin_by_rf(descriptors, stats: ResponseStats, weights, sf_edges=None, nx_edges=None) -> BinTable:
    """Group channels by (cell type, SF bin, nx bin); defaults give 2x5x3 = 30 cells."""
    sf_edges = DEFAULT_SF_EDGES if sf_edges is None else np.asarray(sf_edges, float)
    nx_edges = DEFAULT_NX_EDGES if nx_edges is None else np.asarray(nx_edges, float)
    descriptors = list(descriptors)
    _check_lengths(len(descriptors), stats, weights)
    sf = np.array([d.params.sf for d in descriptors])
    nx = np.array([d.params.nx for d in descriptors])
    return _tabulate(
        ("sf", "nx"), (sf_edges, nx_edges), _cell_types(descriptors),
        bin_index(sf, sf_edges, "sf"), bin_index(nx, nx_edges, "nx"), stats, weights,
    )


def response_edges(stats_list, n_act: int = N_ACTIVATION_BINS, n_sp: int = N_SPARSENESS_BINS):
    """Quantile edges over the pooled channels of several variants.

    Repeated quantiles are merged, so degenerate inputs yield fewer bins.
    """
    act = np.concatenate([s.mean_activation for s in stats_list])
    sp = np.concatenate([s.sparseness for s in stats_list])
    return _quantile_edges(act, n_act), _quantile_edges(sp, n_sp)


def _quantile_edges(v, n):
    e = np.unique(np.quantile(v, np.linspace(0, 1, n + 1)))
    if len(e) < 2:
        e = np.array([e[0], np.nextafter(e[0], np.inf)])
    return e


def bin_by_response(descs_or_types, stats: ResponseStats, weights, act_edges, sp_edges) -> BinTable:
    """Group channels by (cell type, activation bin, sparseness bin)."""
    ct = _cell_types(descs_or_types)
    _check_lengths(len(ct), stats, weights)
    return _tabulate(
        ("activation", "sparseness"), (np.asarray(act_edges, float), np.asarray(sp_edges, float)), ct,
        bin_index(stats.mean_activation, act_edges, "activation"),
        bin_index(stats.sparseness, sp_edges, "sparseness"), stats, weights,
    )


def _check_lengths(n, stats, weights):
    if len(stats.mean_activation) != n or len(stats.sparseness) != n or len(weights) != n:
        raise ValueError(
            f"channel count mismatch: {n} channels, {len(stats.mean_activation)} stats, {len(weights)} weights"
        )


# --- downstream weights and impact --------------------------------------

def mean_abs_downstream_weights(w) -> np.ndarray:
    """Mean |weight| per input channel of a ``[out, in]`` (or ``[out, in, 1, 1]``) bottleneck."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 4:
        if w.shape[2:] != (1, 1):
            raise ValueError(f"bottleneck must be 1x1, got kernel {w.shape[2:]}")
        w = w[:, :, 0, 0]
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D [out, in] weight matrix, got shape {w.shape}")
    return np.abs(w).mean(axis=0)


def downstream_impact(count, mean_activation, mean_abs_weight):
    """``count * mean_activation * mean_abs_weight``; empty populations give 0."""
    count = np.asarray(count, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        prod = count * np.asarray(mean_activation, float) * np.asarray(mean_abs_weight, float)
    out = np.where(count > 0, prod, 0.0)
    return float(out) if out.ndim == 0 else out


# --- Pearson correlation ------------------------------------------------

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _CF_TINY if abs(d) < _CF_TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


class CorrelationResult(NamedTuple):
    r: float
    p: float
    n: int
    inclusion_rule: str


INCLUSION_RULES = ("both_nonempty", "all_bins")


def pearson(x, y, inclusion_rule: str = "all_bins", counts_x=None, counts_y=None) -> CorrelationResult:
    """Pearson r with a two-sided Student-t p-value.

    ``both_nonempty`` drops entries where either side is empty (count 0 if
    counts are given, NaN otherwise); ``all_bins`` keeps everything.
    """
    if inclusion_rule not in INCLUSION_RULES:
        raise ValueError(f"inclusion_rule must be one of {INCLUSION_RULES}")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"x and y differ in length: {x.size} vs {y.size}")
    if inclusion_rule == "both_nonempty":
        keep = np.isfinite(x) & np.isfinite(y)
        if counts_x is not None:
            keep &= np.asarray(counts_x).ravel() > 0
        if counts_y is not None:
            keep &= np.asarray(counts_y).ravel() > 0
        x, y = x[keep], y[keep]
    n = x.size
    if n < 3:
        raise ValueError(f"pearson needs n >= 3 after filtering, got {n}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values; use inclusion_rule='both_nonempty' to drop empty bins")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance in x or y")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
        p = min(1.0, max(0.0, student_t_two_sided_p(t, df)))
    return CorrelationResult(r, p, n, inclusion_rule)


# --- variant comparison -------------------------------------------------

class Variant(NamedTuple):
    """One trained model: its channels, their response stats and mean |downstream weight|."""

    descriptors: list
    stats: ResponseStats
    mean_abs_weight: np.ndarray


def average_tables(tables: list[BinTable]) -> BinTable:
    """Seed average: counts and impact averaged, per-cell means averaged over non-empty seeds."""
    if not tables:
        raise ValueError("no tables to average")
    t0 = tables[0]
    for t in tables[1:]:
        if t.shape != t0.shape or not all(np.array_equal(a, b) for a, b in zip(t.edges, t0.edges)):
            raise ValueError("cannot average tables with different bin edges")

    def nanmean(attr):
        stack = np.stack([getattr(t, attr) for t in tables])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(stack, axis=0)

    return BinTable(
        axes=t0.axes,
        edges=t0.edges,
        count=np.mean([t.count for t in tables], axis=0),
        mean_activation=nanmean("mean_activation"),
        mean_sparseness=nanmean("mean_sparseness"),
        mean_abs_weight=nanmean("mean_abs_weight"),
        impact=np.mean([t.impact for t in tables], axis=0),
    )


@dataclass
class ComparisonReport:
    rf: dict[str, BinTable]
    resp: dict[str, BinTable]
    correlations: dict[str, CorrelationResult]
    per_seed_rf: dict[str, list[BinTable]] = field(default_factory=dict)
    per_seed_resp: dict[str, list[BinTable]] = field(default_factory=dict)


CORRELATIONS = (
    ("weights_by_rf_bin", "rf", "mean_abs_weight", "both_nonempty"),
    ("weights_by_response_bin", "resp", "mean_abs_weight", "both_nonempty"),
    ("impact_by_rf_bin", "rf", "impact", "all_bins"),
    ("impact_by_response_bin", "resp", "impact", "all_bins"),
)


def compare_variants(bio, uni, sf_edges=None, nx_edges=None, act_edges=None, sp_edges=None) -> ComparisonReport:
    """Bin both variants on shared edges and compute the four cross-variant correlations.

    ``bio`` and ``uni`` are a :class:`Variant` or a list of them (one per
    seed); per-seed tables are averaged before correlating. Response-bin
    edges default to quantiles of all channels pooled over both variants.
    """
    bio = [bio] if isinstance(bio, Variant) else list(bio)
    uni = [uni] if isinstance(uni, Variant) else list(uni)
    if act_edges is None or sp_edges is None:
        qa, qs = response_edges([v.stats for v in bio + uni])
        act_edges = qa if act_edges is None else act_edges
        sp_edges = qs if sp_edges is None else sp_edges

    per_rf, per_resp = {}, {}
    for name, vs in (("bio", bio), ("uni", uni)):
        per_rf[name] = [bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight, sf_edges, nx_edges) for v in vs]
        per_resp[name] = [bin_by_response(v.descriptors, v.stats, v.mean_abs_weight, act_edges, sp_edges) for v in vs]
    rf = {k: average_tables(v) for k, v in per_rf.items()}
    resp = {k: average_tables(v) for k, v in per_resp.items()}
    for tabs in (rf, resp):
        a, b = tabs["bio"], tabs["uni"]
        if a.shape != b.shape or not all(np.array_equal(x, y) for x, y in zip(a.edges, b.edges)):
            raise ValueError("variants were binned with different edges")

    corr = {}
    tables = {"rf": rf, "resp": resp}
    for name, which, attr, rule in CORRELATIONS:
        a, b = tables[which]["bio"], tables[which]["uni"]
        corr[name] = pearson(getattr(a, attr), getattr(b, attr), rule, a.count, b.count)
    return ComparisonReport(rf=rf, resp=resp, correlations=corr, per_seed_rf=per_rf, per_seed_resp=per_resp)


# --- CSV output ---------------------------------------------------------

STATS_FIELDS = ["channel", "cell_type", "theta", "sf", "nx", "ny", "mean_act", "sparseness", "mean_abs_w"]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return v


def write_stats_csv(path, variant: Variant, label: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["variant"] if label else []) + STATS_FIELDS)
        for i, d in enumerate(variant.descriptors):
            p = d.params
            row = [i, d.cell_type.name.lower(), p.theta, p.sf, p.nx, p.ny,
                   variant.stats.mean_activation[i], variant.stats.sparseness[i], variant.mean_abs_weight[i]]
            w.writerow(([label] if label else []) + [_fmt(v) for v in row])


def write_bins_csv(path, tables: dict[str, BinTable]) -> int:
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = None
        for name, t in tables.items():
            for r in t.rows():
                r = {"variant": name, **r}
                if writer is None:
                    writer = csv.DictWriter(fh, fieldnames=list(r))
                    writer.writeheader()
                writer.writerow({k: _fmt(v) for k, v in r.items()})
                rows += 1
    return rows


def write_impact_csv(path, report: ComparisonReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "cell_type", "bin0", "bin1", "impact_bio", "impact_uni", "count_bio", "count_uni"])
        for which, tabs in (("rf", report.rf), ("resp", report.resp)):
            a, b = tabs["bio"], tabs["uni"]
            for ct, i, j in np.ndindex(a.shape):
                w.writerow([which, CellType(ct).name.lower(), i, j, _fmt(a.impact[ct, i, j]), _fmt(b.impact[ct, i, j]),
                            _fmt(a.count[ct, i, j]), _fmt(b.count[ct, i, j])])


def write_correlations_csv(path, correlations: dict[str, CorrelationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "r", "p", "n", "inclusion_rule"])
        for name, c in correlations.items():
            w.writerow([name, repr(c.r), repr(c.p), c.n, c.inclusion_rule])


def read_correlations_csv(path) -> dict[str, CorrelationResult]:
    with open(path) as fh:
        return {
            r["name"]: CorrelationResult(float(r["r"]), float(r["p"]), int(r["n"]), r["inclusion_rule"])
            for r in csv.DictReader(fh)
        }


def write_report_tables(out_dir, report: ComparisonReport) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bins_csv(out / "bins_rf.csv", report.rf)
    write_bins_csv(out / "bins_resp.csv", report.resp)
    write_impact_csv(out / "impact.csv", report)
    write_correlations_csv(out / "correlations.csv", report.correlations)
    return [out / n for n in ("bins_rf.csv", "bins_resp.csv", "impact.csv", "correlations.csv")]
