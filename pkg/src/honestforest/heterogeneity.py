"""Tests on GATE structure, one-dimensional k-means++ clustering of IATEs, and
IATE density export."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .effects import GateTable, _fmt, p_value
from .errors import UsageError

KMEANS_TOL = 1e-10
KMEANS_MAX_ITER = 300


# --------------------------------------------------------------------------
# Wald and t tests


@dataclass
class WaldResult:
    statistic: float
    df: int
    p: float
    dropped: list = field(default_factory=list)  # labels of groups without a usable SE

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p": self.p,
                "dropped": list(self.dropped)}


def wald_equality(gates: GateTable | None = None, *, gate=None, se=None, labels=None) -> WaldResult:
    """Chi-square test that all GATEs are equal.

    The GATEs are treated as independent with variances ``se**2``; the test
    uses the J-1 differences to the last group.  Groups with a zero or
    non-finite SE are dropped with a warning.
    """
    if gates is not None:
        gate, se, labels = gates.gate, gates.gate_se, gates.labels
    gate = np.asarray(gate, dtype=float)
    se = np.asarray(se, dtype=float)
    labels = list(range(len(gate))) if labels is None else list(labels)
    ok = np.isfinite(gate) & np.isfinite(se) & (se > 0)
    dropped = [labels[j] for j in np.flatnonzero(~ok)]
    if dropped:
        warnings.warn(f"Wald test: dropped groups without a usable SE: {dropped}", RuntimeWarning,
                      stacklevel=2)
    g, v = gate[ok], se[ok] ** 2
    if len(g) < 2:
        raise UsageError("Wald equality test needs at least two groups with finite SEs")
    delta = g[:-1] - g[-1]
    V = np.diag(v[:-1]) + v[-1]
    stat = float(delta @ np.linalg.solve(V, delta))
    stat = max(stat, 0.0)
    df = len(g) - 1
    return WaldResult(stat, df, float(chi2.sf(stat, df)), dropped)


@dataclass
class GateDeviationTest:
    labels: list
    delta: np.ndarray
    se: np.ndarray
    p: np.ndarray

    def to_csv(self, header_lines=(), scale: float = 100.0) -> str:
        """Deviation and SE scaled to percentage points, p in percent."""
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "delta", "se", "p"])
        for j, lab in enumerate(self.labels):
            w.writerow([_fmt(lab), _fmt(scale * self.delta[j]), _fmt(scale * self.se[j]),
                        _fmt(100.0 * self.p[j])])
        return buf.getvalue()

    def render(self, variable: str = "") -> str:
        lines = [f"{variable or 'Group':>10} {'Delta':>8} {'SE':>8} {'p':>8}"]
        for j, lab in enumerate(self.labels):
            lines.append(f"{lab:>10.2f} {100 * self.delta[j]:>8.2f} {100 * self.se[j]:>8.2f} "
                         f"{100 * self.p[j]:>8.2f}")
        return "\n".join(lines) + "\n"


def gate_minus_ate_tests(gates: GateTable) -> GateDeviationTest:
    """Per-group GATE - ATE with the SE of the weight-row difference."""
    se = np.asarray(gates.deviation_se, dtype=float)
    if not np.all(np.isfinite(se)):
        raise UsageError("GATE deviation SEs must be finite")
    delta = np.asarray(gates.gate, dtype=float) - gates.ate
    return GateDeviationTest(list(gates.labels), delta, se, np.atleast_1d(p_value(delta, se)))


# --------------------------------------------------------------------------
# k-means++


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    history: list  # objective after every Lloyd iteration of the best restart


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _seed_centers(X, k, rng) -> np.ndarray:
    """Greedy k-means++: draw 2 + ln(k) D^2 candidates per center, keep the best."""
    n = len(X)
    trials = 2 + int(np.log(k))
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = np.searchsorted(np.cumsum(d2), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        cand_d2 = np.minimum(d2[None, :], ((X[None, :, :] - X[cand][:, None, :]) ** 2).sum(2))
        best = int(cand_d2.sum(1).argmin())
        centers.append(X[cand[best]])
        d2 = cand_d2[best]
    return np.array(centers)


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(2)
    labels = d2.argmin(1)
    return labels, float(d2[np.arange(len(X)), labels].sum())


def _lloyd(X, centers, tol, max_iter):
    history = []
    labels, obj = _assign(X, centers)
    for it in range(1, max_iter + 1):
        new = centers.copy()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = int(((X - centers[labels]) ** 2).sum(1).argmax())
                new[j] = X[far]
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        labels, obj = _assign(X, centers)
        history.append(obj)
        if shift < tol:
            return labels, centers, obj, it, history
    return labels, centers, obj, max_iter, history


def kmeanspp_cluster(effects, k: int = 5, seed: int = 0, n_init: int = 10, tol: float = KMEANS_TOL,
                     max_iter: int = KMEANS_MAX_ITER, standardize: bool = False) -> KMeansResult:
    """k-means++ with Lloyd iterations, best of ``n_init`` restarts.

    ``effects`` is one IATE vector (the default use) or an (n, q) matrix of
    several contrasts; ``standardize`` scales each column to unit variance
    first.  Labels are renumbered so cluster means of the first column ascend.
    """
    X = _as_points(effects)
    if not np.all(np.isfinite(X)):
        raise UsageError("effects must be finite; drop unsupported rows first")
    n = len(X)
    if k < 1 or k > n:
        raise UsageError(f"k must be in 1..{n}")
    if len(np.unique(X, axis=0)) < k:
        raise UsageError("k exceeds the number of distinct effect values")
    if n_init < 1:
        raise UsageError("n_init must be positive")
    raw = X
    if standardize:
        sd = X.std(0)
        X = (X - X.mean(0)) / np.where(sd > 0, sd, 1.0)
    best = None
    for r in range(n_init):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 31, r])))
        out = _lloyd(X, _seed_centers(X, k, rng), tol, max_iter)
        if best is None or out[2] < best[2]:
            best = out
    labels, _, obj, n_iter, history = best
    means = np.array([raw[labels == j, 0].mean() for j in range(k)])
    order = np.argsort(means, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    labels = relabel[labels]
    centers = np.array([raw[labels == j].mean(0) for j in range(k)])
    return KMeansResult(labels, centers, obj, n_iter, history)


# --------------------------------------------------------------------------
# Cluster profiles


@dataclass
class ClusterSummary:
    """Per-cluster mean IATE, size, share and descriptor means, plus a total column."""

    k: int
    effect_name: str
    mean_effect: np.ndarray
    sizes: np.ndarray
    descriptors: dict            # name -> per-cluster means
    totals: dict                 # name -> full-sample mean (includes the effect)

    @property
    def shares(self) -> np.ndarray:
        return self.sizes / self.sizes.sum()

    def row_names(self) -> list[str]:
        return [self.effect_name, *self.descriptors, "Share", "Total"]

    def to_csv(self, header_lines=(), effect_scale: float = 100.0) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + [str(j + 1) for j in range(self.k)] + ["all"])
        w.writerow([self.effect_name] + [_fmt(effect_scale * v) for v in self.mean_effect]
                   + [_fmt(effect_scale * self.totals[self.effect_name])])
        for name, vals in self.descriptors.items():
            w.writerow([name] + [_fmt(v) for v in vals] + [_fmt(self.totals[name])])
        w.writerow(["Share"] + [_fmt(100.0 * s) for s in self.shares] + ["100.0"])
        w.writerow(["Total"] + [_fmt(int(s)) for s in self.sizes] + [_fmt(int(self.sizes.sum()))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "effect": self.effect_name,
            "mean_effect": self.mean_effect.tolist(),
            "sizes": self.sizes.astype(int).tolist(),
            "shares": self.shares.tolist(),
            "descriptors": {k: np.asarray(v).tolist() for k, v in self.descriptors.items()},
            "totals": {k: float(v) for k, v in self.totals.items()},
        }

    def render(self, effect_scale: float = 100.0) -> str:
        width = max(len(r) for r in self.row_names()) + 2
        head = "".ljust(width) + "".join(f"{j + 1:>10}" for j in range(self.k))
        lines = [head]
        lines.append(self.effect_name.ljust(width)
                     + "".join(f"{effect_scale * v:>10.2f}" for v in self.mean_effect))
        for name, vals in self.descriptors.items():
            lines.append(name.ljust(width) + "".join(f"{v:>10.2f}" for v in vals))
        lines.append("Share".ljust(width) + "".join(f"{100 * s:>10.2f}" for s in self.shares))
        lines.append("Total".ljust(width) + "".join(f"{int(s):>10d}" for s in self.sizes))
        return "\n".join(lines) + "\n"


def cluster_profile(labels, effects, columns: dict, effect_name: str = "IATE") -> ClusterSummary:
    """Describe clusters by mean effect and the means of ``columns`` (name -> values).

    The descriptor columns play no part in forming the clusters.
    """
    labels = np.asarray(labels)
    effects = np.asarray(effects, dtype=float)
    if effects.ndim != 1 or len(effects) != len(labels):
        raise UsageError("effects must be one value per labelled row")
    k = int(labels.max()) + 1 if len(labels) else 0
    sizes = np.bincount(labels, minlength=k).astype(float)
    if k == 0 or np.any(sizes == 0):
        raise UsageError("every cluster label 0..k-1 must be non-empty")
    mean_eff = np.bincount(labels, weights=effects, minlength=k) / sizes
    desc, totals = {}, {effect_name: float(effects.mean())}
    for name, col in columns.items():
        col = np.asarray(col, dtype=float)
        if len(col) != len(labels):
            raise UsageError(f"descriptor {name!r} does not match the labelled rows")
        desc[name] = np.bincount(labels, weights=col, minlength=k) / sizes
        totals[name] = float(col.mean())
    return ClusterSummary(k, effect_name, mean_eff, sizes, desc, totals)


# --------------------------------------------------------------------------
# Density export


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    n = len(x)
    sd = x.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * n ** -0.2


def epanechnikov_density(x, grid=None, n_grid: int = 200, bandwidth: float | None = None):
    """Kernel density of ``x`` on a grid; returns (grid, density).

    The default bandwidth is Silverman's rule of thumb.
    """
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 2:
        raise UsageError("density needs at least two finite values")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise UsageError("bandwidth must be positive (constant input?)")
    if grid is None:
        grid = np.linspace(x.min() - h, x.max() + h, n_grid)
    grid = np.asarray(grid, dtype=float)
    dens = np.zeros(len(grid))
    xs = np.sort(x)
    for j, g in enumerate(grid):
        lo, hi = np.searchsorted(xs, [g - h, g + h])
        u = (g - xs[lo:hi]) / h
        dens[j] = np.sum(0.75 * (1.0 - u * u))
    return grid, dens / (len(x) * h)


def density_csv(grid, density, header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["grid", "density"])
    for g, d in zip(grid, density):
        w.writerow([_fmt(g), _fmt(d)])
    return buf.getvalue()
