"""IATEs, GATEs and ATEs from forest weights, with weight-based standard errors.

Every estimate is a linear functional of the honest outcomes.  For a query
row ``x`` and arm ``d``

    mu_d(x) = sum_i w^d_i(x) (y_i - f_i)  +  sum_k pi_k sum_i w^k_i(x) f_i

where ``f`` is the train-half outcome forecast at the honest rows (zero when
the forest was built without outcome adjustment) and ``pi`` the arm shares.
The second term is common to all arms, so contrasts only see the first one.
Aggregates average the weight rows first and then apply the same formula.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.stats import norm

from .causal_forest import (Forest, ForestParams, WeightMatrix, build_forest, cross_fit_predict,
                            honest_weights)
from .errors import SupportError, UsageError
from .sample import ARM_NAMES, N_ARMS, EstimationSample

MIN_ESS = 5.0
MIN_GROUP = 20
DEFAULT_BINS = 25
MAX_DISCRETE_LEVELS = 25
MAX_SUPPORT_DROP = 0.25


def contrasts(k: int = N_ARMS) -> list[tuple[int, int]]:
    """Lower-triangle contrasts (m, l) with m > l, row-major as in the effect table."""
    return [(m, l) for m in range(k) for l in range(m)]


def p_value(effect, se):
    """Two-sided normal p-value; a zero SE gives 1 for a zero effect and 0 otherwise."""
    effect = np.asarray(effect, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2.0 * norm.sf(np.abs(effect) / se)
    p = np.where(se > 0, p, np.where(effect == 0, 1.0, 0.0))
    return float(p) if p.ndim == 0 else p


def stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


# --------------------------------------------------------------------------
# Honest outcomes


@dataclass
class HonestOutcomes:
    """Honest-half quantities shared by every estimate of one forest."""

    y: np.ndarray          # raw honest outcomes
    forecast: np.ndarray   # train-half forecast at the honest rows
    arms: np.ndarray
    shares: np.ndarray     # arm shares used for the common level term
    residuals: np.ndarray  # y - f minus its leave-one-out local arm mean

    @property
    def adjusted(self) -> np.ndarray:
        return self.y - self.forecast

    def scaled(self, factor: float) -> "HonestOutcomes":
        return HonestOutcomes(self.y * factor, self.forecast * factor, self.arms, self.shares,
                              self.residuals * factor)


def local_residuals(weights: WeightMatrix, adjusted: np.ndarray) -> np.ndarray:
    """Residual of each honest outcome against its leave-one-out leaf-cohort mean.

    With ``W`` the honest-on-honest weights, the cohort mean of observation
    ``i`` in its own arm without itself is ``(P_i - W_ii y_i) / (1 - W_ii)``.
    Observations that are alone in all their leaves fall back to the arm mean.
    """
    if not weights.query_is_honest:
        raise UsageError("local residuals need honest-on-honest weights")
    arms = weights.arms
    own = weights.potential_outcomes(adjusted)[np.arange(len(arms)), arms]
    w_ii = weights.self_weights()
    arm_mean = np.array([adjusted[arms == a].mean() if np.any(arms == a) else 0.0
                         for a in range(N_ARMS)])
    denom = 1.0 - w_ii
    ok = (denom > 1e-12) & weights.supported
    loo = arm_mean[arms].copy()
    loo[ok] = (own[ok] - w_ii[ok] * adjusted[ok]) / denom[ok]
    return adjusted - loo


def honest_outcomes(forest: Forest, sample: EstimationSample, honest_w: WeightMatrix,
                    shares=None) -> HonestOutcomes:
    y = sample.y[forest.honest_idx].astype(float)
    forecast = (np.zeros(len(y)) if forest.honest_forecast is None
                else np.asarray(forest.honest_forecast, dtype=float))
    shares = sample.arm_shares() if shares is None else np.asarray(shares, dtype=float)
    return HonestOutcomes(y, forecast, forest.d_honest.copy(), shares,
                          local_residuals(honest_w, y - forecast))


# --------------------------------------------------------------------------
# Weighted estimates


def _arm_columns(arms) -> np.ndarray:
    return (np.asarray(arms)[:, None] == np.arange(N_ARMS)[None, :]).astype(float)


def weighted_levels(W, out: HonestOutcomes):
    """Potential outcomes, their SEs and Kish sizes for the rows of ``W``.

    ``W`` is any (rows x n_honest) weight matrix, sparse or dense.
    """
    onehot = _arm_columns(out.arms)
    adj = out.adjusted
    po = np.asarray(W @ (onehot * adj[:, None]))
    level = np.asarray(W @ (onehot * out.forecast[:, None])) @ out.shares
    po = po + level[:, None]
    W2 = W.multiply(W) if sparse.issparse(W) else W * W
    var = np.asarray(W2 @ (onehot * (out.residuals ** 2)[:, None]))
    sq = np.asarray(W2 @ onehot)
    with np.errstate(divide="ignore"):
        ess = np.where(sq > 0, 1.0 / sq, 0.0)
    return po, np.sqrt(var), ess


@dataclass
class IateResult:
    """Potential outcomes per query row; contrasts derive from them."""

    po: np.ndarray         # (n, K)
    po_se: np.ndarray      # (n, K)
    ess: np.ndarray        # (n, K) Kish effective sample sizes
    supported: np.ndarray  # (n,)
    weights: WeightMatrix = field(repr=False)
    outcomes: HonestOutcomes = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.po)

    def effect(self, m: int, l: int) -> np.ndarray:
        return self.po[:, m] - self.po[:, l]

    def se(self, m: int, l: int) -> np.ndarray:
        return np.sqrt(self.po_se[:, m] ** 2 + self.po_se[:, l] ** 2)

    def unreliable(self, m: int, l: int) -> np.ndarray:
        return (self.ess[:, m] < MIN_ESS) | (self.ess[:, l] < MIN_ESS)

    def to_csv(self, header_lines=(), row_ids=None) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ["row", "supported"]
        cols += [f"po_{ARM_NAMES[a]}" for a in range(N_ARMS)]
        for m, l in contrasts():
            cols += [f"iate_{ARM_NAMES[m]}_{ARM_NAMES[l]}", f"se_{ARM_NAMES[m]}_{ARM_NAMES[l]}"]
        w.writerow(cols)
        ids = range(self.n) if row_ids is None else row_ids
        for r, rid in enumerate(ids):
            row = [rid, int(self.supported[r])] + [_fmt(v) for v in self.po[r]]
            for m, l in contrasts():
                row += [_fmt(self.po[r, m] - self.po[r, l]),
                        _fmt(math.sqrt(self.po_se[r, m] ** 2 + self.po_se[r, l] ** 2))]
            w.writerow(row)
        return buf.getvalue()


def estimate_iates(weights: WeightMatrix, outcomes: HonestOutcomes) -> IateResult:
    """IATEs (via potential outcomes) and SEs at every query row of ``weights``."""
    if weights.shape[1] != len(outcomes.y):
        raise UsageError("weights and honest outcomes disagree in length")
    supported = weights.supported
    if not supported.any():
        raise SupportError("no query row is supported by the forest")
    po, se, ess = weighted_levels(weights.matrix, outcomes)
    po[~supported] = np.nan
    se[~supported] = np.nan
    return IateResult(po, se, ess, supported.copy(), weights, outcomes)


# --------------------------------------------------------------------------
# Aggregation


def aggregation_weights(d, supported, arm_shares=None, share_weights: bool = True) -> np.ndarray:
    """Observation weights over query rows, zero on unsupported rows, summing to 1.

    With ``share_weights`` each row gets ``1 / share(d_i)``.
    """
    d = np.asarray(d)
    a = np.asarray(supported, dtype=float).copy()
    if share_weights:
        shares = np.asarray(arm_shares, dtype=float)
        if np.any(shares[np.unique(d[a > 0])] <= 0):
            raise UsageError("arm shares must be positive for every present arm")
        a = a / shares[d]
    total = a.sum()
    if total <= 0:
        raise SupportError("zero supported rows")
    return a / total


@dataclass
class EffectTable:
    """Potential outcomes on the diagonal, contrasts below it."""

    po: np.ndarray
    po_se: np.ndarray
    effect: np.ndarray   # (K, K): effect[m, l] = po[m] - po[l]
    se: np.ndarray       # (K, K)
    p: np.ndarray        # (K, K)
    n_used: int
    n_unsupported: int
    ess: np.ndarray      # (K,)
    label: str = ""

    @classmethod
    def from_levels(cls, po, po_se, ess, n_used, n_unsupported, label=""):
        po = np.asarray(po, dtype=float)
        po_se = np.asarray(po_se, dtype=float)
        effect = po[:, None] - po[None, :]
        se = np.sqrt(po_se[:, None] ** 2 + po_se[None, :] ** 2)
        p = p_value(effect, se)
        np.fill_diagonal(p, p_value(po, po_se))
        return cls(po, po_se, effect, se, p, int(n_used), int(n_unsupported),
                   np.asarray(ess, dtype=float), label)

    def unreliable(self, m: int, l: int) -> bool:
        return bool(self.ess[m] < MIN_ESS or self.ess[l] < MIN_ESS)

    def scaled(self, factor: float) -> "EffectTable":
        return EffectTable.from_levels(self.po * factor, self.po_se * factor, self.ess,
                                       self.n_used, self.n_unsupported, self.label)

    def rows(self) -> list[dict]:
        out = []
        for a in range(N_ARMS):
            out.append(dict(kind="potential_outcome", m=ARM_NAMES[a], l="", estimate=self.po[a],
                            se=self.po_se[a], p=self.p[a, a], ess=self.ess[a]))
        for m, l in contrasts():
            out.append(dict(kind="effect", m=ARM_NAMES[m], l=ARM_NAMES[l], estimate=self.effect[m, l],
                            se=self.se[m, l], p=self.p[m, l], ess=min(self.ess[m], self.ess[l])))
        return out

    def to_csv(self, header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "m", "l", "estimate", "se", "p", "ess"])
        for r in self.rows():
            w.writerow([r["kind"], r["m"], r["l"], _fmt(r["estimate"]), _fmt(r["se"]), _fmt(r["p"]),
                        _fmt(r["ess"])])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "arms": list(ARM_NAMES),
            "potential_outcomes": self.po.tolist(),
            "potential_outcome_se": self.po_se.tolist(),
            "effect": self.effect.tolist(),
            "se": self.se.tolist(),
            "p": self.p.tolist(),
            "n_used": self.n_used,
            "n_unsupported": self.n_unsupported,
            "ess": self.ess.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "EffectTable":
        return cls.from_levels(data["potential_outcomes"], data["potential_outcome_se"], data["ess"],
                               data["n_used"], data["n_unsupported"], data.get("label", ""))


def _aggregate_row(iates: IateResult, a: np.ndarray) -> np.ndarray:
    """Averaged weight row ``a @ W`` over honest observations."""
    a = np.where(iates.supported, a, 0.0)
    return np.asarray(iates.weights.matrix.T @ a).ravel()


def _table_from_row(iates, wbar, n_used, label=""):
    po, se, ess = weighted_levels(wbar[None, :], iates.outcomes)
    return EffectTable.from_levels(po[0], se[0], ess[0], n_used,
                                   int((~iates.supported).sum()), label)


def estimate_ate(iates: IateResult, d=None, arm_shares=None, share_weights: bool = True,
                 label: str = "") -> EffectTable:
    """Share-weighted average of the IATEs over supported query rows.

    ``d`` defaults to the honest arms (query set = honest half) and
    ``arm_shares`` to the shares carried by the honest outcomes.
    """
    d = iates.weights.arms if d is None else np.asarray(d)
    if len(d) != iates.n:
        raise UsageError("treatment vector does not match the query rows")
    shares = iates.outcomes.shares if arm_shares is None else np.asarray(arm_shares, float)
    a = aggregation_weights(d, iates.supported, shares, share_weights)
    return _table_from_row(iates, _aggregate_row(iates, a), int(iates.supported.sum()), label)


# --------------------------------------------------------------------------
# GATEs


@dataclass
class Grouping:
    """Group id per row plus label and merge bookkeeping."""

    ids: np.ndarray
    labels: list
    merged: list = field(default_factory=list)  # (label kept, label absorbed)
    discrete: bool = True


def make_groups(z, supported=None, n_bins: int = DEFAULT_BINS, min_group: int = MIN_GROUP,
                discrete: bool | None = None) -> Grouping:
    """Discrete ``z``: one group per value.  Continuous: quantile bins labelled by their median.

    Groups with fewer than ``min_group`` supported rows are merged into the
    adjacent group (the smaller neighbour), in order of increasing size.
    """
    z = np.asarray(z, dtype=float)
    supported = np.ones(len(z), bool) if supported is None else np.asarray(supported, bool)
    values = np.unique(z)
    if discrete is None:
        discrete = len(values) <= MAX_DISCRETE_LEVELS and np.all(values == np.round(values))
    if discrete:
        ids = np.searchsorted(values, z)
    else:
        qs = np.unique(np.quantile(z[supported], np.linspace(0, 1, n_bins + 1)[1:-1]))
        ids = np.searchsorted(qs, z, side="left")
    groups = [np.flatnonzero(ids == g) for g in range(int(ids.max()) + 1)]
    groups = [g for g in groups if len(g)]
    merged = []

    def label(rows):
        return float(values[ids[rows[0]]]) if discrete else float(np.median(z[rows]))

    labels = [label(g) for g in groups]
    while len(groups) > 1:
        sizes = np.array([supported[g].sum() for g in groups])
        j = int(np.argmin(sizes))
        if sizes[j] >= min_group:
            break
        if j == 0:
            k = 1
        elif j == len(groups) - 1:
            k = j - 1
        else:
            k = j - 1 if sizes[j - 1] <= sizes[j + 1] else j + 1
        lo, hi = min(j, k), max(j, k)
        rows = np.sort(np.concatenate([groups[lo], groups[hi]]))
        merged.append((labels[k], labels[j]))
        groups[lo:hi + 1] = [rows]
        labels[lo:hi + 1] = [labels[k] if discrete else label(rows)]
    out = np.empty(len(z), dtype=np.int64)
    for g, rows in enumerate(groups):
        out[rows] = g
    return Grouping(out, labels, merged, bool(discrete))


@dataclass
class GateTable:
    variable: str
    contrast: tuple[int, int]
    labels: list
    gate: np.ndarray
    gate_se: np.ndarray
    deviation: np.ndarray
    deviation_se: np.ndarray
    p: np.ndarray            # p-value of the deviation from the ATE
    sizes: np.ndarray        # supported rows per group
    masses: np.ndarray       # aggregation-weight mass per group (sums to 1)
    ate: float
    ate_se: float
    merged: list = field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return len(self.labels)

    def weighted_mean(self) -> float:
        """Mass-weighted GATE mean; equals the ATE by construction."""
        return float(self.masses @ self.gate)

    def ci90(self):
        z = norm.ppf(0.95)
        return self.deviation - z * self.deviation_se, self.deviation + z * self.deviation_se

    def scaled(self, factor: float) -> "GateTable":
        return GateTable(self.variable, self.contrast, list(self.labels), self.gate * factor,
                         self.gate_se * factor, self.deviation * factor, self.deviation_se * factor,
                         self.p.copy(), self.sizes.copy(), self.masses.copy(), self.ate * factor,
                         self.ate_se * factor, list(self.merged))

    def to_csv(self, header_lines=(), scale: float = 1.0) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", "m", "l", "group", "n", "mass", "gate", "gate_se", "deviation",
                    "deviation_se", "p", "ci90_low", "ci90_high"])
        lo, hi = self.ci90()
        m, l = self.contrast
        for g in range(self.n_groups):
            w.writerow([self.variable, ARM_NAMES[m], ARM_NAMES[l], _fmt(self.labels[g]),
                        int(self.sizes[g]), _fmt(self.masses[g]), _fmt(scale * self.gate[g]),
                        _fmt(scale * self.gate_se[g]), _fmt(scale * self.deviation[g]),
                        _fmt(scale * self.deviation_se[g]), _fmt(self.p[g]), _fmt(scale * lo[g]),
                        _fmt(scale * hi[g])])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "variable": self.variable,
            "contrast": [ARM_NAMES[self.contrast[0]], ARM_NAMES[self.contrast[1]]],
            "groups": [{
                "group": self.labels[g], "n": int(self.sizes[g]), "mass": float(self.masses[g]),
                "gate": float(self.gate[g]), "gate_se": float(self.gate_se[g]),
                "deviation": float(self.deviation[g]), "deviation_se": float(self.deviation_se[g]),
                "p": float(self.p[g]),
            } for g in range(self.n_groups)],
            "ate": self.ate,
            "ate_se": self.ate_se,
            "merged": [list(pair) for pair in self.merged],
        }


def _contrast_var(row, out: HonestOutcomes, m: int, l: int) -> float:
    r2 = out.residuals ** 2
    mask = (out.arms == m) | (out.arms == l)
    return float(np.sum(row[mask] ** 2 * r2[mask]))


def estimate_gates(iates: IateResult, z, m: int = 3, l: int = 0, variable: str = "z",
                   d=None, arm_shares=None, share_weights: bool = True,
                   n_bins: int = DEFAULT_BINS, discrete: bool | None = None) -> GateTable:
    """GATEs of contrast ``m - l`` over the groups of ``z`` with deviations from the ATE.

    Within a group the rows keep their share weights, renormalized.  The
    deviation SE uses the difference of the group and overall weight rows.
    """
    if m == l:
        raise UsageError("contrast of an arm with itself")
    z = np.asarray(z, dtype=float)
    if len(z) != iates.n:
        raise UsageError("heterogeneity column does not match the query rows")
    d = iates.weights.arms if d is None else np.asarray(d)
    shares = iates.outcomes.shares if arm_shares is None else np.asarray(arm_shares, float)
    a = aggregation_weights(d, iates.supported, shares, share_weights)
    grouping = make_groups(z, iates.supported, n_bins, discrete=discrete)
    eff = np.where(iates.supported, iates.effect(m, l), 0.0)
    ate = float(a @ eff)
    wbar = _aggregate_row(iates, a)
    ate_se = math.sqrt(_contrast_var(wbar, iates.outcomes, m, l))
    G = len(grouping.labels)
    gate, gse, dev, dse, sizes, masses = (np.zeros(G) for _ in range(6))
    for g in range(G):
        in_g = grouping.ids == g
        mass = a[in_g].sum()
        sizes[g] = int((in_g & iates.supported).sum())
        masses[g] = mass
        if mass <= 0:
            gate[g] = gse[g] = dev[g] = dse[g] = np.nan
            continue
        a_g = np.where(in_g, a, 0.0) / mass
        gate[g] = a_g @ eff
        w_g = _aggregate_row(iates, a_g)
        gse[g] = math.sqrt(_contrast_var(w_g, iates.outcomes, m, l))
        dev[g] = gate[g] - ate
        dse[g] = math.sqrt(_contrast_var(w_g - wbar, iates.outcomes, m, l))
    p = p_value(dev, dse)
    return GateTable(variable, (m, l), grouping.labels, gate, gse, dev, dse, np.atleast_1d(p),
                     sizes, masses, ate, ate_se, grouping.merged)


@dataclass
class Fit:
    """Forest plus honest-half estimates of one sample."""

    forest: Forest
    weights: WeightMatrix
    outcomes: HonestOutcomes
    iates: IateResult

    def ate(self, share_weights: bool = True, label: str = "") -> EffectTable:
        return estimate_ate(self.iates, share_weights=share_weights, label=label)


def fit(sample: EstimationSample, params: ForestParams, threads: int | None = None) -> Fit:
    """Honest split, forest, honest-on-honest weights and IATEs."""
    forest = build_forest(sample, params, threads)
    weights = honest_weights(forest, sample, threads)
    outcomes = honest_outcomes(forest, sample, weights)
    return Fit(forest, weights, outcomes, estimate_iates(weights, outcomes))


# --------------------------------------------------------------------------
# Common support


@dataclass
class SupportReport:
    threshold: float
    n: int
    dropped_per_arm: list
    min_probability: float

    @property
    def dropped(self) -> int:
        return int(sum(self.dropped_per_arm))

    def to_json(self) -> dict:
        return {"threshold": self.threshold, "n": self.n, "dropped": self.dropped,
                "dropped_per_arm": dict(zip(ARM_NAMES, self.dropped_per_arm)),
                "min_probability": self.min_probability}


def arm_probabilities(sample: EstimationSample, seed: int = 0, n_trees: int = 100,
                      min_leaf: int = 20) -> np.ndarray:
    """Out-of-fold arm probabilities from a two-fold classification forest."""
    return cross_fit_predict(sample.X, sample.d, sample.meta.unordered_mask, folds=2, seed=seed,
                             n_trees=n_trees, min_leaf=min_leaf, classification=True,
                             n_classes=N_ARMS)


def common_support_check(sample: EstimationSample, threshold: float = 0.01, seed: int = 0,
                         n_trees: int = 100, probabilities=None):
    """Keep rows whose estimated probability of every arm is at least ``threshold``.

    Returns (kept indices, report).  Dropping more than a quarter of the
    sample aborts: that is a broken design rather than a trimming situation.
    """
    if not 0 < threshold <= 0.2:
        raise UsageError("support threshold must be in (0, 0.2]")
    probs = arm_probabilities(sample, seed, n_trees) if probabilities is None else probabilities
    low = probs.min(axis=1) < threshold
    dropped = [int(np.sum(low & (sample.d == a))) for a in range(N_ARMS)]
    report = SupportReport(float(threshold), sample.n, dropped, float(probs.min()))
    if low.mean() > MAX_SUPPORT_DROP:
        raise SupportError(f"common support violated for {low.sum()} of {sample.n} rows "
                           f"(per arm {dropped}); the design is not estimable")
    return np.flatnonzero(~low), report


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)
