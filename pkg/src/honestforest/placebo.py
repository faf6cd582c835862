"""Placebo design on the visit outcome.

Realized visits are contrasted with potential visits: opposite-sex ordered
pairs that live within a distance radius of each other but never visited.
A draw from both, matched to the main sample's size and arm shares, goes
through the same forest pipeline with "visited" as outcome.  The arm
(the recipient's sport frequency) is not visible before a visit, so every
contrast should be null.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .causal_forest import ForestParams
from .data_pipeline import (EARTH_RADIUS_KM, UserTable, haversine_km, pair_covariates,
                            pair_metadata, zip_distance)
from .effects import EffectTable, contrasts, fit
from .errors import DataError, UsageError
from .sample import N_ARMS, EstimationSample

log = logging.getLogger(__name__)

RADIUS_FRACTION = 0.95
RULES = ("scaled_max", "percentile")
REALIZED, IMPUTED = "realized", "imputed"
NULL_VERDICT = "no visit-stage effect"
EFFECT_VERDICT = "visit-stage effect detected"


# --------------------------------------------------------------------------
# Candidate enumeration


@dataclass
class CandidateSet:
    """Potential-but-unrealized visits as parallel arrays of ordered pairs."""

    sender_ids: np.ndarray
    recipient_ids: np.ndarray
    distance: np.ndarray
    radius: float
    rule: str
    n_realized: int             # realized pairs whose distance entered the radius
    skipped_users: int = 0      # users without a resolvable centroid
    skipped_realized: int = 0   # realized pairs dropped for a centroid gap or unknown user

    def __len__(self):
        return len(self.sender_ids)

    def counts(self) -> dict:
        return {"candidates": len(self), "radius_km": self.radius, "rule": self.rule,
                "realized_used": self.n_realized, "skipped_users": self.skipped_users,
                "skipped_realized": self.skipped_realized}


def visit_radius(distances, rule: str = "scaled_max", fraction: float = RADIUS_FRACTION) -> float:
    """``scaled_max``: fraction x max distance.  ``percentile``: the fraction-quantile."""
    distances = np.asarray(distances, dtype=float)
    if len(distances) == 0:
        raise UsageError("no realized visit with a computable distance")
    if rule == "scaled_max":
        return float(fraction * distances.max())
    if rule == "percentile":
        return float(np.quantile(distances, fraction))
    raise UsageError(f"unknown radius rule {rule!r}; expected one of {RULES}")


def _realized_pairs(users: UserTable, realized, centroids):
    frame = users.frame
    pairs, dist, skipped = [], [], 0
    for it in realized:
        s, r = it.sender_id, it.recipient_id
        if s not in frame.index or r not in frame.index:
            skipped += 1
            continue
        d = zip_distance(frame.at[r, "zip"], frame.at[s, "zip"], centroids)
        if math.isnan(d):
            skipped += 1
            continue
        pairs.append((s, r))
        dist.append(d)
    return pairs, np.asarray(dist), skipped


def _zip_distance_matrix(zips, centroids) -> np.ndarray:
    """Pairwise centroid distances with the same endpoint ordering as ``zip_distance``."""
    ll = np.array([centroids[z] for z in zips], dtype=float)
    a = np.repeat(ll, len(zips), axis=0)
    b = np.tile(ll, (len(zips), 1))
    swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
    lo = np.where(swap[:, None], b, a)
    hi = np.where(swap[:, None], a, b)
    out = haversine_km(lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]).reshape(len(zips), len(zips))
    np.fill_diagonal(out, 0.0)
    return out


def _grid_neighbours(zips, centroids, radius):
    """Zip index pairs that can lie within ``radius``, via a lat/lon grid.

    Cells are at least as wide as the radius in both directions, so only the
    3 x 3 block around a cell needs scanning.  No antimeridian wrap.
    """
    ll = np.array([centroids[z] for z in zips], dtype=float)
    ang = radius / EARTH_RADIUS_KM
    cos_min = np.cos(np.radians(np.abs(ll[:, 0]).max()))
    if ang >= np.pi / 2 or cos_min <= 0:
        n = len(zips)
        return [(i, j) for i in range(n) for j in range(n)]
    lat_step = np.degrees(ang) * (1 + 1e-9)
    lon_arg = math.sin(ang / 2) / cos_min
    lon_step = 360.0 if lon_arg >= 1 else np.degrees(2 * math.asin(lon_arg)) * (1 + 1e-9)
    cells: dict = {}
    keys = np.stack([np.floor(ll[:, 0] / lat_step), np.floor(ll[:, 1] / lon_step)], 1).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)
    out = []
    for (ci, cj), members in sorted(cells.items()):
        near = [k for di in (-1, 0, 1) for dj in (-1, 0, 1) for k in cells.get((ci + di, cj + dj), ())]
        out += [(i, j) for i in members for j in near]
    return out


def _as_candidates(pairs, dist, radius, rule, n_realized, skipped_users, skipped_realized):
    pairs = sorted(zip(pairs, dist))
    return CandidateSet(
        sender_ids=np.array([p[0][0] for p in pairs], dtype=object),
        recipient_ids=np.array([p[0][1] for p in pairs], dtype=object),
        distance=np.array([p[1] for p in pairs], dtype=float),
        radius=radius, rule=rule, n_realized=n_realized,
        skipped_users=skipped_users, skipped_realized=skipped_realized)


def impute_potential_visits(users: UserTable, realized, centroids, rule: str = "scaled_max",
                            fraction: float = RADIUS_FRACTION, recipient_gender: str | None = None,
                            exhaustive: bool = False) -> CandidateSet:
    """All opposite-sex ordered pairs within the visit radius that were not realized.

    ``recipient_gender`` restricts the enumeration to one recipient side.
    ``exhaustive`` scans every user pair with :func:`zip_distance`; the
    default groups users by postal code and scans nearby codes only.
    """
    if not realized:
        raise UsageError("realized visit set is empty")
    pairs, rdist, skipped_realized = _realized_pairs(users, realized, centroids)
    radius = visit_radius(rdist, rule, fraction)
    done = set(pairs)
    frame = users.frame
    ok = frame["zip"].isin(list(centroids))
    skipped_users = int((~ok).sum())
    known = frame[ok]
    genders = ("f", "m") if recipient_gender is None else (recipient_gender,)
    out_pairs, out_dist = [], []
    if exhaustive:
        ids = list(known.index)
        zips = known["zip"].to_dict()
        gender = known["gender"].to_dict()
        for s in ids:
            for r in ids:
                if gender[r] not in genders or gender[s] == gender[r] or (s, r) in done:
                    continue
                d = zip_distance(zips[r], zips[s], centroids)
                if d <= radius:
                    out_pairs.append((s, r))
                    out_dist.append(d)
        return _as_candidates(out_pairs, out_dist, radius, rule, len(pairs), skipped_users,
                              skipped_realized)
    zips = sorted(set(known["zip"]))
    zpos = {z: i for i, z in enumerate(zips)}
    D = _zip_distance_matrix(zips, centroids)
    by_zip: dict = {}
    for uid, g, z in zip(known.index, known["gender"], known["zip"]):
        by_zip.setdefault((zpos[z], g), []).append(uid)
    for i, j in _grid_neighbours(zips, centroids, radius):
        # i: recipient's zip, j: sender's zip
        if abs(D[i, j] - radius) <= 1e-9 * radius:
            # vectorized and scalar trig may differ in the last bit; decide on the scalar value
            D[i, j] = zip_distance(zips[i], zips[j], centroids)
        if D[i, j] > radius:
            continue
        for g in genders:
            other = "m" if g == "f" else "f"
            for r in by_zip.get((i, g), ()):
                for s in by_zip.get((j, other), ()):
                    if (s, r) not in done:
                        out_pairs.append((s, r))
                        out_dist.append(D[i, j])
    return _as_candidates(out_pairs, out_dist, radius, rule, len(pairs), skipped_users,
                          skipped_realized)


# --------------------------------------------------------------------------
# Matched draw


@dataclass
class PlaceboSample:
    sample: EstimationSample
    provenance: np.ndarray        # REALIZED | IMPUTED per row
    target_shares: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def achieved_shares(self) -> np.ndarray:
        return self.sample.arm_shares()


def allocate(total: int, shares) -> np.ndarray:
    """Largest-remainder integer split of ``total`` proportional to ``shares``."""
    shares = np.asarray(shares, dtype=float)
    shares = shares / shares.sum()
    raw = total * shares
    out = np.floor(raw).astype(np.int64)
    rest = total - out.sum()
    order = np.lexsort((np.arange(len(raw)), -(raw - out)))
    out[order[:rest]] += 1
    return out


def _capped_allocation(total, shares, available):
    """Allocation that respects per-arm availability, spreading any shortfall."""
    alloc = allocate(total, shares)
    if np.all(alloc <= available):
        return alloc, False
    alloc = np.zeros(len(shares), dtype=np.int64)
    open_ = np.ones(len(shares), bool)
    remaining = min(int(total), int(available.sum()))
    while remaining > 0 and open_.any():
        step = allocate(remaining, np.where(open_, shares, 0.0))
        step = np.minimum(step, available - alloc)
        alloc += step
        remaining -= int(step.sum())
        open_ &= alloc < available
    return alloc, True


def draw_matched_sample(candidates: CandidateSet, realized, users: UserTable, centroids,
                        target_n: int, target_shares, seed: int = 0,
                        recipient_gender: str = "m", visit_rate: float | None = None) -> PlaceboSample:
    """Stratified draw over realized (y=1) and imputed (y=0) pairs of one recipient gender.

    Arm counts follow ``target_shares`` by largest remainder.  Within an arm
    the draw is uniform over the pooled pairs, or, with ``visit_rate``, takes
    that fraction from the realized pairs and the rest from the imputed ones.
    """
    if target_n < 1:
        raise UsageError("target_n must be positive")
    if visit_rate is not None and not 0 <= visit_rate <= 1:
        raise UsageError("visit_rate must lie in [0, 1]")
    frame = users.frame
    pairs, _, _ = _realized_pairs(users, realized, centroids)
    pairs = sorted(p for p in pairs if frame.at[p[1], "gender"] == recipient_gender)
    imputed = [(s, r) for s, r in zip(candidates.sender_ids, candidates.recipient_ids)
               if frame.at[r, "gender"] == recipient_gender]
    sport = frame["sport_freq"].to_dict()
    pools = {REALIZED: [[] for _ in range(N_ARMS)], IMPUTED: [[] for _ in range(N_ARMS)]}
    for kind, items in ((REALIZED, pairs), (IMPUTED, imputed)):
        for p in items:
            pools[kind][sport[p[1]]].append(p)
    target_shares = np.asarray(target_shares, dtype=float)
    notes = []
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 53])))
    chosen = []
    if visit_rate is None:
        available = np.array([len(pools[REALIZED][a]) + len(pools[IMPUTED][a]) for a in range(N_ARMS)])
    else:
        # an arm can supply n rows when both sub-strata cover their parts
        available = np.array([
            min(_cap(len(pools[REALIZED][a]), visit_rate), _cap(len(pools[IMPUTED][a]), 1 - visit_rate))
            for a in range(N_ARMS)])
    alloc, capped = _capped_allocation(target_n, target_shares, available)
    if capped:
        notes.append(f"stratum exhausted: requested {allocate(target_n, target_shares).tolist()}, "
                     f"available {available.tolist()}, drawn {alloc.tolist()}")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    for a in range(N_ARMS):
        if visit_rate is None:
            pool = [(p, REALIZED) for p in pools[REALIZED][a]] + [(p, IMPUTED) for p in pools[IMPUTED][a]]
            pool.sort()
            idx = rng.choice(len(pool), size=int(alloc[a]), replace=False)
            chosen += [pool[i] for i in idx]
        else:
            n_pos = int(round(alloc[a] * visit_rate))
            for kind, k in ((REALIZED, n_pos), (IMPUTED, int(alloc[a]) - n_pos)):
                pool = sorted(pools[kind][a])
                idx = rng.choice(len(pool), size=k, replace=False)
                chosen += [(pool[i], kind) for i in idx]
    chosen.sort()
    if not chosen:
        raise DataError("placebo draw is empty")
    snd = [c[0][0] for c in chosen]
    rec = [c[0][1] for c in chosen]
    X = pair_covariates(users, snd, rec, centroids)
    prov = np.array([c[1] for c in chosen], dtype=object)
    sample = EstimationSample(
        y=(prov == REALIZED).astype(float),
        d=np.array([sport[r] for r in rec], dtype=np.int64),
        X=X, meta=pair_metadata(users.features),
        sender_ids=np.array(snd, dtype=object), recipient_ids=np.array(rec, dtype=object))
    log.info("placebo draw (%s recipients): n=%d, positives=%d, shares %s", recipient_gender,
             sample.n, int(sample.y.sum()), np.round(sample.arm_shares(), 4).tolist())
    return PlaceboSample(sample, prov, target_shares, notes)


def _cap(n: int, frac: float) -> int:
    """Largest arm size whose ``frac`` part fits in ``n`` rows."""
    if frac <= 0:
        return np.iinfo(np.int64).max // 4
    return int(math.floor(n / frac + 1e-9))


# --------------------------------------------------------------------------
# Estimation and verdict


def run_placebo(placebo, params: ForestParams, threads: int | None = None,
                share_weights: bool = True) -> EffectTable:
    """Forest pipeline with the visit indicator as outcome."""
    sample = placebo.sample if isinstance(placebo, PlaceboSample) else placebo
    if sample.n == 0 or len(np.unique(sample.d)) < N_ARMS:
        raise DataError("placebo sample must contain every arm")
    return fit(sample, params, threads).ate(share_weights=share_weights, label="placebo")


def placebo_verdict(table: EffectTable, critical: float = 1.96) -> str:
    """Null verdict when no contrast has |t| at or above ``critical``."""
    for m, l in contrasts():
        se = table.se[m, l]
        t = table.effect[m, l] / se if se > 0 else (0.0 if table.effect[m, l] == 0 else math.inf)
        if abs(t) >= critical:
            return EFFECT_VERDICT
    return NULL_VERDICT
