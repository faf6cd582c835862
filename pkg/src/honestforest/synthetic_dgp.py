"""Synthetic pair-level data with closed-form potential-outcome probabilities.

Every observation is a fresh (recipient, sender) pair, so the draw is i.i.d.
and can be written out in the ingestion CSV schemas and re-assembled by
:func:`honestforest.data_pipeline.build_samples` without loss.

Outcome model (logistic link, per arm ``d``)::

    logit p_d(x) = a_d + c_d' g(x) + slope * d / 3 * income(x)

Treatment model (multinomial logit on recipient covariates only)::

    P(D = d | x) ∝ exp(b_d + s * B_d' t(x)),   b_0 = 0

with ``b_d`` calibrated by damped Newton steps so the marginal arm shares hit their
targets.  All covariate transforms are bounded, which keeps every arm
probability away from zero.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .data_pipeline import haversine_km, pair_metadata, UserFeature
from .errors import CalibrationError, UsageError
from .sample import N_ARMS, ORDERED, UNORDERED, EstimationSample, FeatureMetadata

MALE_ARM_SHARES = (0.07, 0.08, 0.29, 0.56)
FEMALE_ARM_SHARES = (0.12, 0.09, 0.29, 0.49)

PROB_FLOOR, PROB_CEIL = 0.005, 0.995
N_STRUCTURAL = 8  # rec age/income/education, snd age/income/education/sport, distance

# Prognostic terms entering the outcome model, in this order.
PROGNOSTIC_TERMS = ("rec_income", "rec_age", "rec_f1", "rec_f2", "snd_income",
                    "rec_education", "distance")
# Recipient-side confounders entering the treatment model, in this order.
SELECTION_TERMS = ("rec_income", "rec_age", "rec_f1", "rec_f2")
BASE_SELECTION = (0.45, -0.35, 0.35, 0.25)

CALIBRATION_DRAWS = 50_000


@dataclass
class DgpConfig:
    n: int = 4000
    p_ordered: int = 16
    p_unordered: int = 4
    arm_shares: tuple = MALE_ARM_SHARES
    # scalar multiplier of BASE_SELECTION * d/3, or a K x len(SELECTION_TERMS) matrix
    selection_strength: object = 0.5
    # per-arm baseline logits
    outcome_intercepts: tuple = (-2.6, -2.55, -2.45, -2.3)
    # per-arm coefficients on PROGNOSTIC_TERMS; a single row is shared by all arms
    outcome_coefficients: tuple = ((0.5, -0.4, 0.4, 0.3, 0.2, 0.1, -0.3),)
    heterogeneity_slope: float = 0.0
    placebo: bool = False
    seed: int = 0
    recipient_gender: str = "m"
    unordered_levels: int = 4
    n_zip: int = 400

    def __post_init__(self):
        self.arm_shares = tuple(float(s) for s in self.arm_shares)
        self.outcome_intercepts = tuple(float(a) for a in self.outcome_intercepts)
        self.outcome_coefficients = tuple(tuple(float(c) for c in row)
                                          for row in self.outcome_coefficients)
        if not np.isscalar(self.selection_strength):
            self.selection_strength = tuple(tuple(float(c) for c in row)
                                            for row in self.selection_strength)
        self.validate()

    def validate(self):
        shares = np.asarray(self.arm_shares)
        if len(shares) != N_ARMS or np.any(shares <= 0) or abs(shares.sum() - 1) > 1e-9:
            raise UsageError(f"arm_shares must be {N_ARMS} positive values summing to 1")
        if self.n < 100:
            raise UsageError("n must be at least 100")
        if self.p_ordered < N_STRUCTURAL + 2:
            raise UsageError(f"p_ordered must be at least {N_STRUCTURAL + 2}")
        if self.p_unordered < 0:
            raise UsageError("p_unordered must be non-negative")
        if len(self.outcome_intercepts) != N_ARMS:
            raise UsageError("outcome_intercepts needs one value per arm")
        if len(self.outcome_coefficients) not in (1, N_ARMS) or any(
                len(r) != len(PROGNOSTIC_TERMS) for r in self.outcome_coefficients):
            raise UsageError(f"outcome_coefficients rows must have {len(PROGNOSTIC_TERMS)} entries")
        sel = np.asarray(self.selection_strength, dtype=float)
        if sel.ndim not in (0, 2) or (sel.ndim == 2 and sel.shape != (N_ARMS, len(SELECTION_TERMS))):
            raise UsageError("selection_strength must be a scalar or a K x 4 matrix")
        if self.recipient_gender not in ("f", "m"):
            raise UsageError("recipient_gender must be 'f' or 'm'")
        if not 2 <= self.unordered_levels <= 64:
            raise UsageError("unordered_levels must be in 2..64")

    def selection_matrix(self) -> np.ndarray:
        sel = np.asarray(self.selection_strength, dtype=float)
        if sel.ndim == 2:
            return sel
        arms = np.arange(N_ARMS)[:, None] / (N_ARMS - 1)
        return sel * arms * np.asarray(BASE_SELECTION)[None, :]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DgpConfig":
        return cls(**data)


def validation_config(**overrides) -> DgpConfig:
    """Default validation design: observed male arm shares, confounded selection."""
    return DgpConfig(**overrides)


def income_slope_config(**overrides) -> DgpConfig:
    """Effects of the top arm grow steeply with recipient income."""
    params = dict(outcome_intercepts=(-2.4, -2.3, -2.2, -2.0), heterogeneity_slope=1.6)
    params.update(overrides)
    return DgpConfig(**params)


def flat_config(**overrides) -> DgpConfig:
    """Same baseline as :func:`income_slope_config` with homogeneous logit effects."""
    params = dict(outcome_intercepts=(-2.4, -2.3, -2.2, -2.0), heterogeneity_slope=0.0)
    params.update(overrides)
    return DgpConfig(**params)


def large_p_config(**overrides) -> DgpConfig:
    """Smoke configuration approaching the application's dimensionality."""
    params = dict(n=2000, p_ordered=600, p_unordered=18)
    params.update(overrides)
    return DgpConfig(**params)


# --------------------------------------------------------------------------
# Covariates


def _block_sizes(config: DgpConfig):
    extra = config.p_ordered - N_STRUCTURAL
    rec_o, snd_o = (extra + 1) // 2, extra // 2
    rec_u, snd_u = (config.p_unordered + 1) // 2, config.p_unordered // 2
    return rec_o, snd_o, rec_u, snd_u


def user_features(config: DgpConfig) -> tuple[UserFeature, ...]:
    """User-level feature columns whose pair expansion gives the DGP layout."""
    rec_o, snd_o, rec_u, snd_u = _block_sizes(config)
    feats = [UserFeature(f"f{j + 1}", ORDERED, "both" if j < snd_o else "recipient")
             for j in range(rec_o)]
    feats += [UserFeature(f"u{j + 1}", UNORDERED, "both" if j < snd_u else "recipient")
              for j in range(rec_u)]
    return tuple(feats)


def dgp_metadata(config: DgpConfig) -> FeatureMetadata:
    return pair_metadata(user_features(config))


def zip_table(config: DgpConfig) -> dict[str, tuple[float, float]]:
    """Synthetic postal-code centroids scattered over a Germany-sized box."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 7])))
    lat = np.round(rng.uniform(47.3, 55.0, config.n_zip), 4)
    lon = np.round(rng.uniform(5.9, 15.0, config.n_zip), 4)
    return {f"{10000 + 89 * j:05d}": (float(lat[j]), float(lon[j])) for j in range(config.n_zip)}


def _draw_users(rng, n, config, rec_o, rec_u, zips):
    ages = rng.integers(18, 66, n)
    income = rng.integers(1, 7, n)
    edu = rng.integers(1, 6, n)
    ordered = np.empty((n, rec_o))
    for j in range(rec_o):
        ordered[:, j] = rng.standard_normal(n) if j % 2 == 0 else rng.integers(0, 2, n)
    unordered = rng.integers(0, config.unordered_levels, (n, rec_u)).astype(float)
    zip_idx = rng.integers(0, len(zips), n)
    return ages, income, edu, ordered, unordered, zip_idx


@dataclass
class World:
    """A simulated draw: the pair sample plus what is needed to write it to CSV."""

    sample: EstimationSample
    oracle: "DgpOracle"
    rec_zip: np.ndarray
    snd_zip: np.ndarray
    centroids: dict
    rec_users: dict = field(default_factory=dict)
    snd_users: dict = field(default_factory=dict)


def draw_covariates(config: DgpConfig, n: int, rng) -> tuple[np.ndarray, dict]:
    """Draw ``n`` i.i.d. pair covariate rows in the canonical layout."""
    rec_o, snd_o, rec_u, snd_u = _block_sizes(config)
    centroids = zip_table(config)
    zips = list(centroids)
    r = _draw_users(rng, n, config, rec_o, rec_u, zips)
    s = _draw_users(rng, n, config, rec_o, rec_u, zips)
    snd_sport = rng.choice(N_ARMS, size=n, p=np.asarray(config.arm_shares))
    lat = np.array([centroids[z][0] for z in zips])
    lon = np.array([centroids[z][1] for z in zips])
    ri, si = r[5], s[5]
    a = np.stack([lat[ri], lon[ri]], 1)
    b = np.stack([lat[si], lon[si]], 1)
    # endpoint order fixed lexicographically so the value matches zip_distance exactly
    swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
    lo = np.where(swap[:, None], b, a)
    hi = np.where(swap[:, None], a, b)
    dist = haversine_km(lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1])
    dist[ri == si] = 0.0
    X = np.column_stack([
        r[0], r[1], r[2], r[3], r[4][:, :rec_u],
        s[0], s[1], s[2], snd_sport, s[3][:, :snd_o], s[4][:, :snd_u],
        dist,
    ]).astype(float)
    extra = {"rec": r, "snd": s, "snd_sport": snd_sport, "zips": zips, "centroids": centroids}
    return X, extra


# --------------------------------------------------------------------------
# Oracle


class DgpOracle:
    """Closed-form arm-specific outcome probabilities and treatment probabilities."""

    def __init__(self, config: DgpConfig, meta: FeatureMetadata, treatment_intercepts):
        self.config = config
        self.meta = meta
        self.treatment_intercepts = np.asarray(treatment_intercepts, dtype=float)
        self._prog = [meta.index(t) for t in PROGNOSTIC_TERMS]
        self._sel = [meta.index(t) for t in SELECTION_TERMS]
        self._income = meta.index("rec_income")
        coefs = np.asarray(config.outcome_coefficients, dtype=float)
        self._coefs = np.repeat(coefs, N_ARMS, axis=0) if len(coefs) == 1 else coefs
        self._selection = config.selection_matrix()

    @staticmethod
    def _transform(name, col):
        if name.endswith("income") or name.endswith("education"):
            mid = 3.5 if name.endswith("income") else 3.0
            return (col - mid) / 1.5
        if name.endswith("age"):
            return (col - 41.5) / 12.0
        if name == "distance":
            return col / 300.0 - 1.0
        if name.endswith("f1"):
            return np.tanh(col)
        if name.endswith("f2"):
            return col - 0.5
        raise KeyError(name)

    def _terms(self, X, idx, names):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([self._transform(nm, X[:, j]) for nm, j in zip(names, idx)])

    def outcome_logit(self, X, d: int) -> np.ndarray:
        arm = 0 if self.config.placebo else d
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g = self._terms(X, self._prog, PROGNOSTIC_TERMS)
        income = self._transform("rec_income", X[:, self._income])
        slope = self.config.heterogeneity_slope * arm / (N_ARMS - 1)
        return self.config.outcome_intercepts[arm] + g @ self._coefs[arm] + slope * income

    def outcome_prob(self, X, d: int) -> np.ndarray:
        """p_d(x), clamped to [0.005, 0.995]."""
        if not 0 <= d < N_ARMS:
            raise ValueError(f"arm {d} out of range 0..{N_ARMS - 1}")
        return np.clip(expit(self.outcome_logit(X, d)), PROB_FLOOR, PROB_CEIL)

    def treatment_scores(self, X) -> np.ndarray:
        t = self._terms(X, self._sel, SELECTION_TERMS)
        return t @ self._selection.T

    def propensity(self, X) -> np.ndarray:
        """P(D = d | x) for every arm, shape (n, K)."""
        return softmax(self.treatment_scores(X) + self.treatment_intercepts[None, :], axis=1)


def true_iate(oracle: DgpOracle, x, m: int, l: int):
    """p_m(x) - p_l(x) in probability points (scalar for a single row)."""
    if m == l:
        raise ValueError("contrast of an arm with itself")
    for arm in (m, l):
        if not 0 <= arm < N_ARMS:
            raise ValueError(f"arm {arm} out of range 0..{N_ARMS - 1}")
    x = np.asarray(x, dtype=float)
    out = oracle.outcome_prob(x, m) - oracle.outcome_prob(x, l)
    return float(out[0]) if x.ndim == 1 else out


# --------------------------------------------------------------------------
# Calibration and generation


def calibrate_intercepts(scores: np.ndarray, targets, tol=1e-10, max_iter=100) -> np.ndarray:
    """Treatment intercepts (arm 0 pinned at 0) whose mean arm probabilities hit ``targets``.

    The intercepts minimize the convex ``mean(logsumexp(scores + b)) - targets'b``
    whose gradient is achieved minus target shares; damped Newton steps.
    """
    targets = np.asarray(targets, dtype=float)
    b = np.log(targets / targets[0])
    b -= b[0]

    def objective(b):
        z = scores + b
        zmax = z.max(1, keepdims=True)
        return float(np.mean(np.log(np.exp(z - zmax).sum(1)) + zmax[:, 0]) - targets @ b)

    achieved = softmax(scores + b, axis=1).mean(0)
    for _ in range(max_iter):
        P = softmax(scores + b, axis=1)
        achieved = P.mean(0)
        grad = (achieved - targets)[1:]
        if np.max(np.abs(achieved - targets)) < tol:
            return b
        Q = P[:, 1:]
        H = np.diag(Q.mean(0)) - Q.T @ Q / len(Q)
        step = np.linalg.solve(H, grad)
        f0, t = objective(b), 1.0
        while t > 1e-8:
            trial = b.copy()
            trial[1:] -= t * step
            if objective(trial) <= f0 - 1e-4 * t * grad @ step:
                break
            t *= 0.5
        b = trial
    raise CalibrationError(f"intercept calibration did not converge; achieved shares {achieved.round(5)}")


def build_oracle(config: DgpConfig) -> DgpOracle:
    meta = dgp_metadata(config)
    oracle = DgpOracle(config, meta, np.zeros(N_ARMS))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 11])))
    Xc, _ = draw_covariates(config, CALIBRATION_DRAWS, rng)
    oracle.treatment_intercepts = calibrate_intercepts(oracle.treatment_scores(Xc), config.arm_shares)
    return oracle


def simulate_world(config: DgpConfig) -> World:
    oracle = build_oracle(config)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 1])))
    X, extra = draw_covariates(config, config.n, rng)
    probs = oracle.propensity(X)
    u = rng.random(config.n)
    d = np.minimum((probs.cumsum(1) < u[:, None]).sum(1), N_ARMS - 1)
    p = np.choose(d, [oracle.outcome_prob(X, k) for k in range(N_ARMS)])
    y = (rng.random(config.n) < p).astype(float)
    width = len(str(config.n - 1))
    sample = EstimationSample(
        y=y, d=d, X=X, meta=oracle.meta,
        sender_ids=np.array([f"s{i:0{width}d}" for i in range(config.n)], dtype=object),
        recipient_ids=np.array([f"r{i:0{width}d}" for i in range(config.n)], dtype=object),
    )
    zips = extra["zips"]
    return World(sample, oracle,
                 rec_zip=np.array([zips[i] for i in extra["rec"][5]]),
                 snd_zip=np.array([zips[i] for i in extra["snd"][5]]),
                 centroids=extra["centroids"], rec_users=extra["rec"], snd_users=extra["snd"])


def generate(config: DgpConfig):
    """Draw an estimation sample and return it with its oracle."""
    world = simulate_world(config)
    return world.sample, world.oracle


# --------------------------------------------------------------------------
# Monte Carlo truth


@dataclass
class TrueAggregate:
    contrast: tuple
    ate: float
    ate_mc_se: float
    ate_share_weighted: float
    gates: dict = field(default_factory=dict)  # group value -> (gate, mc_se)


def true_aggregate(oracle: DgpOracle, config: DgpConfig, m: int, l: int, n_mc: int = 1_000_000,
                   seed: int = 0, z_name: str | None = None, bins=None, chunk: int = 100_000):
    """Monte Carlo ATE (and GATEs over ``z_name``) of the contrast ``m - l``.

    Chunks use independent streams keyed by (seed, chunk index), so the result
    does not depend on how chunks are scheduled.  ``ate_share_weighted`` is the
    target of share-weighted aggregation: the average over arms of the
    arm-conditional mean effect.
    """
    if n_mc < 100_000:
        raise UsageError("n_mc must be at least 1e5")
    shares = np.asarray(config.arm_shares)
    sums = np.zeros(3)
    group_stats: dict = {}
    n_chunks = -(-n_mc // chunk)
    for c in range(n_chunks):
        size = min(chunk, n_mc - c * chunk)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 97, c])))
        X, _ = draw_covariates(config, size, rng)
        eff = true_iate(oracle, X, m, l)
        w = (oracle.propensity(X) / shares[None, :]).sum(1) / N_ARMS
        sums += [eff.sum(), (eff ** 2).sum(), (w * eff).sum()]
        if z_name is not None:
            z = X[:, oracle.meta.index(z_name)]
            keys = z if bins is None else np.digitize(z, bins)
            for key in np.unique(keys):
                e = eff[keys == key]
                acc = group_stats.setdefault(float(key), np.zeros(3))
                acc += [len(e), e.sum(), (e ** 2).sum()]
    mean = sums[0] / n_mc
    var = sums[1] / n_mc - mean ** 2
    gates = {}
    for key, (cnt, s1, s2) in sorted(group_stats.items()):
        g = s1 / cnt
        gates[key] = (g, float(np.sqrt(max(s2 / cnt - g * g, 0.0) / cnt)))
    return TrueAggregate((m, l), float(mean), float(np.sqrt(var / n_mc)),
                         float(sums[2] / n_mc), gates)


def true_effect_summary(oracle: DgpOracle, config: DgpConfig, n_mc: int = 100_000, seed: int = 0,
                        chunk: int = 100_000) -> dict:
    """Monte Carlo population potential outcomes and every contrast's ATE, one pass."""
    if n_mc < 100_000:
        raise UsageError("n_mc must be at least 1e5")
    sums = np.zeros(N_ARMS)
    pair_sums = np.zeros((N_ARMS, N_ARMS, 2))
    for c in range(-(-n_mc // chunk)):
        size = min(chunk, n_mc - c * chunk)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 97, c])))
        X, _ = draw_covariates(config, size, rng)
        p = np.column_stack([oracle.outcome_prob(X, d) for d in range(N_ARMS)])
        sums += p.sum(0)
        diff = p[:, :, None] - p[:, None, :]
        pair_sums[..., 0] += diff.sum(0)
        pair_sums[..., 1] += (diff ** 2).sum(0)
    ate = pair_sums[..., 0] / n_mc
    mc_se = np.sqrt(np.maximum(pair_sums[..., 1] / n_mc - ate ** 2, 0.0) / n_mc)
    return {"n_mc": int(n_mc), "seed": int(seed),
            "potential_outcomes": (sums / n_mc).tolist(),
            "ate": ate.tolist(), "ate_mc_se": mc_se.tolist()}


# --------------------------------------------------------------------------
# Visit log for the placebo design


def simulate_visit_log(config: DgpConfig, n_users: int = 300, visits_per_sender: int = 8,
                       sport_income_slope: float = 0.5):
    """Users of both genders and a realized visit log that ignores recipient sport.

    Sport frequency correlates with income (so the arms differ in
    composition), and each sender visits ``visits_per_sender`` distinct
    opposite-sex users drawn with probability proportional to
    ``exp(-distance / 200 km + 0.3 * standardized recipient income)``.
    Returns (UserTable, interactions, centroids).
    """
    import pandas as pd

    from .data_pipeline import Interaction, UserTable

    if n_users < 2 or not 1 <= visits_per_sender <= n_users:
        raise UsageError("need n_users >= 2 and 1 <= visits_per_sender <= n_users")
    rec_o, _, rec_u, _ = _block_sizes(config)
    feats = user_features(config)
    centroids = zip_table(config)
    zips = list(centroids)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 41])))
    width = len(str(n_users - 1))
    frames = []
    for g in ("f", "m"):
        ages, income, edu, ordered, unordered, zip_idx = _draw_users(rng, n_users, config, rec_o,
                                                                     rec_u, zips)
        logits = np.log(np.asarray(config.arm_shares))[None, :] + sport_income_slope * (
            np.arange(N_ARMS)[None, :] / (N_ARMS - 1)) * ((income - 3.5) / 1.5)[:, None]
        probs = softmax(logits, axis=1)
        sport = np.minimum((probs.cumsum(1) < rng.random(n_users)[:, None]).sum(1), N_ARMS - 1)
        cols = {"user_id": [f"{g}{i:0{width}d}" for i in range(n_users)], "gender": g, "age": ages,
                "sport_freq": sport, "income": income, "education": edu,
                "zip": [zips[j] for j in zip_idx]}
        for j, f in enumerate(x for x in feats if x.kind == ORDERED):
            cols[f.name] = ordered[:, j]
        for j, f in enumerate(x for x in feats if x.kind == UNORDERED):
            cols[f.name] = unordered[:, j].astype(int)
        frames.append(pd.DataFrame(cols))
    frame = pd.concat(frames, ignore_index=True).set_index("user_id")
    users = UserTable(frame, feats)
    ll = np.array([centroids[z] for z in frame["zip"]])
    is_f = (frame["gender"] == "f").to_numpy()
    inc = ((frame["income"].to_numpy() - 3.5) / 1.5)
    ids = frame.index.to_numpy()
    interactions = []
    t0 = 1451606400
    for si in range(len(frame)):
        targets = np.flatnonzero(is_f != is_f[si])
        dist = haversine_km(ll[si, 0], ll[si, 1], ll[targets, 0], ll[targets, 1])
        score = -dist / 200.0 + 0.3 * inc[targets]
        keys = score + rng.gumbel(size=len(targets))  # Gumbel top-k: draws without replacement
        pick = targets[np.argsort(-keys, kind="stable")[:visits_per_sender]]
        for k, ri in enumerate(sorted(pick)):
            interactions.append(Interaction(ids[si], ids[ri], False, float(t0 + 60 * (si * visits_per_sender + k))))
    return users, interactions, centroids


# --------------------------------------------------------------------------
# CSV emission


def _fmt(x: float) -> str:
    return repr(float(x))


def write_world(world: World, out_dir, header: str | None = None, provoked_rate: float = 0.1):
    """Write ``users.csv``, ``events.csv``, ``zip_centroids.csv`` and ``features.json``.

    Besides the visit (and message) that define each observation, a share of
    non-message pairs receives a provoked sequence (recipient like, then sender
    message) that the one-way filter must discard.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = world.sample
    cfg = world.oracle.config
    feats = user_features(cfg)
    rec_o = sum(f.kind == ORDERED for f in feats)
    rec_u = sum(f.kind == UNORDERED for f in feats)
    meta = s.meta
    snd_ordered = [meta.index(f"snd_{f.name}") for f in feats if f.kind == ORDERED and f.role == "both"]
    snd_unordered = [meta.index(f"snd_{f.name}") for f in feats if f.kind == UNORDERED and f.role == "both"]
    rec_ordered = [meta.index(f"rec_{f.name}") for f in feats if f.kind == ORDERED]
    rec_unordered = [meta.index(f"rec_{f.name}") for f in feats if f.kind == UNORDERED]
    ia, ii, ie = (meta.index(c) for c in ("rec_age", "rec_income", "rec_education"))
    sa, si, se, ss = (meta.index(c) for c in ("snd_age", "snd_income", "snd_education", "snd_sport"))
    other = "f" if cfg.recipient_gender == "m" else "m"
    cols = ["user_id", "gender", "age", "sport_freq", "income", "education", "zip"]
    cols += [f.name for f in feats if f.kind == ORDERED] + [f.name for f in feats if f.kind == UNORDERED]
    lines = [",".join(cols)]
    for i in range(s.n):
        x = s.X[i]
        rec = [s.recipient_ids[i], cfg.recipient_gender, str(int(x[ia])), str(int(s.d[i])),
               str(int(x[ii])), str(int(x[ie])), world.rec_zip[i]]
        rec += [_fmt(x[j]) for j in rec_ordered] + [str(int(x[j])) for j in rec_unordered]
        snd = [s.sender_ids[i], other, str(int(x[sa])), str(int(x[ss])),
               str(int(x[si])), str(int(x[se])), world.snd_zip[i]]
        snd += [_fmt(x[j]) for j in snd_ordered] + ["0"] * (rec_o - len(snd_ordered))
        snd += [str(int(x[j])) for j in snd_unordered] + ["0"] * (rec_u - len(snd_unordered))
        lines += [",".join(rec), ",".join(snd)]
    _write_lines(out / "users.csv", lines, header)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 23])))
    provoked = rng.random(s.n) < provoked_rate
    t0 = 1451606400
    ev = ["sender_id,recipient_id,timestamp,action"]
    for i in range(s.n):
        a, b, t = s.sender_ids[i], s.recipient_ids[i], t0 + 60 * i
        ev.append(f"{a},{b},{t},visit")
        if s.y[i] == 1:
            ev.append(f"{a},{b},{t + 5},message")
        elif provoked[i]:
            ev += [f"{a},{b},{t + 5},like", f"{b},{a},{t + 10},visit",
                   f"{b},{a},{t + 15},like", f"{a},{b},{t + 20},message"]
    _write_lines(out / "events.csv", ev, header)

    cen = ["zip,lat,lon"] + [f"{z},{lat!r},{lon!r}" for z, (lat, lon) in world.centroids.items()]
    _write_lines(out / "zip_centroids.csv", cen, header)
    (out / "features.json").write_text(json.dumps(
        [{"name": f.name, "kind": f.kind, "role": f.role} for f in feats], indent=2) + "\n")


def _write_lines(path, lines, header):
    text = "\n".join(lines) + "\n"
    if header:
        text = "".join(f"# {h}\n" for h in header.splitlines()) + text
    Path(path).write_text(text)
