"""Ingestion of user tables and action logs into gender-split estimation samples.

File formats
------------
``users.csv``
    ``user_id,gender,age,sport_freq,income,education,zip`` followed by feature
    columns.  Feature columns are declared in a ``features.json`` sidecar as a
    list of ``{"name", "kind", "role"}`` objects where ``kind`` is ``ordered``
    or ``unordered`` and ``role`` selects whose value enters the pair
    covariates: ``recipient``, ``sender`` or ``both`` (default).
``events.csv``
    ``sender_id,recipient_id,timestamp,action``
``zip_centroids.csv``
    ``zip,lat,lon``

Lines starting with ``#`` before the header are treated as comments; the CLI
uses them to embed the resolved run configuration.
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, MalformedStreamError, SchemaError
from .sample import ORDERED, UNORDERED, EstimationSample, Feature, FeatureMetadata

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0

USER_COLUMNS = ("user_id", "gender", "age", "sport_freq", "income", "education", "zip")
EVENT_COLUMNS = ("sender_id", "recipient_id", "timestamp", "action")
CENTROID_COLUMNS = ("zip", "lat", "lon")

ACTION_TYPES = frozenset({
    "visit", "message", "smile", "smile_back", "like", "note",
    "profile_release", "applet", "block",
})
INVISIBLE_ACTIONS = frozenset({"visit"})

SPORT_CODES = {"0": 0, "1": 1, "2": 2, "3": 3,
               "never": 0, "rarely": 1, "monthly": 2, "weekly": 3}
OUT_OF_SCOPE_SPORT = frozenset({"4", "daily"})
GENDER_CODES = {"f": "f", "female": "f", "w": "f", "m": "m", "male": "m"}
MULTI_VALUE_SEPARATORS = ("|", ";")


# --------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    gender: str
    age: int
    sport_frequency: int
    income_level: int
    education_level: int
    zip: str
    ordered_features: tuple[float, ...] = ()
    unordered_features: tuple[int, ...] = ()


@dataclass(frozen=True)
class ActionEvent:
    sender_id: str
    recipient_id: str
    timestamp: float
    action_type: str

    def __post_init__(self):
        if self.action_type not in ACTION_TYPES:
            raise MalformedStreamError(f"unknown action type {self.action_type!r}")
        if self.sender_id == self.recipient_id:
            raise MalformedStreamError(f"self-directed event by {self.sender_id!r}")
        if not self.timestamp >= 0:
            raise MalformedStreamError(f"negative or missing timestamp {self.timestamp!r}")


@dataclass(frozen=True)
class Interaction:
    sender_id: str
    recipient_id: str
    message_sent: bool
    first_visit_time: float


@dataclass(frozen=True)
class UserFeature:
    """A user-level feature column and the pair side(s) it describes."""

    name: str
    kind: str = ORDERED
    role: str = "both"

    def __post_init__(self):
        if self.kind not in (ORDERED, UNORDERED):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ("recipient", "sender", "both"):
            raise SchemaError(f"feature {self.name!r}: unknown role {self.role!r}")


@dataclass
class UserTable:
    """Cleaned users indexed by ``user_id`` plus the drop tally of ingestion."""

    frame: pd.DataFrame
    features: tuple[UserFeature, ...]
    drops: dict[str, int] = field(default_factory=dict)
    category_codes: dict[str, list[str]] = field(default_factory=dict)
    dropped_ids: frozenset = frozenset()

    def __len__(self):
        return len(self.frame)

    def records(self) -> list[UserRecord]:
        ordered = [f.name for f in self.features if f.kind == ORDERED]
        unordered = [f.name for f in self.features if f.kind == UNORDERED]
        out = []
        for uid, row in self.frame.iterrows():
            out.append(UserRecord(
                user_id=uid, gender=row["gender"], age=int(row["age"]),
                sport_frequency=int(row["sport_freq"]), income_level=int(row["income"]),
                education_level=int(row["education"]), zip=row["zip"],
                ordered_features=tuple(float(row[c]) for c in ordered),
                unordered_features=tuple(int(row[c]) for c in unordered),
            ))
        return out


# --------------------------------------------------------------------------
# CSV helpers


def _read_csv(path, required) -> pd.DataFrame:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines(keepends=True)
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    if not lines:
        raise SchemaError(f"{path}: no header row")
    try:
        frame = pd.read_csv(io.StringIO("".join(lines)), dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    return frame


def read_feature_spec(path) -> tuple[UserFeature, ...]:
    try:
        items = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read feature sidecar {path}: {exc}") from exc
    return tuple(UserFeature(i["name"], i.get("kind", ORDERED), i.get("role", "both")) for i in items)


def _is_multi(value: str) -> bool:
    return any(sep in value for sep in MULTI_VALUE_SEPARATORS)


def _as_number(value: str) -> float | None:
    try:
        x = float(value)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def ingest_users(path, exclusions=(), features_path=None) -> UserTable:
    """Read ``users.csv``, drop unusable rows and remove excluded columns.

    Rows are dropped (and counted per reason) when a mandatory field is
    missing, the sport frequency is ``daily``, a mutually exclusive field holds
    more than one value, or a value is implausible.
    """
    frame = _read_csv(path, USER_COLUMNS)
    exclusions = set(exclusions)
    declared = {}
    if features_path is not None and Path(features_path).exists():
        declared = {f.name: f for f in read_feature_spec(features_path)}
    extra = [c for c in frame.columns if c not in USER_COLUMNS and c not in exclusions]
    features = []
    for col in extra:
        if col in declared:
            features.append(declared[col])
            continue
        values = [v for v in frame[col] if v != ""]
        if values and all(_as_number(v) is not None for v in values):
            features.append(UserFeature(col, ORDERED, "both"))
        else:
            raise SchemaError(f"undeclared non-numeric column {col!r}")
    for name in declared:
        if name not in frame.columns and name not in exclusions:
            raise SchemaError(f"declared feature {name!r} missing from {path}")
    frame = frame.drop(columns=[c for c in frame.columns if c in exclusions])

    drops = {"missing": 0, "daily": 0, "conflict": 0, "implausible": 0, "duplicate": 0}
    rows = []
    seen = set()
    dropped_ids = set()
    mandatory = list(USER_COLUMNS) + [f.name for f in features]
    exclusive = ["gender", "sport_freq", "income", "education"] + [
        f.name for f in features if f.kind == UNORDERED]
    for rec in frame.to_dict("records"):
        rec = {k: v.strip() for k, v in rec.items()}
        if any(rec[c] == "" for c in mandatory):
            drops["missing"] += 1
            dropped_ids.add(rec["user_id"])
            continue
        if any(_is_multi(rec[c]) for c in exclusive):
            drops["conflict"] += 1
            dropped_ids.add(rec["user_id"])
            continue
        sport = rec["sport_freq"].lower()
        if sport in OUT_OF_SCOPE_SPORT:
            drops["daily"] += 1
            dropped_ids.add(rec["user_id"])
            continue
        gender = GENDER_CODES.get(rec["gender"].lower())
        age, income, edu = (_as_number(rec[c]) for c in ("age", "income", "education"))
        ordered_ok = all(_as_number(rec[f.name]) is not None for f in features if f.kind == ORDERED)
        if (sport not in SPORT_CODES or gender is None or age is None or age < 18
                or income not in (1, 2, 3, 4, 5, 6) or edu not in (1, 2, 3, 4, 5)
                or not ordered_ok):
            drops["implausible"] += 1
            dropped_ids.add(rec["user_id"])
            continue
        if rec["user_id"] in seen:
            drops["duplicate"] += 1
            continue
        seen.add(rec["user_id"])
        row = {"user_id": rec["user_id"], "gender": gender, "age": int(age),
               "sport_freq": SPORT_CODES[sport], "income": int(income),
               "education": int(edu), "zip": rec["zip"]}
        for f in features:
            row[f.name] = float(rec[f.name]) if f.kind == ORDERED else rec[f.name]
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: no usable user rows (drops: {drops})")

    out = pd.DataFrame(rows).set_index("user_id")
    codes = {}
    for f in features:
        if f.kind == UNORDERED:
            levels = sorted(set(out[f.name]), key=lambda v: (_as_number(v) is None, _as_number(v) or 0, v))
            numeric = [_as_number(v) for v in levels]
            if all(x is not None and x == int(x) and 0 <= x < 64 for x in numeric):
                mapping = {v: int(x) for v, x in zip(levels, numeric)}
            else:
                mapping = {v: i for i, v in enumerate(levels)}
            codes[f.name] = levels
            out[f.name] = out[f.name].map(mapping).astype(int)
    log.info("ingested %d users from %s; drops %s", len(out), path, drops)
    return UserTable(out, tuple(features), drops, codes, frozenset(dropped_ids - seen))


def read_events(path) -> list[ActionEvent]:
    frame = _read_csv(path, EVENT_COLUMNS)
    events = []
    for i, rec in enumerate(frame.to_dict("records")):
        ts = _as_number(rec["timestamp"])
        if ts is None:
            raise MalformedStreamError(f"{path}: row {i + 1}: bad timestamp {rec['timestamp']!r}")
        events.append(ActionEvent(rec["sender_id"].strip(), rec["recipient_id"].strip(),
                                  ts, rec["action"].strip().lower()))
    return events


def read_centroids(path) -> dict[str, tuple[float, float]]:
    frame = _read_csv(path, CENTROID_COLUMNS)
    out = {}
    for rec in frame.to_dict("records"):
        lat, lon = _as_number(rec["lat"]), _as_number(rec["lon"])
        if lat is None or lon is None:
            raise DataError(f"{path}: bad coordinates for zip {rec['zip']!r}")
        out[rec["zip"].strip()] = (lat, lon)
    return out


# --------------------------------------------------------------------------
# One-way interaction filter


def filter_one_way(events) -> list[Interaction]:
    """Reduce an action log to one-way interactions per ordered (sender, recipient).

    Events are replayed in stable (timestamp, input order).  An ordered pair
    starts with the sender's first visit; a message counts only while the
    recipient has not yet acted visibly toward the sender.  Recipient visits
    are invisible and never truncate; any other recipient action (and a block
    from either side) closes the pair for good.
    """
    order = sorted(range(len(events)), key=lambda i: (events[i].timestamp, i))
    started: dict[tuple[str, str], float] = {}
    closed: set[tuple[str, str]] = set()
    messaged: set[tuple[str, str]] = set()
    visited: set[tuple[str, str]] = set()
    for i in order:
        ev = events[i]
        if ev.action_type not in ACTION_TYPES:
            raise MalformedStreamError(f"unknown action type {ev.action_type!r}")
        own = (ev.sender_id, ev.recipient_id)
        if ev.action_type == "visit":
            visited.add(own)
            if own not in started and own not in closed:
                started[own] = ev.timestamp
            continue
        if ev.action_type == "message" and own not in visited:
            raise MalformedStreamError(
                f"message {ev.sender_id}->{ev.recipient_id} at {ev.timestamp} without prior visit")
        # visible action: closes the reverse pair, where the actor is the recipient
        closed.add((ev.recipient_id, ev.sender_id))
        if own in closed:
            continue
        if ev.action_type == "message":
            messaged.add(own)
        elif ev.action_type == "block":
            closed.add(own)
    return [Interaction(s, r, (s, r) in messaged, t) for (s, r), t in sorted(started.items())]


def interactions_to_events(interactions) -> list[ActionEvent]:
    """Serialize interactions back into a minimal event stream."""
    events = []
    for it in interactions:
        events.append(ActionEvent(it.sender_id, it.recipient_id, it.first_visit_time, "visit"))
        if it.message_sent:
            events.append(ActionEvent(it.sender_id, it.recipient_id, it.first_visit_time, "message"))
    return events


# --------------------------------------------------------------------------
# Geography


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a sphere of radius 6371 km (vectorized)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def zip_distance(zip_a, zip_b, centroids) -> float:
    """Distance in km between two postal-code centroids; NaN when either is unknown."""
    if zip_a == zip_b and zip_a in centroids:
        return 0.0
    try:
        (la, oa), (lb, ob) = centroids[zip_a], centroids[zip_b]
    except KeyError:
        return math.nan
    # order the endpoints so the floating-point result is exactly symmetric
    if (la, oa) > (lb, ob):
        (la, oa), (lb, ob) = (lb, ob), (la, oa)
    return float(haversine_km(la, oa, lb, ob))


# --------------------------------------------------------------------------
# Sample assembly


def pair_metadata(features) -> FeatureMetadata:
    """Canonical covariate layout: recipient block, sender block, distance."""
    cols = [Feature("rec_age", ORDERED, "recipient"), Feature("rec_income", ORDERED, "recipient"),
            Feature("rec_education", ORDERED, "recipient")]
    cols += [Feature(f"rec_{f.name}", f.kind, "recipient") for f in features
             if f.role in ("recipient", "both")]
    cols += [Feature("snd_age", ORDERED, "sender"), Feature("snd_income", ORDERED, "sender"),
             Feature("snd_education", ORDERED, "sender"), Feature("snd_sport", ORDERED, "sender")]
    cols += [Feature(f"snd_{f.name}", f.kind, "sender") for f in features
             if f.role in ("sender", "both")]
    cols.append(Feature("distance", ORDERED, "shared"))
    return FeatureMetadata(tuple(cols))


@dataclass
class SampleReport:
    interactions: int = 0
    dropped_no_centroid: int = 0
    dropped_user: int = 0
    female: int = 0
    male: int = 0


def build_samples(users: UserTable, interactions, centroids, report: SampleReport | None = None):
    """Assemble (female, male) samples split by recipient gender.

    One observation per interaction: outcome ``message_sent``, treatment the
    recipient's sport frequency, covariates recipient and sender features plus
    their centroid distance.  Pairs with an unresolvable postal code, or
    involving a user removed during ingestion, are dropped and counted in
    ``report``; ids never seen in the user table are an error.
    """
    report = report if report is not None else SampleReport()
    meta = pair_metadata(users.features)
    frame = users.frame
    rec_feats = [f.name for f in users.features if f.role in ("recipient", "both")]
    snd_feats = [f.name for f in users.features if f.role in ("sender", "both")]
    rows = {"f": [], "m": []}
    for it in interactions:
        report.interactions += 1
        if it.recipient_id in users.dropped_ids or it.sender_id in users.dropped_ids:
            report.dropped_user += 1
            continue
        try:
            r = frame.loc[it.recipient_id]
            s = frame.loc[it.sender_id]
        except KeyError as exc:
            raise DataError(f"interaction {it.sender_id}->{it.recipient_id}: unknown user {exc}") from exc
        if r["gender"] == s["gender"]:
            raise DataError(f"same-gender pair {it.sender_id}->{it.recipient_id}")
        dist = zip_distance(r["zip"], s["zip"], centroids)
        if math.isnan(dist):
            report.dropped_no_centroid += 1
            continue
        x = [r["age"], r["income"], r["education"], *(r[c] for c in rec_feats),
             s["age"], s["income"], s["education"], s["sport_freq"], *(s[c] for c in snd_feats),
             dist]
        rows[r["gender"]].append((float(it.message_sent), int(r["sport_freq"]), x,
                                  it.sender_id, it.recipient_id))
    out = []
    for g in ("f", "m"):
        items = rows[g]
        p = len(meta)
        sample = EstimationSample(
            y=np.array([i[0] for i in items], dtype=float),
            d=np.array([i[1] for i in items], dtype=np.int64),
            X=np.array([i[2] for i in items], dtype=float).reshape(len(items), p),
            meta=meta,
            sender_ids=np.array([i[3] for i in items], dtype=object),
            recipient_ids=np.array([i[4] for i in items], dtype=object),
        )
        out.append(sample)
    report.female, report.male = out[0].n, out[1].n
    return out[0], out[1]


def pair_covariates(users: UserTable, sender_ids, recipient_ids, centroids, cache=None) -> np.ndarray:
    """Covariate rows in the :func:`pair_metadata` layout for arbitrary ordered pairs.

    Unknown centroids give a NaN distance; callers decide whether to drop.
    ``cache`` (a dict) memoizes postal-code distances across calls.
    """
    frame = users.frame
    rec_feats = [f.name for f in users.features if f.role in ("recipient", "both")]
    snd_feats = [f.name for f in users.features if f.role in ("sender", "both")]
    r = frame.loc[list(recipient_ids)]
    s = frame.loc[list(sender_ids)]
    cache = {} if cache is None else cache
    dist = np.empty(len(r))
    for j, key in enumerate(zip(r["zip"].to_numpy(), s["zip"].to_numpy())):
        if key not in cache:
            cache[key] = zip_distance(key[0], key[1], centroids)
        dist[j] = cache[key]
    cols = [r["age"], r["income"], r["education"], *(r[c] for c in rec_feats),
            s["age"], s["income"], s["education"], s["sport_freq"], *(s[c] for c in snd_feats)]
    X = np.column_stack([np.asarray(c, dtype=float) for c in cols] + [dist])
    return X.reshape(len(r), len(cols) + 1)


def load_samples(data_dir, exclusions=()):
    """Run ingestion, filtering and assembly on a directory of the three CSVs."""
    data_dir = Path(data_dir)
    users = ingest_users(data_dir / "users.csv", exclusions, data_dir / "features.json")
    events = read_events(data_dir / "events.csv")
    centroids = read_centroids(data_dir / "zip_centroids.csv")
    interactions = filter_one_way(events)
    report = SampleReport()
    female, male = build_samples(users, interactions, centroids, report)
    return users, interactions, centroids, female, male, report
