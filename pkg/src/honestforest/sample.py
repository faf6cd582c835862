"""Estimation sample containers shared by the pipeline, the simulator and the forest."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ARM_NAMES = ("never", "rarely", "monthly", "weekly")
N_ARMS = len(ARM_NAMES)

ORDERED = "ordered"
UNORDERED = "unordered"
ROLES = ("recipient", "sender", "shared")

# Heterogeneity variables in the canonical pair layout.  ``rec_sport`` is the
# treatment itself and is resolved against ``d`` rather than a column of X.
DEFAULT_HETEROGENEITY = (
    "rec_age", "rec_income", "rec_education", "rec_sport",
    "snd_age", "snd_income", "snd_education", "snd_sport",
    "distance",
)


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = ORDERED
    role: str = "shared"

    def __post_init__(self):
        if self.kind not in (ORDERED, UNORDERED):
            raise ValueError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"feature {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class FeatureMetadata:
    """Per-column name, kind and role of a covariate matrix."""

    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names")

    def __len__(self):
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def unordered_mask(self) -> np.ndarray:
        return np.array([f.kind == UNORDERED for f in self.features], dtype=bool)

    def index(self, name: str) -> int:
        for j, f in enumerate(self.features):
            if f.name == name:
                return j
        raise KeyError(name)

    def to_json(self) -> list[dict]:
        return [{"name": f.name, "kind": f.kind, "role": f.role} for f in self.features]

    @classmethod
    def from_json(cls, items) -> "FeatureMetadata":
        return cls(tuple(Feature(i["name"], i.get("kind", ORDERED), i.get("role", "shared"))
                         for i in items))


@dataclass
class EstimationSample:
    """Outcome, treatment and covariates of one gender-specific sample.

    ``sender_ids``/``recipient_ids`` are carried along when the sample was
    assembled from interaction logs; simulated samples number pairs 0..N-1.
    """

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    meta: FeatureMetadata
    z_names: tuple[str, ...] = DEFAULT_HETEROGENEITY
    sender_ids: np.ndarray | None = None
    recipient_ids: np.ndarray | None = None
    excluded: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.d = np.asarray(self.d, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float)
        n = len(self.y)
        if self.X.ndim != 2:
            raise ValueError("X must be two-dimensional")
        if len(self.d) != n or self.X.shape[0] != n:
            raise ValueError(f"length mismatch: y={n}, d={len(self.d)}, X={self.X.shape[0]}")
        if self.X.shape[1] != len(self.meta):
            raise ValueError("X columns do not match feature metadata")
        if n and (self.d.min() < 0 or self.d.max() >= N_ARMS):
            raise ValueError("treatment arm out of range 0..3")
        bad = set(self.meta.names) & set(self.excluded)
        if bad:
            raise ValueError(f"excluded (endogenous) columns present: {sorted(bad)}")
        for z in self.z_names:
            if z != "rec_sport":
                self.meta.index(z)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def z_indices(self) -> list[int]:
        return [self.meta.index(z) for z in self.z_names if z != "rec_sport"]

    def column(self, name: str) -> np.ndarray:
        """Covariate column by name; ``rec_sport`` returns the treatment."""
        if name == "rec_sport":
            return self.d.astype(float)
        return self.X[:, self.meta.index(name)]

    def subset(self, idx) -> "EstimationSample":
        idx = np.asarray(idx)
        return EstimationSample(
            y=self.y[idx], d=self.d[idx], X=self.X[idx], meta=self.meta,
            z_names=self.z_names,
            sender_ids=None if self.sender_ids is None else self.sender_ids[idx],
            recipient_ids=None if self.recipient_ids is None else self.recipient_ids[idx],
            excluded=self.excluded,
        )

    def arm_shares(self) -> np.ndarray:
        return np.bincount(self.d, minlength=N_ARMS) / max(self.n, 1)
