"""Market price estimation from the bank's settlement history.

Resources are compared on their hardware parameters only: processor count
and speed, main memory, secondary storage and network bandwidth. Each
dimension is min-max scaled over the history, and the estimate is the mean
effective rate (charge per CPU-hour) of the k nearest past jobs, ties going
to the older record.

:class:`PriceEstimator` follows the scikit-learn estimator protocol so it can
be cross-validated or dropped into a pipeline; :func:`estimate_price` wraps
it with exact decimal averaging for the bank's API.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import BadParameters, NoHistory
from .money import round_half_up
from .rur import ResourceUsageRecord, compute_charge, dec, dec_str

DIMENSIONS = ("cpu_count", "cpu_speed_ghz", "memory_mb", "storage_gb", "bandwidth_mbps")


@dataclass(frozen=True)
class ResourceDescription:
    cpu_count: int
    cpu_speed_ghz: Decimal
    memory_mb: int
    storage_gb: int
    bandwidth_mbps: Decimal

    def __post_init__(self):
        object.__setattr__(self, "cpu_speed_ghz", dec(self.cpu_speed_ghz))
        object.__setattr__(self, "bandwidth_mbps", dec(self.bandwidth_mbps))
        if min(self.cpu_count, self.memory_mb, self.storage_gb) <= 0 or \
                self.cpu_speed_ghz <= 0 or self.bandwidth_mbps <= 0:
            raise BadParameters("resource description values must be positive")

    def to_vector(self) -> list[float]:
        return [float(getattr(self, d)) for d in DIMENSIONS]

    def to_wire(self) -> dict:
        return {"cpu_count": self.cpu_count, "cpu_speed_ghz": dec_str(self.cpu_speed_ghz),
                "memory_mb": self.memory_mb, "storage_gb": self.storage_gb,
                "bandwidth_mbps": dec_str(self.bandwidth_mbps)}

    @classmethod
    def from_wire(cls, d: dict) -> "ResourceDescription":
        try:
            return cls(int(d["cpu_count"]), dec(d["cpu_speed_ghz"]), int(d["memory_mb"]),
                       int(d["storage_gb"]), dec(d["bandwidth_mbps"]))
        except (KeyError, TypeError, ValueError):
            raise BadParameters("malformed resource description") from None


@dataclass(frozen=True)
class PriceSample:
    description: ResourceDescription
    rate: Fraction  # G$ per CPU-hour


@dataclass(frozen=True)
class PriceEstimate:
    estimated_rate: Decimal
    sample_count: int
    neighbor_distance_mean: float

    def to_wire(self) -> dict:
        return {"estimated_rate": f"{self.estimated_rate:.3f}", "sample_count": self.sample_count,
                "neighbor_distance_mean": f"{self.neighbor_distance_mean:.6f}"}


class PriceEstimator(BaseEstimator, RegressorMixin):
    """k-nearest-neighbour regressor over min-max scaled hardware vectors."""

    def __init__(self, n_neighbors: int = 5):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.n_features_in_ = X.shape[1]
        self.samples_ = self._scale(X)
        self.y_ = y
        return self

    def _scale(self, X):
        span = self.data_max_ - self.data_min_
        safe = np.where(span == 0, 1.0, span)
        return np.where(span == 0, 0.0, (X - self.data_min_) / safe)

    def kneighbors(self, X):
        """Distances and indices of the nearest samples, older first on ties."""
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        Q = self._scale(X)
        k = min(self.n_neighbors, len(self.samples_))
        dists, idxs = [], []
        for q in Q:
            d = np.sqrt(((self.samples_ - q) ** 2).sum(axis=1))
            order = np.argsort(d, kind="stable")[:k]
            dists.append(d[order])
            idxs.append(order)
        return np.array(dists), np.array(idxs)

    def predict(self, X):
        _, idx = self.kneighbors(X)
        return self.y_[idx].mean(axis=1)


def history_from_transfers(transfers: Iterable, cancelled: Iterable[int] = ()) -> list[PriceSample]:
    """Extract (description, effective rate) samples from settled transfers.

    Only transfers whose RUR carries a resource description and a non-zero
    CPU time contribute.
    """
    skip = set(cancelled)
    samples = []
    for t in transfers:
        if t.transaction_id in skip or not t.resource_usage_record:
            continue
        try:
            rur = ResourceUsageRecord.from_bytes(t.resource_usage_record)
        except Exception:
            continue
        if rur.description is None or not rur.usage.get("cpu"):
            continue
        try:
            desc = ResourceDescription.from_wire(rur.description)
            charge = compute_charge(rur).total
        except Exception:
            continue
        samples.append(PriceSample(desc, Fraction(charge.amount_milli, 1000) / Fraction(rur.usage["cpu"])))
    return samples


def estimate_price(history: list[PriceSample], description: ResourceDescription, k: int = 5) -> PriceEstimate:
    if not history:
        raise NoHistory("no priced jobs on record")
    if k < 1:
        raise BadParameters("k must be >= 1")
    X = np.array([s.description.to_vector() for s in history])
    y = np.array([float(s.rate) for s in history])
    est = PriceEstimator(n_neighbors=k).fit(X, y)
    dist, idx = est.kneighbors([description.to_vector()])
    chosen = [history[i].rate for i in idx[0]]
    mean = sum(chosen, Fraction(0)) / len(chosen)
    rate = Decimal(round_half_up(mean * 1000)).scaleb(-3)
    return PriceEstimate(rate, len(chosen), float(dist[0].mean()))
