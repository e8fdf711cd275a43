"""Distance-dependent DSRC packet delivery.

Delivery is a Bernoulli draw whose probability is flat inside the effective
range, falls linearly to the maximum-range value, and is zero beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PdrProfile:
    er: float
    mr: float
    p_er: float
    p_mr: float

    def __post_init__(self):
        if not 0 < self.er < self.mr:
            raise ValueError(f"need 0 < er < mr, got er={self.er}, mr={self.mr}")
        if not 0 <= self.p_mr <= self.p_er <= 1:
            raise ValueError(f"need 0 <= p_mr <= p_er <= 1, got {self.p_mr}, {self.p_er}")


PRESETS = {
    "empirical": PdrProfile(er=150.0, mr=600.0, p_er=0.70, p_mr=0.10),
    "scaled": PdrProfile(er=1000.0, mr=4000.0, p_er=0.70, p_mr=0.10),
}


def pdr(profile: PdrProfile, d):
    """Packet delivery ratio at distance ``d`` (scalar or array, meters)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    frac = (d - profile.er) / (profile.mr - profile.er)
    p = profile.p_er + frac * (profile.p_mr - profile.p_er)
    p = np.where(d <= profile.er, profile.p_er, p)
    p = np.where(d > profile.mr, 0.0, p)
    return float(p) if p.ndim == 0 else p


def deliver_from_uniform(profile: PdrProfile | None, d, u):
    """Delivery outcome given a pre-drawn uniform ``u``.

    ``profile=None`` is the lossless channel: every packet arrives. Sharing
    ``u`` across profiles makes lossy deliveries a subset of lossless ones.
    """
    if profile is None:
        return np.ones(np.shape(u), dtype=bool) if np.ndim(u) else True
    out = np.asarray(u) < pdr(profile, d)
    return out if out.ndim else bool(out)


def try_deliver(profile: PdrProfile | None, d, rng: np.random.Generator):
    return deliver_from_uniform(profile, d, rng.random(np.shape(d)) if np.ndim(d) else rng.random())


@dataclass(frozen=True)
class LossStats:
    attempts: int
    drops: int

    @property
    def loss_rate(self) -> float:
        return self.drops / self.attempts if self.attempts else 0.0


def loss_stats(outcomes) -> LossStats:
    """Aggregate a log of delivery outcomes (True = delivered)."""
    arr = np.asarray(list(outcomes) if not isinstance(outcomes, np.ndarray) else outcomes, dtype=bool)
    return LossStats(int(arr.size), int((~arr).sum()))
