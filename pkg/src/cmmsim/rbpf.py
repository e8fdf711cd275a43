"""Rao-Blackwellized particle filter over per-satellite common biases.

Particles sample the common-bias vector. Conditioned on a particle, each
tracked vehicle's 6-state ``[x, vx, y, vy, clock, clock drift]`` is handled by
an EKF. The EKF gain and covariance are linearized once per vehicle at the
particle-weighted mean position and shared across particles; innovations and
means stay per particle. With satellites ~20,000 km away the linearization
differences between particles are far below numerical noise.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .gnss import Constellation, PseudoRangeSet, geometry_matrix
from .geomap import LaneSegment, RoadMap, road_index

STATE_DIM = 6
POS = (0, 2)
PROVENANCE_WINDOW = 10


class DegeneracyError(RuntimeError):
    """Every particle weight collapsed to zero; ``recovered`` holds the reset set."""

    def __init__(self, recovered):
        super().__init__("all particle weights underflowed; weights reset to uniform")
        self.recovered = recovered


@dataclass
class VehicleBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(STATE_DIM)
        self.cov = np.asarray(self.cov, dtype=float).reshape(STATE_DIM, STATE_DIM)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ValueError("belief must be finite")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise ValueError("belief covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-9:
            raise ValueError("belief covariance must be positive semidefinite")

    @property
    def position(self) -> np.ndarray:
        return self.mean[list(POS)]


@dataclass
class BiasParticle:
    biases: np.ndarray
    weight: float
    beliefs: dict
    provenance: frozenset


@dataclass
class ProcessParams:
    """Filter process noise.

    accel_sigma: horizontal acceleration (m/s^2); clock_sigma: clock bias
    random walk (m/sqrt(s)); clock_drift_sigma: clock drift rate noise
    (m/s^2); bias_drift_sigma: common-bias drift (per the bias random walk,
    the per-step increment has std ``bias_drift_sigma * dt``).
    """

    accel_sigma: float = 0.5
    clock_sigma: float = 0.5
    clock_drift_sigma: float = 0.1
    bias_drift_sigma: float = 1.0

    def transition(self, dt: float) -> np.ndarray:
        A = np.eye(STATE_DIM)
        A[0, 1] = A[2, 3] = A[4, 5] = dt
        return A

    def noise(self, dt: float) -> np.ndarray:
        g = np.array([0.5 * dt * dt, dt])
        acc = np.outer(g, g)
        Q = np.zeros((STATE_DIM, STATE_DIM))
        Q[0:2, 0:2] = self.accel_sigma ** 2 * acc
        Q[2:4, 2:4] = self.accel_sigma ** 2 * acc
        Q[4:6, 4:6] = self.clock_drift_sigma ** 2 * acc
        Q[4, 4] += self.clock_sigma ** 2 * dt
        return Q


@dataclass
class ParticleSet:
    """One vehicle's filter: ``P`` bias hypotheses over ``T`` tracked vehicles.

    ``touch[k, v]`` is the last step at which vehicle ``v`` contributed to
    particle ``k``; the provenance of a particle is every vehicle touched
    within the last ``window`` steps.
    """

    owner: int
    vehicle_ids: tuple
    biases: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    touch: np.ndarray
    step: int = 0
    window: int = PROVENANCE_WINDOW

    @property
    def nominal_size(self) -> int:
        return len(self.weights)

    @property
    def n_sats(self) -> int:
        return self.biases.shape[1]

    def slot(self, vehicle_id) -> int:
        return self.vehicle_ids.index(vehicle_id)

    def provenance(self, k) -> frozenset:
        return frozenset(np.flatnonzero(self.touch[k] > self.step - self.window).tolist())

    def particle(self, k) -> BiasParticle:
        beliefs = {
            v: VehicleBelief(self.means[k, t].copy(), self.covs[t].copy())
            for t, v in enumerate(self.vehicle_ids)
        }
        return BiasParticle(self.biases[k].copy(), float(self.weights[k]), beliefs, self.provenance(k))

    def particles(self):
        return [self.particle(k) for k in range(self.nominal_size)]

    def copy(self) -> "ParticleSet":
        return copy.deepcopy(self)

    # batched (H=1) views for the compiled kernels
    def _tracked(self):
        return np.asarray(self.vehicle_ids, dtype=np.int64)[None]


def new_particle_set(owner, vehicle_ids, init_beliefs, bias_samples, n_vehicles=None, step=0,
                     window=PROVENANCE_WINDOW) -> ParticleSet:
    """Build a uniformly weighted set from bias samples ``(P, S)``.

    ``init_beliefs`` maps vehicle id to the belief every particle starts from.
    """
    bias_samples = np.array(bias_samples, dtype=float)
    P = len(bias_samples)
    ids = tuple(int(v) for v in vehicle_ids)
    n = n_vehicles if n_vehicles is not None else max(ids + (owner,)) + 1
    means = np.empty((P, len(ids), STATE_DIM))
    covs = np.empty((len(ids), STATE_DIM, STATE_DIM))
    for t, v in enumerate(ids):
        means[:, t] = init_beliefs[v].mean
        covs[t] = init_beliefs[v].cov
    touch = np.full((P, n), K.NEVER, dtype=np.int64)
    touch[:, owner] = step
    return ParticleSet(owner, ids, bias_samples, np.full(P, 1.0 / P), means, covs, touch, step, window)


def predict(ps: ParticleSet, dt: float, params: ProcessParams, rng: np.random.Generator) -> ParticleSet:
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = ps.copy()
    jitter = rng.standard_normal(out.biases.shape) * params.bias_drift_sigma * dt
    b, m, c = out.biases[None], out.means[None], out.covs[None]
    K.predict_all(b, m, c, out._tracked(), jitter[None], params.transition(dt), params.noise(dt))
    out.biases, out.means, out.covs = b[0], m[0], c[0]
    out.step += 1
    return out


def ekf_update(belief: VehicleBelief, z: PseudoRangeSet, c: Constellation, biases, noncommon_sigma: float):
    """Standard EKF update against the pseudo-range model with known biases.

    Returns the updated belief and the log-likelihood of ``z`` under the
    predicted measurement distribution.
    """
    if not noncommon_sigma > 0:
        raise ValueError("noncommon_sigma must be positive")
    sats = c.sat_positions
    p = belief.position
    G = geometry_matrix(sats, p)
    Hm = np.zeros((len(sats), STATE_DIM))
    Hm[:, 0], Hm[:, 2], Hm[:, 4] = G[:, 0], G[:, 1], 1.0
    d = sats[:, :2] - p
    zhat = np.sqrt(np.sum(d * d, axis=1) + sats[:, 2] ** 2) + np.asarray(biases) + belief.mean[4]
    nu = z.ranges - zhat
    R = noncommon_sigma ** 2 * np.eye(len(sats))
    S = Hm @ belief.cov @ Hm.T + R
    Kg = np.linalg.solve(S, Hm @ belief.cov).T
    mean = belief.mean + Kg @ nu
    IKH = np.eye(STATE_DIM) - Kg @ Hm
    cov = IKH @ belief.cov @ IKH.T + Kg @ R @ Kg.T
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() < 0:
        if w.min() < -1e-6:
            raise FloatingPointError(f"posterior covariance lost definiteness ({w.min():.3g})")
        cov = (V * np.maximum(w, 0)) @ V.T
    _, logdet = np.linalg.slogdet(S)
    ll = -0.5 * (nu @ np.linalg.solve(S, nu) + logdet + len(nu) * np.log(2 * np.pi))
    return VehicleBelief(mean, cov), float(ll)


def _road_arrays(road_map):
    """``(index tuple, kernel variance, enabled)`` for the compiled kernels."""
    if road_map is None:
        dummy = RoadMap((LaneSegment(np.array([[0.0, 0.0], [1.0, 0.0]])),))
        return road_index(dummy), 1.0, False
    return road_index(road_map), road_map.kernel_sigma ** 2, True


def weight_and_update(ps: ParticleSet, measurements: dict, road_map: RoadMap | None,
                      c: Constellation, noncommon_sigma: float) -> ParticleSet:
    """EKF update, likelihood weighting and road weighting for one filter.

    Vehicles absent from ``measurements`` (lost packets) contribute neither a
    likelihood nor a road factor. ``road_map=None`` disables the road factor.
    Raises :class:`DegeneracyError` (carrying the uniform-reset set) when no
    particle keeps any weight.
    """
    out = ps.copy()
    n = max(max(out.vehicle_ids) + 1, max(measurements, default=0) + 1)
    Z = np.ones((n, out.n_sats))
    has = np.zeros((1, len(out.vehicle_ids)), dtype=bool)
    for t, v in enumerate(out.vehicle_ids):
        if v in measurements:
            Z[v] = measurements[v].ranges
            has[0, t] = True
    b, w, m, cv = out.biases[None], out.weights[None].copy(), out.means[None], out.covs[None]
    road, kv, use = _road_arrays(road_map)
    degenerate = K.update_all(b, w, m, cv, out._tracked(), has, Z, c.sat_positions,
                              noncommon_sigma ** 2, road, kv, use)
    out.biases, out.weights, out.means, out.covs = b[0], w[0], m[0], cv[0]
    out.touch[:, out.owner] = out.step
    if degenerate[0]:
        raise DegeneracyError(out)
    return out


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights, n_out, offset) -> np.ndarray:
    """Indices drawn at ``(offset + i) / n_out``; ``offset`` is in [0, 1)."""
    return K.systematic_indices(np.asarray(weights, dtype=float), int(n_out), float(offset))


def resample(ps: ParticleSet, rng: np.random.Generator, threshold: float = 0.5) -> ParticleSet:
    """Systematic resampling, only when ESS drops below ``threshold * N``.

    The offset is drawn on every call so the stream advances the same way
    whether or not the gate fires.
    """
    offset = rng.random()
    if effective_sample_size(ps.weights) >= threshold * ps.nominal_size:
        return ps
    idx = systematic_resample(ps.weights, ps.nominal_size, offset)
    out = ps.copy()
    out.biases, out.means, out.touch = ps.biases[idx], ps.means[idx], ps.touch[idx]
    out.weights = np.full(ps.nominal_size, 1.0 / ps.nominal_size)
    return out


@dataclass
class Estimate:
    biases: np.ndarray
    bias_cov: np.ndarray
    vehicles: dict = field(default_factory=dict)
    state_covs: dict = field(default_factory=dict)

    def position(self, v) -> np.ndarray:
        return self.vehicles[v]["position"]


def estimate(ps: ParticleSet) -> Estimate:
    """Monte Carlo moments: within-particle covariance plus between-particle spread."""
    w = ps.weights
    cbar = w @ ps.biases
    dc = ps.biases - cbar
    bias_cov = (w[:, None] * dc).T @ dc
    out = Estimate(cbar, bias_cov)
    for t, v in enumerate(ps.vehicle_ids):
        m = w @ ps.means[:, t]
        dm = ps.means[:, t] - m
        out.vehicles[v] = {
            "position": m[list(POS)],
            "velocity": m[[1, 3]],
            "clock": m[[4, 5]],
        }
        out.state_covs[v] = ps.covs[t] + (w[:, None] * dm).T @ dm
    return out


@dataclass
class ParticleBank:
    """Several filters packed into padded host-major arrays (see ``_kernels``)."""

    owners: np.ndarray
    biases: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    tracked: np.ndarray
    touch: np.ndarray

    @property
    def n_hosts(self) -> int:
        return len(self.owners)

    def slot_of(self) -> np.ndarray:
        n = self.touch.shape[2]
        out = np.full((self.n_hosts, n), -1, dtype=np.int64)
        h, t = np.nonzero(self.tracked >= 0)
        out[h, self.tracked[h, t]] = t
        return out

    @classmethod
    def from_sets(cls, sets, n_vehicles=None) -> "ParticleBank":
        P = sets[0].nominal_size
        if any(s.nominal_size != P for s in sets):
            raise ValueError("all particle sets must share a nominal size")
        T = max(len(s.vehicle_ids) for s in sets)
        n = n_vehicles or max(s.touch.shape[1] for s in sets)
        H, S = len(sets), sets[0].n_sats
        means = np.zeros((H, P, T, STATE_DIM))
        covs = np.tile(np.eye(STATE_DIM), (H, T, 1, 1))
        tracked = np.full((H, T), -1, dtype=np.int64)
        touch = np.full((H, P, n), K.NEVER, dtype=np.int64)
        for h, s in enumerate(sets):
            t = len(s.vehicle_ids)
            means[h, :, :t] = s.means
            covs[h, :t] = s.covs
            tracked[h, :t] = s.vehicle_ids
            touch[h, :, : s.touch.shape[1]] = s.touch
        return cls(np.array([s.owner for s in sets], dtype=np.int64),
                   np.stack([s.biases for s in sets]), np.stack([s.weights for s in sets]),
                   means, covs, tracked, touch)

    def host(self, h, step=0, window=PROVENANCE_WINDOW) -> ParticleSet:
        keep = self.tracked[h] >= 0
        return ParticleSet(int(self.owners[h]), tuple(int(v) for v in self.tracked[h][keep]),
                           self.biases[h].copy(), self.weights[h].copy(),
                           self.means[h][:, keep].copy(), self.covs[h][keep].copy(),
                           self.touch[h].copy(), step, window)
