"""Networked simulation: truth generation, per-vehicle filters, packet exchange and fusion.

Every random quantity comes from a generator seeded by ``(seed, role)``. The
truth, the measurements and the link uniforms do not depend on the fusion
mechanism, so several mechanisms can be run against one world; replicas of
the vehicle network share filter and fusion draws, which makes a batched
run identical to running each mechanism alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .channel import deliver_from_uniform
from .config import Mechanism, ScenarioConfig
from .fusion import CommGraph, build_graph, max_degree_weights, ring_graph, shift_map
from .geomap import RoadMap, grid_map, load_map
from .gnss import (Constellation, common_error_map, default_constellation, geometric_ranges,
                   geometry_matrix, raw_fix_batch)
from .metrics import MechanismResult, MetricsReport
from .rbpf import STATE_DIM, ProcessParams, _road_arrays
from .trajectories import filter_valid, load_csv, sample_network, synth_trajectories

log = logging.getLogger(__name__)

# generator roles
TRAJ, TRUTH, MEAS, FILTER, LINK, FUSION, FUSION_DRAWS = range(1, 8)

INIT_POS_VAR = 25.0
INIT_VEL_VAR = 1.0
INIT_CLOCK_VAR = 100.0
INIT_DRIFT_VAR = 1.0
TRUTH_CLOCK_SIGMA = 30.0
TRUTH_DRIFT_SIGMA = 0.1
RESAMPLE_THRESHOLD = 0.5
QP_MAX_ITER = 500
QP_RTOL = 1e-8
CONNECT_ATTEMPTS = 1000


def stream(seed: int, role: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), role])


@dataclass(eq=False)
class World:
    """Everything that is fixed before any filter runs."""

    road_map: RoadMap
    constellation: Constellation
    positions: np.ndarray   # (N, n, 2)
    velocities: np.ndarray  # (N, n, 2)
    clocks: np.ndarray      # (N, n)
    biases: np.ndarray      # (N, S)
    z: np.ndarray           # (N, n, S)
    fixes: np.ndarray       # (N, n, 2)
    fix_clocks: np.ndarray  # (N, n)
    resid0: np.ndarray      # (n, S) first-epoch fix residual vectors
    error_map: np.ndarray   # (2, S) bias -> horizontal fix error

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[1]

    @property
    def common_true(self) -> np.ndarray:
        return self.biases @ self.error_map.T


def road_map_for(cfg: ScenarioConfig) -> RoadMap:
    if cfg.map == "synthetic":
        return grid_map(cfg.map_extent_m, cfg.map_spacing_m, cfg.lane_half_width_m, cfg.kernel_sigma_m)
    return load_map(cfg.map)


def _trajectories(cfg: ScenarioConfig, road_map: RoadMap, seed: int):
    rng = stream(seed, TRAJ)
    duration = cfg.n_steps * cfg.dt
    if cfg.trajectories == "synthetic":
        need_connected = cfg.connected_network and cfg.topology == "proximity" and cfg.n_vehicles > 1
        for _ in range(CONNECT_ATTEMPTS):
            ts = synth_trajectories(road_map, cfg.n_vehicles, duration, tuple(cfg.speed_range_mps), rng, cfg.dt)
            if not need_connected:
                return ts
            start = np.array([tr.positions[0] for tr in ts])
            if build_graph(start, cfg.comm_range_m, cfg.max_neighbors).is_connected():
                return ts
        raise ValueError(f"no connected {cfg.n_vehicles}-vehicle network in {CONNECT_ATTEMPTS} draws; "
                         "raise comm_range_m or shrink the map")
    ts = filter_valid(load_csv(cfg.trajectories, origin=road_map.origin), min_duration_s=duration)
    return sample_network(ts, cfg.n_vehicles, rng)


def build_world(cfg: ScenarioConfig, seed: int | None = None, road_map: RoadMap | None = None) -> World:
    seed = cfg.seed if seed is None else seed
    road_map = road_map or road_map_for(cfg)
    ts = _trajectories(cfg, road_map, seed)
    N, n = cfg.n_steps, cfg.n_vehicles
    track_pos = np.stack([tr.positions[:N] for tr in ts], axis=1)
    track_vel = np.stack([tr.velocities[:N] for tr in ts], axis=1)
    moving = np.zeros(n, dtype=bool)
    if cfg.mode == "host_dynamic":
        moving[0] = True
    elif cfg.mode == "full_dynamic":
        moving[:] = True
    positions = np.where(moving[None, :, None], track_pos, track_pos[:1])
    velocities = np.where(moving[None, :, None], track_vel, 0.0)

    sats = default_constellation(cfg.n_sats, cfg.constellation_seed)
    S = sats.n_sats
    rng = stream(seed, TRUTH)
    c0 = rng.standard_normal(S) * cfg.initial_bias_sigma_m
    steps = rng.standard_normal((N - 1, S)) * cfg.bias_drift_sigma * cfg.dt
    biases = c0 + np.vstack([np.zeros((1, S)), np.cumsum(steps, axis=0)])
    b0 = rng.standard_normal(n) * TRUTH_CLOCK_SIGMA
    drift = rng.standard_normal(n) * TRUTH_DRIFT_SIGMA
    clocks = b0 + drift * (np.arange(N) * cfg.dt)[:, None]

    meas = stream(seed, MEAS)
    rho = geometric_ranges(sats.sat_positions, positions)
    z = rho + biases[:, None, :] + clocks[..., None] + meas.standard_normal((N, n, S)) * cfg.noncommon_sigma_m
    fx, fc, _, ok = raw_fix_batch(z.reshape(-1, S), sats.sat_positions, np.zeros((N * n, 2)))
    if not ok.all():
        log.warning("%d raw fixes did not converge", int((~ok).sum()))
    fixes, fix_clocks = fx.reshape(N, n, 2), fc.reshape(N, n)
    resid0 = z[0] - geometric_ranges(sats.sat_positions, fixes[0]) - fix_clocks[0][:, None]
    return World(road_map, sats, positions, velocities, clocks, biases, z, fixes, fix_clocks, resid0,
                 common_error_map(sats))


def graph_at(cfg: ScenarioConfig, world: World, step: int) -> CommGraph:
    n = world.n_vehicles
    if cfg.topology == "ring":
        return ring_graph(n) if n > 1 else CommGraph(1, frozenset(), directed=True)
    return build_graph(world.positions[step], cfg.comm_range_m, cfg.max_neighbors)


def _layout(g: CommGraph, T: int):
    """Slot table (n, T) with the vehicle itself first, and source table (n, T-1)."""
    tracked = np.full((g.n, T), -1, dtype=np.int64)
    for i in range(g.n):
        nb = g.neighbors(i)
        if len(nb) > T - 1:
            raise ValueError(f"vehicle {i} has {len(nb)} neighbors, more than {T - 1} slots")
        tracked[i, 0] = i
        tracked[i, 1:1 + len(nb)] = nb
    return tracked, tracked[:, 1:].copy()


def _slot_of(tracked, n):
    out = np.full((len(tracked), n), -1, dtype=np.int64)
    h, t = np.nonzero(tracked >= 0)
    out[h, tracked[h, t]] = t
    return out


def initial_filters(cfg: ScenarioConfig, world: World, tracked: np.ndarray, rng: np.random.Generator,
                    n_particles: int | None = None):
    """Bias particles and conditional vehicle beliefs at the first epoch.

    Every host starts from the same prior draw along the directions that move
    a position fix (those are settled only by the road map). Along the
    remaining directions the prior is conditioned exactly on the mean fix
    residual of the vehicles the host tracks. Each particle's vehicle means
    sit at the raw fix corrected for that particle's biases.
    """
    P, S = n_particles or cfg.n_particles, world.constellation.n_sats
    H, T = tracked.shape
    sig0, sig = cfg.initial_bias_sigma_m, cfg.noncommon_sigma_m
    Q, _ = np.linalg.qr(geometry_matrix(world.constellation.sat_positions))
    col_proj = Q @ Q.T
    res_proj = np.eye(S) - col_proj
    col = (rng.standard_normal((P, S)) * sig0) @ col_proj
    res_noise = rng.standard_normal((P, S)) @ res_proj
    shift = shift_map(world.constellation.sat_positions)
    biases = np.empty((H, P, S))
    means = np.zeros((H, P, T, STATE_DIM))
    covs = np.tile(np.eye(STATE_DIM), (H, T, 1, 1))
    cov0 = np.diag([INIT_POS_VAR, INIT_VEL_VAR, INIT_POS_VAR, INIT_VEL_VAR, INIT_CLOCK_VAR, INIT_DRIFT_VAR])
    for h in range(H):
        vs = tracked[h][tracked[h] >= 0]
        kappa = sig0 ** 2 / (sig0 ** 2 + sig ** 2 / len(vs)) if sig0 > 0 else 0.0
        rbar = world.resid0[vs].mean(axis=0) @ res_proj
        biases[h] = col + kappa * rbar + np.sqrt(sig0 ** 2 * (1 - kappa)) * res_noise
        dp = biases[h] @ shift.T
        for t, v in enumerate(vs):
            means[h, :, t, 0] = world.fixes[0, v, 0] + dp[:, 0]
            means[h, :, t, 2] = world.fixes[0, v, 1] + dp[:, 1]
            means[h, :, t, 4] = world.fix_clocks[0, v] + dp[:, 2]
            means[h, :, t, 1] = world.velocities[0, v, 0]
            means[h, :, t, 3] = world.velocities[0, v, 1]
            covs[h, t] = cov0
    return biases, means, covs


class _Coefficients:
    """Fusion coefficients ``(n, M)`` over each host's sources for one mechanism."""

    def __init__(self, mech: Mechanism, cfg: ScenarioConfig, seed: int, n: int):
        self.mech = mech
        self.draws = stream(seed, FUSION_DRAWS).exponential(size=(n, n)) if mech.kind == "decentralized_rand" else None
        self._graph = None

    def set_graph(self, g: CommGraph, src):
        self._graph = g
        self.src = src
        self.valid = src >= 0
        safe = np.where(self.valid, src, 0)
        rows = np.arange(g.n)[:, None]
        kind = self.mech.kind
        if kind == "max_degree":
            self.base = np.where(self.valid, max_degree_weights(g).a[rows, safe], 0.0)
        elif kind == "constant_alpha":
            deg = np.maximum(self.valid.sum(axis=1, keepdims=True), 1)
            self.base = np.where(self.valid, (1.0 - self.mech.alpha) / deg, 0.0)
        elif kind == "decentralized_rand":
            d = np.where(self.valid, self.draws[rows, safe], 0.0)
            self.base = d / (self.draws[np.arange(g.n), np.arange(g.n)][:, None] + d.sum(axis=1, keepdims=True))
        elif kind == "decentralized_opt":
            self.start = max_degree_weights(g).a
        else:
            self.base = np.zeros(src.shape)

    def __call__(self, x, delivered):
        if self.mech.kind == "decentralized_opt":
            usable = delivered & self.valid
            n = len(x)
            rows = np.arange(n)[:, None]
            safe = np.where(usable, self.src, 0)
            mask = np.eye(n, dtype=bool)
            mask[np.broadcast_to(rows, safe.shape)[usable], safe[usable]] = True
            a0 = np.where(mask, self.start, 0.0)
            a0[np.arange(n), np.arange(n)] += 1.0 - a0.sum(axis=1)
            a, _ = K.pgd_variance(x - x.mean(axis=0), mask, a0, QP_MAX_ITER, QP_RTOL)
            return np.where(usable, a[rows, safe], 0.0)
        return np.where(delivered, self.base, 0.0)


def simulate(cfg: ScenarioConfig, world: World, mechanisms, seed: int) -> list:
    """Run decentralized mechanisms side by side (or one centralized run)."""
    mechanisms = [Mechanism.parse(m) if isinstance(m, str) else m for m in mechanisms]
    central = [m.kind == "centralized" for m in mechanisms]
    if any(central) and len(mechanisms) > 1:
        raise ValueError("centralized mode runs on its own")
    if central and central[0]:
        return [_simulate_centralized(cfg, world, mechanisms[0], seed)]
    return _simulate_network(cfg, world, mechanisms, seed)


def _process(cfg):
    params = ProcessParams(accel_sigma=cfg.accel_sigma, bias_drift_sigma=cfg.filter_bias_drift_sigma)
    return params.transition(cfg.dt), params.noise(cfg.dt)


def _report_degenerate(flags, owners, step, counts, R):
    for h in np.flatnonzero(flags):
        log.warning("step %d: filter of vehicle %d degenerated; weights reset to uniform", step, owners[h] + 1)
        counts[h // (len(flags) // R)] += 1


def _simulate_network(cfg, world, mechanisms, seed):
    N, n = world.n_steps, world.n_vehicles
    R = len(mechanisms)
    P, S = cfg.n_particles, world.constellation.n_sats
    sats = world.constellation.sat_positions
    A, Qn = _process(cfg)
    road, kv, use_road = _road_arrays(world.road_map if cfg.road_constraints else None)
    profile = cfg.pdr_profile
    shift = shift_map(sats)
    L = world.error_map
    dynamic = cfg.mode != "stationary" and cfg.topology != "ring"

    g = graph_at(cfg, world, 0)
    T = min(n, cfg.max_neighbors + 1) if dynamic else 1 + int(max((len(g.neighbors(i)) for i in range(n)), default=0))
    M = T - 1
    tracked, src = _layout(g, T)
    frng, lrng, urng = stream(seed, FILTER), stream(seed, LINK), stream(seed, FUSION)
    b0, m0, c0 = initial_filters(cfg, world, tracked, frng)

    HH = R * n
    owners = np.tile(np.arange(n), R)
    offsets = np.repeat(np.arange(R) * n, n)[:, None]
    B = np.tile(b0, (R, 1, 1))
    Mn = np.tile(m0, (R, 1, 1, 1))
    Cv = np.tile(c0, (R, 1, 1, 1))
    W = np.full((HH, P), 1.0 / P)
    touch = np.full((HH, P, n), K.NEVER, dtype=np.int64)
    touch[np.arange(HH), :, owners] = 0
    TR = np.tile(tracked, (R, 1))
    slot_of = _slot_of(TR, n)
    active = np.repeat([m.kind != "none" for m in mechanisms], n)
    coefs = [_Coefficients(m, cfg, seed, n) for m in mechanisms]
    for c in coefs:
        c.set_graph(g, src)

    est = np.empty((R, N, n, 2))
    xs = np.empty((R, N, n, 2))
    neighbors = np.zeros((N, n), dtype=np.int64)
    received = np.zeros((N, n), dtype=np.int64)
    link_log = []
    degenerate = np.zeros(R, dtype=np.int64)

    def record(step):
        x = np.einsum("hp,hps->hs", W, B) @ L.T
        e = np.einsum("hp,hpi->hi", W, Mn[:, :, 0, :][:, :, [0, 2]])
        xs[:, step] = x.reshape(R, n, 2)
        est[:, step] = e.reshape(R, n, 2)

    record(0)
    neighbors[0] = (src >= 0).sum(axis=1)
    for step in range(1, N):
        if dynamic:
            g_new = graph_at(cfg, world, step)
            if g_new.edges != g.edges:
                g = g_new
                new_tracked, src = _layout(g, T)
                Mn, Cv = _retrack(B, W, Mn, Cv, TR, new_tracked, R, n, shift)
                TR = np.tile(new_tracked, (R, 1))
                slot_of = _slot_of(TR, n)
                for c in coefs:
                    c.set_graph(g, src)
        valid = src >= 0
        neighbors[step] = valid.sum(axis=1)

        jitter = frng.standard_normal((n, P, S)) * (cfg.filter_bias_drift_sigma * cfg.dt)
        K.predict_all(B, Mn, Cv, TR, np.tile(jitter, (R, 1, 1)), A, Qn)

        pos = world.positions[step]
        safe = np.where(valid, src, 0)
        dist = np.linalg.norm(pos[:, None, :] - pos[safe], axis=2)
        u = lrng.random((n, n))
        delivered = valid & deliver_from_uniform(profile, dist, u[np.arange(n)[:, None], safe])
        if valid.any():
            r_i, r_m = np.nonzero(valid)
            link_log.append(np.column_stack([np.full(len(r_i), step), r_i, src[r_i, r_m],
                                             dist[r_i, r_m], delivered[r_i, r_m]]))
        received[step] = delivered.sum(axis=1)
        has = np.ones((n, T), dtype=bool)
        has[:, 1:] = delivered
        has_all = np.tile(has, (R, 1))

        flags = K.update_all(B, W, Mn, Cv, TR, has_all, world.z[step], sats, cfg.noncommon_sigma_m ** 2,
                             road, kv, use_road)
        if flags.any():
            _report_degenerate(flags, owners, step, degenerate, R)
        touch[np.arange(HH), :, owners] = step
        ur = frng.random(n)
        K.resample_all(B, W, Mn, touch, np.tile(ur, R), RESAMPLE_THRESHOLD)

        if M > 0 and active.any():
            x = (np.einsum("hp,hps->hs", W, B) @ L.T).reshape(R, n, 2)
            coef = np.vstack([c(x[r], delivered) for r, c in enumerate(coefs)])
            src_all = np.where(np.tile(valid, (R, 1)), np.tile(src, (R, 1)) + offsets, -1)
            uf = np.tile(urng.random((n, M + 2)), (R, 1))
            B, Mn, touch, imported, _ = K.fuse_all(
                B, W, Mn, Cv, TR, slot_of, touch, owners, src_all, coef, has_all, step,
                cfg.provenance_window, shift, uf, road, kv, use_road, active)
            W[imported > 0] = 1.0 / P
        record(step)

    links = np.vstack(link_log) if link_log else np.zeros((0, 5))
    return [_result(cfg, world, mech, seed, est[r], xs[r], neighbors, received, links, int(degenerate[r]))
            for r, mech in enumerate(mechanisms)]


def _retrack(B, W, Mn, Cv, TR, new_tracked, R, n, shift):
    """Re-slot beliefs after a topology change.

    Kept vehicles carry their beliefs over. A newcomer is seeded from its own
    filter's estimate, shifted per particle by the bias difference.
    """
    HH, P, T, _ = Mn.shape
    out_m = np.zeros_like(Mn)
    out_c = np.tile(np.eye(STATE_DIM), (HH, T, 1, 1))
    for h in range(HH):
        r, i = divmod(h, n)
        old = list(TR[h])
        for t, v in enumerate(new_tracked[i]):
            if v < 0:
                continue
            if v in old:
                s = old.index(v)
                out_m[h, :, t] = Mn[h, :, s]
                out_c[h, t] = Cv[h, s]
                continue
            g = r * n + v
            mbar = W[g] @ Mn[g, :, 0]
            dp = (B[h] - W[g] @ B[g]) @ shift.T
            out_m[h, :, t] = mbar
            out_m[h, :, t, 0] += dp[:, 0]
            out_m[h, :, t, 2] += dp[:, 1]
            out_m[h, :, t, 4] += dp[:, 2]
            out_c[h, t] = Cv[g, 0]
    return out_m, out_c


def _simulate_centralized(cfg, world, mech, seed):
    N, n = world.n_steps, world.n_vehicles
    P, S = cfg.central_particle_count, world.constellation.n_sats
    sats = world.constellation.sat_positions
    A, Qn = _process(cfg)
    road, kv, use_road = _road_arrays(world.road_map if cfg.road_constraints else None)
    profile = cfg.pdr_profile
    L = world.error_map
    dynamic = cfg.mode != "stationary" and cfg.topology != "ring"

    tracked = np.arange(n, dtype=np.int64)[None]
    frng, lrng = stream(seed, FILTER), stream(seed, LINK)
    B, Mn, Cv = initial_filters(cfg, world, tracked, frng, P)
    W = np.full((1, P), 1.0 / P)
    touch = np.zeros((1, P, n), dtype=np.int64)
    others = np.arange(1, n)

    est = np.empty((N, n, 2))
    xs = np.empty((N, n, 2))
    neighbors = np.zeros((N, n), dtype=np.int64)
    received = np.zeros((N, n), dtype=np.int64)
    link_log = []
    degenerate = [0]

    def record(step):
        xs[step] = (W[0] @ B[0]) @ L.T
        est[step] = np.einsum("p,pti->ti", W[0], Mn[0][:, :, [0, 2]])

    g = graph_at(cfg, world, 0)
    deg = np.array([len(g.neighbors(i)) for i in range(n)])
    neighbors[0] = deg
    record(0)
    for step in range(1, N):
        if dynamic:
            g = graph_at(cfg, world, step)
            deg = np.array([len(g.neighbors(i)) for i in range(n)])
        neighbors[step] = deg
        jitter = frng.standard_normal((1, P, S)) * (cfg.filter_bias_drift_sigma * cfg.dt)
        K.predict_all(B, Mn, Cv, tracked, jitter, A, Qn)
        pos = world.positions[step]
        dist = np.linalg.norm(pos[others] - pos[0], axis=1)
        u = lrng.random((n, n))
        ok = deliver_from_uniform(profile, dist, u[0, others])
        if len(others):
            link_log.append(np.column_stack([np.full(len(others), step), np.zeros(len(others)), others, dist, ok]))
        received[step, 0] = int(np.sum(ok))
        has = np.ones((1, n), dtype=bool)
        has[0, 1:] = ok
        flags = K.update_all(B, W, Mn, Cv, tracked, has, world.z[step], sats, cfg.noncommon_sigma_m ** 2,
                             road, kv, use_road)
        if flags.any():
            _report_degenerate(flags, np.zeros(1, dtype=np.int64), step, degenerate, 1)
        touch[0, :, 0] = step
        K.resample_all(B, W, Mn, touch, frng.random(1), RESAMPLE_THRESHOLD)
        record(step)
    links = np.vstack(link_log) if link_log else np.zeros((0, 5))
    return _result(cfg, world, mech, seed, est, xs, neighbors, received, links, int(degenerate[0]))


def _result(cfg, world, mech, seed, est, xs, neighbors, received, links, degenerate):
    return MechanismResult(
        seed=int(seed), mechanism=mech.label, n_vehicles=world.n_vehicles, mode=cfg.mode,
        channel=cfg.channel_label, dt=cfg.dt, truth=world.positions, raw=world.fixes, estimate=est,
        common_estimate=xs, common_true=world.common_true, neighbors=neighbors, received=received,
        links=links, degeneracy_events=degenerate)


def run_mechanisms(cfg: ScenarioConfig, mechanisms, seeds) -> MetricsReport:
    """Every mechanism on every seed; each seed's world is shared by all mechanisms."""
    cfg.validate()
    mechanisms = [Mechanism.parse(m) if isinstance(m, str) else m for m in mechanisms]
    road_map = road_map_for(cfg)
    results = []
    for seed in seeds:
        world = build_world(cfg, seed, road_map)
        batch = [m for m in mechanisms if m.kind != "centralized"]
        by_label = {}
        if batch:
            for r in simulate(cfg, world, batch, seed):
                by_label[r.mechanism] = r
        for m in mechanisms:
            if m.kind == "centralized":
                by_label[m.label] = simulate(cfg, world, [m], seed)[0]
        results.extend(by_label[m.label] for m in mechanisms)
    return MetricsReport(cfg, results)


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    return run_mechanisms(cfg, [cfg.mechanism], [cfg.seed])


def run_seeds(cfg: ScenarioConfig, k: int) -> MetricsReport:
    if k < 1:
        raise ValueError("need at least one seed")
    return run_mechanisms(cfg, [cfg.mechanism], range(cfg.seed, cfg.seed + k))
