"""Satellite geometry, common-bias dynamics and pseudo-range synthesis.

All geometry lives in a local East-North-Up frame. Vehicles sit at Up = 0;
satellites are static over a scenario.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORBIT_RADIUS = 20_200_000.0


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual norm {residual:.3g} m)")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class Constellation:
    sat_positions: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sat_positions, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3:
            raise ValueError("satellite positions must be (N_s, 3)")
        if len(s) < 1:
            raise ValueError("constellation is empty")
        if np.any(s[:, 2] <= 0):
            raise ValueError("all satellites must be above the horizon")
        if len(np.unique(s, axis=0)) != len(s):
            raise ValueError("satellite positions must be distinct")
        object.__setattr__(self, "sat_positions", s)

    @property
    def n_sats(self) -> int:
        return len(self.sat_positions)


@dataclass(frozen=True, eq=False)
class CommonBiasState:
    biases: np.ndarray
    drift_sigma: float = 0.1

    def __post_init__(self):
        b = np.asarray(self.biases, dtype=float)
        if not np.all(np.isfinite(b)):
            raise ValueError("biases must be finite")
        if self.drift_sigma < 0:
            raise ValueError("drift_sigma must be >= 0")
        object.__setattr__(self, "biases", b)


@dataclass(frozen=True, eq=False)
class PseudoRangeSet:
    ranges: np.ndarray
    vehicle_id: int = 0
    step: int = 0

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=float)
        if not (np.all(np.isfinite(r)) and np.all(r > 0)):
            raise ValueError("pseudo-ranges must be positive and finite")
        object.__setattr__(self, "ranges", r)


def default_constellation(n_sats: int = 8, seed: int = 0) -> Constellation:
    """Evenly spread azimuths, seeded elevations in [30, 80] degrees."""
    if n_sats < 4:
        raise ValueError(f"need at least 4 satellites, got {n_sats}")
    rng = np.random.default_rng(seed)
    az = 2 * np.pi * np.arange(n_sats) / n_sats + rng.uniform(0, 2 * np.pi / n_sats)
    el = np.radians(rng.uniform(30.0, 80.0, n_sats))
    pos = ORBIT_RADIUS * np.column_stack(
        [np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)]
    )
    return Constellation(pos)


def propagate_common_bias(state: CommonBiasState, dt: float, rng: np.random.Generator) -> CommonBiasState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    step = rng.standard_normal(state.biases.shape) * state.drift_sigma * dt
    return CommonBiasState(state.biases + step, state.drift_sigma)


def geometric_ranges(sats: np.ndarray, pos) -> np.ndarray:
    """Ranges from horizontal positions ``(..., 2)`` at Up = 0 to each satellite."""
    pos = np.asarray(pos, dtype=float)
    d = sats[:, :2] - pos[..., None, :]
    return np.sqrt(np.sum(d * d, axis=-1) + sats[:, 2] ** 2)


def measure_pseudoranges(c: Constellation, vehicle_pos, clock_bias: float, biases: CommonBiasState,
                         noncommon_sigma: float, rng: np.random.Generator,
                         vehicle_id: int = 0, step: int = 0) -> PseudoRangeSet:
    if noncommon_sigma < 0:
        raise ValueError("noncommon_sigma must be >= 0")
    rho = geometric_ranges(c.sat_positions, vehicle_pos)
    noise = rng.standard_normal(c.n_sats) * noncommon_sigma
    return PseudoRangeSet(rho + biases.biases + clock_bias + noise, vehicle_id, step)


def geometry_matrix(sats: np.ndarray, pos=(0.0, 0.0)) -> np.ndarray:
    """Jacobian of pseudo-ranges w.r.t. (east, north, clock): rows ``[-u_E, -u_N, 1]``."""
    d = sats - np.array([pos[0], pos[1], 0.0])
    u = d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.column_stack([-u[:, 0], -u[:, 1], np.ones(len(sats))])


def common_error_map(c: Constellation, pos=(0.0, 0.0)) -> np.ndarray:
    """(2, N_s) map from a bias vector to the horizontal fix error it induces.

    A shared offset on every satellite maps to zero: the clock estimate
    absorbs it.
    """
    return np.linalg.pinv(geometry_matrix(c.sat_positions, pos))[:2]


def raw_fix_batch(z: np.ndarray, sats: np.ndarray, guess: np.ndarray,
                  tol: float = 1e-4, max_iter: int = 20):
    """Gauss-Newton fixes for many receivers at once.

    ``z`` is (n, N_s), ``guess`` is (n, 2). Returns positions (n, 2), clock
    biases (n,), residual norms (n,) and a converged mask (n,).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    pos = np.array(guess, dtype=float).reshape(len(z), 2)
    clk = np.zeros(len(z))
    converged = np.zeros(len(z), dtype=bool)
    failed = np.zeros(len(z), dtype=bool)
    for _ in range(max_iter):
        d = sats[None, :, :2] - pos[:, None, :]
        rho = np.sqrt(np.sum(d * d, axis=-1) + sats[None, :, 2] ** 2)
        resid = z - rho - clk[:, None]
        G = np.empty(z.shape + (3,))
        G[..., 0] = -d[..., 0] / rho
        G[..., 1] = -d[..., 1] / rho
        G[..., 2] = 1.0
        GtG = np.einsum("nsi,nsj->nij", G, G)
        Gtr = np.einsum("nsi,ns->ni", G, resid)
        # a diverged or degenerate receiver keeps its last finite iterate and reports not converged
        ok = ~failed & np.isfinite(GtG).all(axis=(1, 2)) & np.isfinite(Gtr).all(axis=1)
        ok[ok] &= np.linalg.cond(GtG[ok]) < 1e12
        delta = np.linalg.solve(GtG[ok], Gtr[ok][..., None])[..., 0]
        ok[ok] &= np.isfinite(delta).all(axis=1)
        delta = delta[np.isfinite(delta).all(axis=1)]
        failed |= ~ok
        pos[ok] += delta[:, :2]
        clk[ok] += delta[:, 2]
        converged = np.zeros(len(z), dtype=bool)
        converged[ok] = np.linalg.norm(delta[:, :2], axis=1) < tol
        if (converged | failed).all():
            break
    d = sats[None, :, :2] - pos[:, None, :]
    rho = np.sqrt(np.sum(d * d, axis=-1) + sats[None, :, 2] ** 2)
    resid = np.linalg.norm(z - rho - clk[:, None], axis=1)
    return pos, clk, resid, converged


def raw_fix(z: PseudoRangeSet, c: Constellation, initial_guess=(0.0, 0.0)):
    """Least-squares (east, north, clock) fix that ignores common biases."""
    if c.n_sats < 4:
        raise ValueError("a fix needs at least 4 satellites")
    pos, clk, resid, ok = raw_fix_batch(z.ranges[None], c.sat_positions, np.asarray(initial_guess)[None])
    if not ok[0]:
        raise ConvergenceError("raw fix did not converge in 20 iterations", float(resid[0]))
    return pos[0], float(clk[0])
