"""Interpenetrating fusion: communication graphs, fusion weights, particle stacking.

Each vehicle's common-error estimate evolves as a weighted average over its
neighbors, ``x_i <- sum_j a_ij x_j``. The coefficients ``a_ij`` are realized
by stacking ``round(N * a_ij)`` particles from each neighbor and resampling
the pool back to ``N`` against the host's road map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geomap import RoadMap
from .gnss import Constellation, geometry_matrix
from .rbpf import ParticleBank, ParticleSet, _road_arrays

log = logging.getLogger(__name__)

QP_MAX_ITER = 500
QP_RTOL = 1e-8


@dataclass(frozen=True)
class CommGraph:
    """Communication graph over vehicles ``0..n-1``.

    Undirected graphs store each edge once as ``(min, max)``. A directed
    graph stores ``(i, j)`` meaning *i receives from j*; its degree counts the
    node itself as well (the row count of a connection matrix with unit
    diagonal).
    """

    n: int
    edges: frozenset
    directed: bool = False

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loops are not allowed")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge {(i, j)} outside 0..{self.n - 1}")
            if not self.directed and i > j:
                raise ValueError("undirected edges must be stored as (min, max)")

    def neighbors(self, i) -> list:
        if self.directed:
            return sorted(j for a, j in self.edges if a == i)
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    @property
    def degree(self) -> np.ndarray:
        d = np.zeros(self.n, dtype=int)
        for a, b in self.edges:
            d[a] += 1
            if not self.directed:
                d[b] += 1
        return d + 1 if self.directed else d

    def mask(self) -> np.ndarray:
        """Boolean support ``(n, n)`` including the diagonal."""
        m = np.eye(self.n, dtype=bool)
        for a, b in self.edges:
            m[a, b] = True
            if not self.directed:
                m[b, a] = True
        return m

    def undirected(self) -> "CommGraph":
        return CommGraph(self.n, frozenset((min(a, b), max(a, b)) for a, b in self.edges))

    def is_connected(self) -> bool:
        m = self.undirected().mask()
        seen = np.zeros(self.n, dtype=bool)
        seen[0] = True
        frontier = seen.copy()
        while frontier.any():
            nxt = m[frontier].any(axis=0) & ~seen
            seen |= nxt
            frontier = nxt
        return bool(seen.all())


def build_graph(positions, comm_range: float, max_neighbors: int = 30) -> CommGraph:
    """Edges between vehicles within ``comm_range``; each node keeps its nearest
    ``max_neighbors`` (ties to the lower index) and edges survive only when
    both ends keep them."""
    if not comm_range > 0:
        raise ValueError("comm_range must be positive")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        cand = [j for j in range(n) if j != i and d[i, j] <= comm_range]
        cand.sort(key=lambda j: (d[i, j], j))
        keep[i, cand[:max_neighbors]] = True
    both = keep & keep.T
    return CommGraph(n, frozenset((i, j) for i, j in zip(*np.nonzero(np.triu(both)))))


def ring_graph(n: int = 4) -> CommGraph:
    """Directed ring where vehicle ``i`` receives from ``i + 1``."""
    return CommGraph(n, frozenset((i, (i + 1) % n) for i in range(n)), directed=True)


@dataclass(frozen=True, eq=False)
class FusionWeights:
    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("fusion weights must be square")
        if np.any(a < -1e-12) or np.any(a > 1 + 1e-12):
            raise ValueError("fusion weights must lie in [0, 1]")
        if not np.allclose(a.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("fusion weight rows must sum to 1")
        object.__setattr__(self, "a", np.clip(a, 0.0, 1.0))

    def respects(self, g: CommGraph) -> bool:
        return not np.any(self.a[~g.mask()] > 0)


def apply_fusion(w: FusionWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("estimates must be finite")
    # x_i + sum_j a_ij (x_j - x_i): equal to a @ x for stochastic rows, and
    # leaves an all-equal vector exactly unchanged despite rounding in the rows
    X = _as_matrix(x)
    diff = X[None, :, :] - X[:, None, :]
    out = X + np.einsum("ij,ijd->id", w.a, diff)
    return out.reshape(x.shape)


def constant_alpha_weights(g: CommGraph, alpha: float) -> FusionWeights:
    """Self weight ``alpha``; the remaining mass split evenly over neighbors."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    a = np.zeros((g.n, g.n))
    for i in range(g.n):
        nb = g.neighbors(i)
        if not nb:
            a[i, i] = 1.0
            continue
        a[i, i] = alpha
        a[i, nb] = (1.0 - alpha) / len(nb)
    return FusionWeights(a)


def max_degree_weights(g: CommGraph) -> FusionWeights:
    """``a_ij = 1 / max(d_i, d_j)`` on edges, remainder on the diagonal."""
    if not g.is_connected():
        log.warning("max-degree weights on a disconnected graph")
    d = g.degree
    a = np.zeros((g.n, g.n))
    for i in range(g.n):
        for j in g.neighbors(i):
            a[i, j] = 1.0 / max(d[i], d[j])
        a[i, i] = 1.0 - a[i].sum()
    return FusionWeights(a)


def metropolis_weights(g: CommGraph) -> FusionWeights:
    """Symmetric ``1 / (1 + max(d_i, d_j))`` weights on the undirected graph.

    Doubly stochastic with a positive diagonal, so repeated application
    converges to the exact network average on any connected graph.
    """
    u = g.undirected()
    d = u.degree
    a = np.zeros((u.n, u.n))
    for i, j in u.edges:
        a[i, j] = a[j, i] = 1.0 / (1.0 + max(d[i], d[j]))
    a[np.diag_indices(u.n)] = 1.0 - a.sum(axis=1)
    return FusionWeights(a)


def random_weights(g: CommGraph, draws) -> FusionWeights:
    """Random point on each row's simplex from positive ``draws`` ``(n, n)``.

    Exponential draws normalized over a support give a uniform (flat
    Dirichlet) point on that support's simplex.
    """
    raw = np.where(g.mask(), np.asarray(draws, dtype=float), 0.0)
    return FusionWeights(raw / raw.sum(axis=1, keepdims=True))


def consensus_mean(x, g: CommGraph, rounds: int | None = None) -> np.ndarray:
    """Each node's estimate of the network mean after local averaging rounds."""
    x = np.asarray(x, dtype=float)
    a = metropolis_weights(g).a
    for _ in range(rounds if rounds is not None else g.n):
        x = a @ x
    return x


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def network_variance(x) -> float:
    x = _as_matrix(x)
    if len(x) == 0:
        raise ValueError("empty estimate vector")
    return float(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))


def mse(x, c_true) -> float:
    x = _as_matrix(x)
    if len(x) == 0:
        raise ValueError("empty estimate vector")
    c = np.broadcast_to(np.asarray(c_true, dtype=float), x.shape[1:])
    return float(np.mean(np.sum((x - c) ** 2, axis=1)))


def fusion_objective(a, x) -> float:
    """Post-fusion network variance of ``a @ x``."""
    return network_variance(np.asarray(a) @ _as_matrix(x))


def optimize_weights_qp(x, g: CommGraph) -> FusionWeights:
    """Row-stochastic weights on ``g`` minimizing post-fusion network variance.

    Projected gradient descent over the row simplices, started from the
    max-degree weights; the returned weights never score worse than that start.
    """
    X = _as_matrix(x)
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite estimates")
    a0 = max_degree_weights(g).a
    best, J = K.pgd_variance(X - X.mean(axis=0), g.mask(), a0, QP_MAX_ITER, QP_RTOL)
    if not math.isfinite(J):
        raise FloatingPointError("fusion objective is not finite")
    return FusionWeights(best)


def asymptotic_rate(w: FusionWeights) -> float:
    """Second-largest eigenvalue modulus: the per-step contraction of disagreement."""
    try:
        ev = np.linalg.eigvals(w.a)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"eigen-decomposition failed: {exc}") from exc
    mods = np.sort(np.abs(ev))[::-1]
    return float(mods[1]) if len(mods) > 1 else 0.0


def quotas_from_row(row: dict, owner, nominal: int) -> dict:
    """Particles taken per source; the rounding remainder goes to the host."""
    q = {j: int(math.floor(nominal * a + 0.5)) for j, a in row.items() if j != owner and a > 0}
    while sum(q.values()) > nominal:
        j = max(q, key=lambda k: q[k])
        q[j] -= 1
    q[owner] = nominal - sum(q.values())
    return q


@dataclass
class FusionResult:
    particles: ParticleSet
    imported: int
    skipped: bool


def stack_and_fuse(host: ParticleSet, neighbor_batches, row: dict, road_map: RoadMap | None,
                   rng: np.random.Generator, constellation: Constellation | None = None,
                   step: int | None = None) -> FusionResult:
    """Fuse neighbor particle batches into ``host``.

    ``neighbor_batches`` is a list of ``(sender_id, ParticleSet)``; ``row``
    maps source vehicle id (including the host) to its fusion coefficient.
    Particles whose provenance already contains the host are discarded.
    When nothing survives, the host set is returned unchanged and
    ``skipped`` is True. With a ``constellation``, imported hypotheses for
    vehicles the sender does not track are placed by shifting the host's
    mean belief along the least-squares bias sensitivity.
    """
    step = host.step if step is None else step
    if not neighbor_batches:
        return FusionResult(host, 0, False)
    sets = [host] + [b for _, b in neighbor_batches]
    n = max(s.touch.shape[1] for s in sets)
    bank = ParticleBank.from_sets(sets, n)
    H = len(sets)
    M = H - 1
    own = row.get(host.owner, 0.0)
    coef = np.zeros((H, M))
    coef[0] = [row.get(sender, 0.0) for sender, _ in neighbor_batches]
    total = own + coef[0].sum()
    if total <= 0:
        raise ValueError("fusion row has no mass")
    coef[0] /= total
    src = np.full((H, M), -1, dtype=np.int64)
    src[0] = np.arange(1, H)
    has = bank.tracked >= 0
    active = np.zeros(H, dtype=bool)
    active[0] = True
    road, kv, use = _road_arrays(road_map)
    shift = (shift_map(constellation.sat_positions) if constellation is not None
             else np.zeros((3, host.n_sats)))
    u = rng.random((H, M + 2))
    nb, nm, nt, imported, starved = K.fuse_all(
        bank.biases, bank.weights, bank.means, bank.covs, bank.tracked, bank.slot_of(), bank.touch,
        bank.owners, src, coef, has, step, host.window, shift, u, road, kv, use, active)
    if imported[0] == 0:
        if starved[0]:
            log.info("fusion skipped for vehicle %d: every batch failed the provenance guard", host.owner)
        return FusionResult(host, 0, bool(starved[0]))
    T = len(host.vehicle_ids)
    out = host.copy()
    out.biases, out.means = nb[0], nm[0][:, :T]
    out.touch = nt[0]
    out.weights = np.full(host.nominal_size, 1.0 / host.nominal_size)
    return FusionResult(out, int(imported[0]), False)


def shift_map(sats) -> np.ndarray:
    """-(G^T G)^-1 G^T: how a bias change moves the least-squares (E, N, clock)."""
    return -np.linalg.pinv(geometry_matrix(np.asarray(sats)))
