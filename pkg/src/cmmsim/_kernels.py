"""Compiled inner loops shared by the filter, fusion and scenario layers.

Arrays are laid out host-major so a whole network of per-vehicle filters can
be advanced in one call:

    biases  (H, P, S)      bias hypotheses per host filter
    weights (H, P)
    means   (H, P, T, 6)   conditional vehicle-state means, one slot per tracked vehicle
    covs    (H, T, 6, 6)   conditional covariances, shared by the particles of a host
    tracked (H, T)         vehicle index per slot, -1 when the slot is empty
    touch   (H, P, n)      last step at which each vehicle contributed to a particle

All randomness is drawn by the caller and passed in.
"""

import numpy as np
from numba import njit

NEVER = -(1 << 40)
# reassociation and contraction only; inf and nan keep their IEEE meaning
FAST = {"reassoc", "contract", "arcp", "nsz"}


@njit(cache=True)
def corridor_distance(px, py, a, b, hw):
    best = np.inf
    for k in range(a.shape[0]):
        abx = b[k, 0] - a[k, 0]
        aby = b[k, 1] - a[k, 1]
        t = ((px - a[k, 0]) * abx + (py - a[k, 1]) * aby) / (abx * abx + aby * aby)
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        dx = px - (a[k, 0] + t * abx)
        dy = py - (a[k, 1] + t * aby)
        d = np.sqrt(dx * dx + dy * dy) - hw[k]
        if d < best:
            best = d
            if best <= 0.0:
                return 0.0
    return best


@njit(cache=True, fastmath=FAST)
def road_distances(xs, ys, road, out):
    """Exterior corridor distances of many points through the cell index built
    by ``geomap.road_index``.

    Pieces within ``reach`` of a query are always listed in its cell, so a
    listed minimum at or below ``reach`` is exact; otherwise fall back to a
    full scan. Batched because each compiled call with array arguments has a
    fixed cost far above the geometry itself.
    """
    a, b, hw, lo, cell, reach, nx, ny, start, items = road
    for i in range(xs.shape[0]):
        px = xs[i]
        py = ys[i]
        ix = int(np.floor((px - lo[0]) / cell))
        iy = int(np.floor((py - lo[1]) / cell))
        if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
            out[i] = corridor_distance(px, py, a, b, hw)
            continue
        c = iy * nx + ix
        best = np.inf
        for m in range(start[c], start[c + 1]):
            k = items[m]
            abx = b[k, 0] - a[k, 0]
            aby = b[k, 1] - a[k, 1]
            t = ((px - a[k, 0]) * abx + (py - a[k, 1]) * aby) / (abx * abx + aby * aby)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = px - (a[k, 0] + t * abx)
            dy = py - (a[k, 1] + t * aby)
            d = np.sqrt(dx * dx + dy * dy) - hw[k]
            if d < best:
                best = d
        if best > reach:
            best = corridor_distance(px, py, a, b, hw)
        out[i] = best if best > 0.0 else 0.0


@njit(cache=True)
def road_distance(px, py, road):
    out = np.empty(1)
    road_distances(np.array([px]), np.array([py]), road, out)
    return out[0]


@njit(cache=True)
def _max_pos_eig(c):
    # largest eigenvalue of the (x, y) block of a 6x6 state covariance
    p, q, r = c[0, 0], c[0, 2], c[2, 2]
    m = 0.5 * (p + r)
    return m + np.sqrt(0.25 * (p - r) ** 2 + q * q)


@njit(cache=True, fastmath=FAST)
def _normalize_log(logw, w):
    # returns True when no particle carries finite weight
    mx = -np.inf
    for k in range(logw.shape[0]):
        if logw[k] > mx:
            mx = logw[k]
    if not np.isfinite(mx):
        for k in range(w.shape[0]):
            w[k] = 1.0 / w.shape[0]
        return True
    tot = 0.0
    for k in range(logw.shape[0]):
        w[k] = np.exp(logw[k] - mx)
        tot += w[k]
    for k in range(w.shape[0]):
        w[k] /= tot
    return False


@njit(cache=True, fastmath=FAST)
def predict_all(biases, means, covs, tracked, jitter, A, Q):
    H, P, T = means.shape[0], means.shape[1], means.shape[2]
    biases += jitter
    tmp = np.empty(6)
    AC = np.empty((6, 6))
    for h in range(H):
        for t in range(T):
            if tracked[h, t] < 0:
                continue
            for k in range(P):
                for i in range(6):
                    acc = 0.0
                    for j in range(6):
                        acc += A[i, j] * means[h, k, t, j]
                    tmp[i] = acc
                for i in range(6):
                    means[h, k, t, i] = tmp[i]
            C = covs[h, t]
            for i in range(6):
                for j in range(6):
                    acc = 0.0
                    for l in range(6):
                        acc += A[i, l] * C[l, j]
                    AC[i, j] = acc
            for i in range(6):
                for j in range(i + 1):
                    acc = 0.0
                    for l in range(6):
                        acc += AC[i, l] * A[j, l]
                    acc += 0.5 * (Q[i, j] + Q[j, i])
                    C[i, j] = acc
                    C[j, i] = acc


@njit(cache=True, fastmath=FAST)
def _cholesky_inverse(A, L, Linv):
    """Lower Cholesky factor of SPD ``A`` and its inverse, written into ``L`` and ``Linv``."""
    n = A.shape[0]
    for j in range(n):
        acc = A[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0:
            raise np.linalg.LinAlgError("innovation covariance is not positive definite")
        L[j, j] = np.sqrt(acc)
        for i in range(j + 1, n):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    for j in range(n):
        for i in range(n):
            Linv[i, j] = 0.0
        Linv[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            acc = 0.0
            for k in range(j, i):
                acc -= L[i, k] * Linv[k, j]
            Linv[i, j] = acc / L[i, i]


@njit(cache=True, fastmath=FAST)
def update_all(biases, weights, means, covs, tracked, has_meas, Z, sats, sigma2,
               road, kernel_var, use_road):
    """Measurement update, road weighting and renormalization for every host.

    Per tracked vehicle the range model is linearized once at the
    particle-weighted mean position; particle innovations use that linear
    model (the satellites are ~2e7 m away, so the curvature term over the
    particle spread is ~1e-5 m). Returns a boolean array flagging hosts whose
    weights degenerated (reset to uniform).
    """
    H, P, T = means.shape[0], means.shape[1], means.shape[2]
    S = sats.shape[0]
    degenerate = np.zeros(H, dtype=np.bool_)
    logw = np.empty(P)
    Hm = np.zeros((S, 6))
    CHt = np.empty((6, S))
    Sm = np.empty((S, S))
    Lc = np.empty((S, S))
    Linv = np.empty((S, S))
    G = np.empty((6, S))
    r0 = np.empty(S)
    nu = np.empty(S)
    wv = np.empty(S)
    xs = np.empty(P)
    ys = np.empty(P)
    dist = np.empty(P)
    for h in range(H):
        for k in range(P):
            logw[k] = np.log(weights[h, k]) if weights[h, k] > 0 else -np.inf
        for t in range(T):
            v = tracked[h, t]
            if v < 0 or not has_meas[h, t]:
                continue
            mx = 0.0
            my = 0.0
            for k in range(P):
                mx += weights[h, k] * means[h, k, t, 0]
                my += weights[h, k] * means[h, k, t, 2]
            for s in range(S):
                dx = sats[s, 0] - mx
                dy = sats[s, 1] - my
                r0[s] = np.sqrt(dx * dx + dy * dy + sats[s, 2] ** 2)
                Hm[s, 0] = -dx / r0[s]
                Hm[s, 2] = -dy / r0[s]
                Hm[s, 4] = 1.0
            # covariance step in explicit loops (Jacobian columns 0, 2, 4 only)
            C = covs[h, t]
            for i in range(6):
                for s in range(S):
                    CHt[i, s] = C[i, 0] * Hm[s, 0] + C[i, 2] * Hm[s, 2] + C[i, 4]
            for s in range(S):
                for r in range(S):
                    Sm[s, r] = Hm[s, 0] * CHt[0, r] + Hm[s, 2] * CHt[2, r] + CHt[4, r]
                Sm[s, s] += sigma2
            # whitening: S = L L^T, innovations enter as L^-1 nu
            _cholesky_inverse(Sm, Lc, Linv)
            for i in range(6):
                for s in range(S):
                    acc = 0.0
                    for r in range(s + 1):
                        acc += CHt[i, r] * Linv[s, r]
                    G[i, s] = acc
            # C - K S K^T = C - G G^T
            for i in range(6):
                for j in range(i + 1):
                    acc = 0.0
                    for s in range(S):
                        acc += G[i, s] * G[j, s]
                    c = 0.5 * (C[i, j] + C[j, i]) - acc
                    C[i, j] = c
                    C[j, i] = c
            for k in range(P):
                ddx = means[h, k, t, 0] - mx
                ddy = means[h, k, t, 2] - my
                b = means[h, k, t, 4]
                for s in range(S):
                    nu[s] = Z[v, s] - r0[s] - Hm[s, 0] * ddx - Hm[s, 2] * ddy - biases[h, k, s] - b
                q = 0.0
                for s in range(S):
                    acc = 0.0
                    for r in range(s + 1):
                        acc += Linv[s, r] * nu[r]
                    wv[s] = acc
                    q += acc * acc
                logw[k] -= 0.5 * q
                for i in range(6):
                    acc = 0.0
                    for s in range(S):
                        acc += G[i, s] * wv[s]
                    means[h, k, t, i] += acc
            if use_road:
                var = kernel_var + _max_pos_eig(covs[h, t])
                for k in range(P):
                    xs[k] = means[h, k, t, 0]
                    ys[k] = means[h, k, t, 2]
                road_distances(xs, ys, road, dist)
                for k in range(P):
                    logw[k] -= dist[k] * dist[k] / (2.0 * var)
        degenerate[h] = _normalize_log(logw, weights[h])
    return degenerate


@njit(cache=True, fastmath=FAST)
def systematic_indices(w, n_out, u):
    """Systematic resampling: positions ``(u + i) / n_out`` against the CDF."""
    idx = np.empty(n_out, dtype=np.int64)
    n = w.shape[0]
    total = 0.0
    for k in range(n):
        total += w[k]
    j = 0
    c = w[0] / total
    for i in range(n_out):
        pos = (u + i) / n_out
        while pos >= c and j < n - 1:
            j += 1
            c += w[j] / total
        idx[i] = j
    return idx


@njit(cache=True, fastmath=FAST)
def resample_all(biases, weights, means, touch, u, threshold):
    """ESS-gated systematic resampling in place; returns per-host flags."""
    H, P = weights.shape
    done = np.zeros(H, dtype=np.bool_)
    for h in range(H):
        ss = 0.0
        for k in range(P):
            ss += weights[h, k] ** 2
        if 1.0 / ss >= threshold * P:
            continue
        idx = systematic_indices(weights[h], P, u[h])
        biases[h] = biases[h][idx].copy()
        means[h] = means[h][idx].copy()
        touch[h] = touch[h][idx].copy()
        weights[h, :] = 1.0 / P
        done[h] = True
    return done


@njit(cache=True, fastmath=FAST)
def fuse_all(biases, weights, means, covs, tracked, slot_of, touch, host_vehicle,
             src, coef, has_meas, step, window, shift, u, road, kernel_var, use_road, active):
    """Stack neighbor particles into each host and resample to nominal size.

    ``src`` (H, M) lists the source hosts of each host (-1 pads) and ``coef``
    (H, M) their fusion coefficients; a zero coefficient means nothing is
    taken (undelivered or unweighted). Inputs are read as an immutable
    snapshot; fused arrays are returned, and hosts with ``active[h]`` False
    are copied through. Also returns the number of particles imported per
    host (zero means the host passed through unchanged) and a flag for hosts
    whose every offered batch was rejected by the provenance guard.
    Uniforms: ``u[h, 0]`` own sample, ``u[h, 1 + m]`` batch ``m``,
    ``u[h, M + 1]`` final resample.
    """
    H, P, T = means.shape[0], means.shape[1], means.shape[2]
    S = biases.shape[2]
    M = src.shape[1]
    n = touch.shape[2]
    nb = np.empty_like(biases)
    nm = np.empty_like(means)
    nt = np.empty_like(touch)
    imported = np.zeros(H, dtype=np.int64)
    starved = np.zeros(H, dtype=np.bool_)
    pool_b = np.empty((P, S))
    pool_m = np.empty((P, T, 6))
    pool_t = np.empty((P, n), dtype=touch.dtype)
    logw = np.empty(P)
    pw = np.empty(P)
    xs = np.empty(P)
    ys = np.empty(P)
    dist = np.empty(P)
    hmean = np.empty((T, 6))
    cbar = np.empty(S)
    quotas = np.zeros(M, dtype=np.int64)
    for h in range(H):
        if not active[h]:
            nb[h] = biases[h]
            nm[h] = means[h]
            nt[h] = touch[h]
            continue
        hv = host_vehicle[h]
        offered = 0
        for m in range(M):
            quotas[m] = 0
            j = src[h, m]
            if j < 0 or coef[h, m] <= 0.0:
                continue
            offered += 1
            ok = False
            for k in range(P):
                if touch[j, k, hv] <= step - window:
                    ok = True
                    break
            if ok:
                quotas[m] = np.int64(np.floor(P * coef[h, m] + 0.5))
        total = 0
        for m in range(M):
            total += quotas[m]
        while total > P:
            mm = 0
            for m in range(M):
                if quotas[m] > quotas[mm]:
                    mm = m
            quotas[mm] -= 1
            total -= 1
        if total == 0:
            # nothing to stack: the host set passes through untouched
            starved[h] = offered > 0
            nb[h] = biases[h]
            nm[h] = means[h]
            nt[h] = touch[h]
            continue
        q_own = P - total
        imported[h] = total
        # host reference for importing hypotheses it does not itself track
        cbar[:] = 0.0
        hmean[:, :] = 0.0
        for k in range(P):
            w = weights[h, k]
            for s in range(S):
                cbar[s] += w * biases[h, k, s]
            for t in range(T):
                for i in range(6):
                    hmean[t, i] += w * means[h, k, t, i]
        pos = 0
        if q_own > 0:
            idx = systematic_indices(weights[h], q_own, u[h, 0])
            for r in range(q_own):
                k = idx[r]
                for s in range(S):
                    pool_b[pos, s] = biases[h, k, s]
                for t in range(T):
                    for i in range(6):
                        pool_m[pos, t, i] = means[h, k, t, i]
                for v in range(n):
                    pool_t[pos, v] = touch[h, k, v]
                pos += 1
        for m in range(M):
            q = quotas[m]
            if q == 0:
                continue
            j = src[h, m]
            for k in range(P):
                pw[k] = weights[j, k] if touch[j, k, hv] <= step - window else 0.0
            idx = systematic_indices(pw, q, u[h, 1 + m])
            for r in range(q):
                k = idx[r]
                for s in range(S):
                    pool_b[pos, s] = biases[j, k, s]
                for v in range(n):
                    pool_t[pos, v] = touch[j, k, v]
                pool_t[pos, hv] = step
                for t in range(T):
                    v = tracked[h, t]
                    if v < 0:
                        for i in range(6):
                            pool_m[pos, t, i] = hmean[t, i]
                        continue
                    js = slot_of[j, v]
                    if js >= 0:
                        for i in range(6):
                            pool_m[pos, t, i] = means[j, k, js, i]
                    else:
                        for i in range(6):
                            pool_m[pos, t, i] = hmean[t, i]
                        for s in range(S):
                            dc = biases[j, k, s] - cbar[s]
                            pool_m[pos, t, 0] += shift[0, s] * dc
                            pool_m[pos, t, 2] += shift[1, s] * dc
                            pool_m[pos, t, 4] += shift[2, s] * dc
                pos += 1
        for k in range(P):
            logw[k] = 0.0
        if use_road:
            for t in range(T):
                if tracked[h, t] < 0 or not has_meas[h, t]:
                    continue
                var = kernel_var + _max_pos_eig(covs[h, t])
                for k in range(P):
                    xs[k] = pool_m[k, t, 0]
                    ys[k] = pool_m[k, t, 2]
                road_distances(xs, ys, road, dist)
                for k in range(P):
                    logw[k] -= dist[k] * dist[k] / (2.0 * var)
        _normalize_log(logw, pw)
        idx = systematic_indices(pw, P, u[h, M + 1])
        for r in range(P):
            k = idx[r]
            for s in range(S):
                nb[h, r, s] = pool_b[k, s]
            for t in range(T):
                for i in range(6):
                    nm[h, r, t, i] = pool_m[k, t, i]
            for v in range(n):
                nt[h, r, v] = pool_t[k, v]
    return nb, nm, nt, imported, starved


@njit(cache=True, fastmath=FAST)
def _variance_residuals(A, X, Y, m):
    # Y = A X centered on its mean m; returns the post-fusion variance
    N, D = X.shape
    for d in range(D):
        m[d] = 0.0
    for i in range(N):
        for d in range(D):
            acc = 0.0
            for j in range(N):
                acc += A[i, j] * X[j, d]
            Y[i, d] = acc
            m[d] += acc
    for d in range(D):
        m[d] /= N
    J = 0.0
    for i in range(N):
        for d in range(D):
            Y[i, d] -= m[d]
            J += Y[i, d] * Y[i, d]
    return J / N


@njit(cache=True, fastmath=FAST)
def pgd_variance(X, mask, A0, max_iter, rtol):
    """Projected gradient on row simplices for min (1/N) sum ||(AX)_i - mean||^2.

    ``X`` must be centered. Entries outside ``mask`` stay zero. Step 1/L with
    L = (2/N) lambda_max(X^T X). Returns the best iterate seen, so the result
    never scores worse than ``A0``.
    """
    N, D = X.shape
    L = 2.0 / N * np.linalg.eigvalsh(X.T @ X)[-1]
    A = A0.copy()
    Y = np.empty((N, D))
    m = np.empty(D)
    J = _variance_residuals(A, X, Y, m)
    best = A.copy()
    best_J = J
    if L <= 0.0 or J <= 0.0:
        return best, best_J
    step = 1.0 / L
    srt = np.empty(N)
    for _ in range(max_iter):
        for i in range(N):
            # gradient step on the row, kept sorted (descending) for the projection
            c = 0
            for j in range(N):
                if mask[i, j]:
                    g = 0.0
                    for d in range(D):
                        g += Y[i, d] * X[j, d]
                    val = A[i, j] - step * (2.0 / N) * g
                    A[i, j] = val
                    pos = c
                    while pos > 0 and srt[pos - 1] < val:
                        srt[pos] = srt[pos - 1]
                        pos -= 1
                    srt[pos] = val
                    c += 1
            css = 0.0
            theta = 0.0
            for r in range(c):
                css += srt[r]
                t = (css - 1.0) / (r + 1)
                if srt[r] - t > 0:
                    theta = t
            for j in range(N):
                A[i, j] = max(A[i, j] - theta, 0.0) if mask[i, j] else 0.0
        J_new = _variance_residuals(A, X, Y, m)
        if J_new < best_J:
            best_J = J_new
            best[:, :] = A
        if abs(J - J_new) <= rtol * max(abs(J), 1e-300):
            break
        J = J_new
    return best, best_J
