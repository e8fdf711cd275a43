import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmmsim.geomap import LaneSegment, RoadMap
from cmmsim.gnss import Constellation, PseudoRangeSet, default_constellation, geometric_ranges
from cmmsim.rbpf import (DegeneracyError, ProcessParams, VehicleBelief, ekf_update, effective_sample_size,
                         estimate, new_particle_set, predict, resample, systematic_resample, weight_and_update)

OVERHEAD = Constellation(np.array([[0.0, 0.0, 20_200_000.0]]))
QUIET = ProcessParams(accel_sigma=0.0, clock_sigma=0.0, clock_drift_sigma=0.0, bias_drift_sigma=0.0)


def belief(mean=(0, 0, 0, 0, 0, 0), cov=None):
    return VehicleBelief(np.array(mean, dtype=float), np.eye(6) if cov is None else cov)


def one_set(biases, mean=(0, 0, 0, 0, 0, 0), cov=None, owner=0, ids=(0,)):
    b = belief(mean, cov)
    return new_particle_set(owner, ids, {v: b for v in ids}, np.atleast_2d(biases))


def test_belief_rejects_bad_covariance():
    with pytest.raises(ValueError):
        VehicleBelief(np.zeros(6), -np.eye(6))
    bad = np.eye(6)
    bad[0, 1] = 1.0
    with pytest.raises(ValueError):
        VehicleBelief(np.zeros(6), bad)
    with pytest.raises(ValueError):
        VehicleBelief(np.full(6, np.nan), np.eye(6))


def test_predict_constant_velocity():
    ps = one_set([[0.0]], mean=(0, 1, 0, 2, 0, 0), cov=np.zeros((6, 6)))
    out = predict(ps, 0.1, QUIET, np.random.default_rng(0))
    np.testing.assert_allclose(out.means[0, 0], [0.1, 1, 0.2, 2, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(out.covs[0], np.zeros((6, 6)))


def test_predict_identity_covariance():
    out = predict(one_set([[0.0]]), 0.1, QUIET, np.random.default_rng(0))
    # oracle: row (1, dt) of the transition against the identity gives 1 + dt^2
    assert out.covs[0][0, 0] == pytest.approx(1.01, abs=1e-12)
    assert out.covs[0][0, 1] == pytest.approx(0.1, abs=1e-12)


def test_predict_matches_matrix_arithmetic():
    rng = np.random.default_rng(3)
    L = rng.normal(size=(6, 6))
    cov = L @ L.T
    mean = rng.normal(size=6)
    params = ProcessParams()
    out = predict(one_set([[0.0]], mean, cov), 0.1, params, np.random.default_rng(0))
    A, Q = params.transition(0.1), params.noise(0.1)
    np.testing.assert_allclose(out.means[0, 0], A @ mean, atol=1e-12)
    np.testing.assert_allclose(out.covs[0], A @ cov @ A.T + Q, atol=1e-10)


def test_predict_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        predict(one_set([[0.0]]), 0.0, QUIET, np.random.default_rng(0))


def test_ekf_zero_innovation_shrinks_covariance():
    c = default_constellation()
    b = belief(cov=np.diag([25.0, 1, 25.0, 1, 100.0, 1]))
    z = PseudoRangeSet(geometric_ranges(c.sat_positions, (0.0, 0.0)))
    post, _ = ekf_update(b, z, c, np.zeros(8), 3.0)
    np.testing.assert_allclose(post.mean, b.mean, atol=1e-9)
    assert np.trace(post.cov) < np.trace(b.cov)


def test_ekf_confident_prior_ignores_measurement():
    c = default_constellation()
    b = belief(mean=(5, 0, -3, 0, 1, 0), cov=np.zeros((6, 6)))
    z = PseudoRangeSet(geometric_ranges(c.sat_positions, (0.0, 0.0)) + 40.0)
    post, _ = ekf_update(b, z, c, np.zeros(8), 3.0)
    np.testing.assert_allclose(post.mean, b.mean, atol=1e-9)


def test_ekf_scalar_kalman_overhead_satellite():
    prior_var, sigma, bias, clock = 4.0, 3.0, 1.5, 2.0
    b = belief(mean=(0, 0, 0, 0, clock, 0), cov=np.diag([1.0, 1, 1, 1, prior_var, 1]))
    z = PseudoRangeSet(np.array([20_200_000.0 + bias + 7.0]))
    post, ll = ekf_update(b, z, OVERHEAD, np.array([bias]), sigma)
    # oracle: scalar Kalman filter on the clock alone
    innov = 7.0 - clock
    gain = prior_var / (prior_var + sigma ** 2)
    assert post.mean[4] == pytest.approx(clock + gain * innov, abs=1e-9)
    assert post.cov[4, 4] == pytest.approx(prior_var * sigma ** 2 / (prior_var + sigma ** 2), abs=1e-9)
    s = prior_var + sigma ** 2
    assert ll == pytest.approx(-0.5 * (innov ** 2 / s + np.log(2 * np.pi * s)), abs=1e-9)
    np.testing.assert_allclose(post.mean[[0, 2]], [0.0, 0.0], atol=1e-9)


def test_ekf_rejects_bad_sigma():
    with pytest.raises(ValueError):
        ekf_update(belief(), PseudoRangeSet(np.array([1.0])), OVERHEAD, np.zeros(1), 0.0)


def test_identical_particles_stay_uniform():
    c = default_constellation()
    ps = one_set(np.zeros((5, 8)), cov=np.eye(6) * 4)
    z = {0: PseudoRangeSet(geometric_ranges(c.sat_positions, (1.0, -2.0)) + 3.0)}
    road = RoadMap((LaneSegment(np.array([[-100.0, 0.0], [100.0, 0.0]])),), 1.0)
    out = weight_and_update(ps, z, road, c, 3.0)
    np.testing.assert_allclose(out.weights, 0.2, atol=1e-12)


def test_off_road_particle_loses_road_factor():
    sigma = 1.0
    road = RoadMap((LaneSegment(np.array([[-100.0, 0.0], [100.0, 0.0]]), 1.75),), sigma)
    cov = np.diag([1e-12, 1.0, 1e-12, 1.0, 1.0, 1.0])
    ps = one_set(np.zeros((2, 1)), cov=cov)
    ps.means[1, 0, 2] = 1.75 + 5 * sigma
    z = {0: PseudoRangeSet(np.array([20_200_000.0]))}
    out = weight_and_update(ps, z, road, OVERHEAD, 3.0)
    # oracle: road kernel exp(-d^2 / 2 sigma^2) at d = 5 sigma; the overhead range
    # cannot tell the two positions apart
    assert out.weights[1] / out.weights[0] == pytest.approx(np.exp(-12.5), rel=1e-6)


def test_missing_vehicle_contributes_nothing():
    c = default_constellation()
    road = RoadMap((LaneSegment(np.array([[-100.0, 0.0], [100.0, 0.0]])),), 1.0)
    ps = one_set(np.zeros((3, 8)), cov=np.eye(6), ids=(0, 1))
    ps.means[:, 1, 2] = [0.0, 20.0, 40.0]
    z = {0: PseudoRangeSet(geometric_ranges(c.sat_positions, (0.0, 0.0)))}
    out = weight_and_update(ps, z, road, c, 3.0)
    np.testing.assert_allclose(out.weights, 1 / 3, atol=1e-12)
    np.testing.assert_array_equal(out.means[:, 1], ps.means[:, 1])


def test_all_zero_weights_signal_degeneracy():
    c = default_constellation()
    ps = one_set(np.zeros((4, 8)))
    ps.weights[:] = 0.0
    z = {0: PseudoRangeSet(geometric_ranges(c.sat_positions, (0.0, 0.0)))}
    with pytest.raises(DegeneracyError) as info:
        weight_and_update(ps, z, None, c, 3.0)
    np.testing.assert_allclose(info.value.recovered.weights, 0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_weights_sum_to_one_after_update_and_resample(seed, P):
    rng = np.random.default_rng(seed)
    c = default_constellation()
    road = RoadMap((LaneSegment(np.array([[-500.0, 0.0], [500.0, 0.0]])),), 1.0)
    ps = one_set(rng.normal(0, 10, (P, 8)), cov=np.eye(6) * 9)
    ps.means[:, 0, [0, 2]] = rng.normal(0, 5, (P, 2))
    z = {0: PseudoRangeSet(geometric_ranges(c.sat_positions, rng.normal(0, 5, 2)) + rng.normal(0, 10, 8))}
    out = weight_and_update(ps, z, road, c, 3.0)
    assert abs(out.weights.sum() - 1) < 1e-9
    out = resample(out, rng)
    assert abs(out.weights.sum() - 1) < 1e-9
    assert out.nominal_size == P


def test_systematic_counts():
    # oracle: positions (0.1 + i) / 4 = .025, .275, .525, .775 against cumsum .5, .75, 1
    idx = systematic_resample([0.5, 0.25, 0.25], 4, 0.1)
    np.testing.assert_array_equal(np.bincount(idx, minlength=3), [2, 1, 1])


def test_resample_uniform_is_identity():
    ps = one_set(np.arange(6.0)[:, None])
    assert effective_sample_size(ps.weights) == pytest.approx(6)
    assert resample(ps, np.random.default_rng(0)) is ps


def test_resample_single_heavy_particle():
    ps = one_set(np.arange(5.0)[:, None])
    ps.weights[:] = [0, 0, 1, 0, 0]
    out = resample(ps, np.random.default_rng(0))
    np.testing.assert_array_equal(out.biases[:, 0], 2.0)
    np.testing.assert_allclose(out.weights, 0.2)


def test_resample_consumes_one_draw_either_way():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    resample(one_set(np.zeros((4, 1))), a)
    heavy = one_set(np.zeros((4, 1)))
    heavy.weights[:] = [1, 0, 0, 0]
    resample(heavy, b)
    assert a.random() == b.random()


def test_estimate_weighted_mean():
    ps = one_set(np.array([[1.0], [2.0], [4.0]]))
    ps.weights[:] = [0.5, 0.3, 0.2]
    assert estimate(ps).biases[0] == pytest.approx(1.9, abs=1e-12)


def test_estimate_two_particles_and_identical_set():
    ps = one_set(np.array([[0.0], [2.0]]))
    assert estimate(ps).biases[0] == pytest.approx(1.0)
    same = one_set(np.full((3, 2), 7.0), mean=(1, 2, 3, 4, 5, 6))
    est = estimate(same)
    np.testing.assert_allclose(est.biases, 7.0)
    np.testing.assert_allclose(est.bias_cov, 0.0, atol=1e-12)
    np.testing.assert_allclose(est.position(0), [1.0, 3.0])
    np.testing.assert_allclose(est.state_covs[0], same.covs[0], atol=1e-12)


def test_filter_matches_kalman_filter_without_road():
    # Rao-Blackwell sanity: identical particles with the true biases reduce to a
    # plain Kalman filter on the state, linearized at the current estimate
    c = default_constellation()
    params = ProcessParams()
    sigma = 3.0
    rng = np.random.default_rng(11)
    cov0 = np.diag([25.0, 4.0, 25.0, 4.0, 100.0, 1.0])
    ps = one_set(np.zeros((4, 8)), cov=cov0)
    mean, cov = np.zeros(6), cov0.copy()
    A, Q = params.transition(0.1), params.noise(0.1)
    truth = np.array([3.0, 1.0, -2.0, 0.5])
    quiet = ProcessParams(accel_sigma=params.accel_sigma, clock_sigma=params.clock_sigma,
                          clock_drift_sigma=params.clock_drift_sigma, bias_drift_sigma=0.0)
    for _ in range(30):
        truth[[0, 2]] += 0.1 * truth[[1, 3]]
        ps = predict(ps, 0.1, quiet, rng)
        mean, cov = A @ mean, A @ cov @ A.T + Q
        z = geometric_ranges(c.sat_positions, truth[[0, 2]]) + rng.normal(0, sigma, 8)
        ps = weight_and_update(ps, {0: PseudoRangeSet(z)}, None, c, sigma)
        # oracle: textbook EKF step
        d = c.sat_positions[:, :2] - mean[[0, 2]]
        r = np.sqrt(np.sum(d * d, axis=1) + c.sat_positions[:, 2] ** 2)
        H = np.zeros((8, 6))
        H[:, 0], H[:, 2], H[:, 4] = -d[:, 0] / r, -d[:, 1] / r, 1.0
        S = H @ cov @ H.T + sigma ** 2 * np.eye(8)
        G = cov @ H.T @ np.linalg.inv(S)
        mean = mean + G @ (z - r - mean[4])
        cov = (np.eye(6) - G @ H) @ cov
        cov = 0.5 * (cov + cov.T)
    np.testing.assert_allclose(ps.means[0, 0], mean, atol=1e-6)
    np.testing.assert_allclose(ps.covs[0], cov, atol=1e-6)
    np.testing.assert_allclose(ps.weights, 0.25, atol=1e-12)
