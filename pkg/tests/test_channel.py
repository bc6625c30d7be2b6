"""Channel math: steering vectors, gains, path loss, labels."""

import math

import numpy as np
import pytest

import oracles
from tokenflow.channel import (AntennaConfig, ChannelParams, PropagationPath, array_response,
                               beam_gain_db, build_codebook, link_status, optimal_beam,
                               path_loss_db, rss)


ANT2 = AntennaConfig(q=2)
ANT4 = AntennaConfig(q=4)


def test_boresight_response_is_flat():
    a = array_response(0.0, 0.0, ANT2)
    np.testing.assert_allclose(a, 0.5 * np.ones(4), atol=1e-15)


def test_response_unit_norm_100_random():
    rng = np.random.default_rng(10)
    for _ in range(100):
        ant = AntennaConfig(q=int(rng.integers(1, 9)))
        theta, phi = rng.uniform(-np.pi, np.pi, size=2)
        a = array_response(theta, phi, ant)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12


def test_response_matches_kron_oracle():
    for include_pi in (True, False):
        ant = AntennaConfig(q=4, include_pi=include_pi)
        got = array_response(np.pi / 4, 0.0, ant)
        want = oracles.steering_vector(np.pi / 4, 0.0, 4, include_pi)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_negated_elevation_conjugates_response():
    rng = np.random.default_rng(11)
    for _ in range(20):
        theta, phi = rng.uniform(-1.5, 1.5, size=2)
        a = array_response(theta, phi, ANT4)
        b = array_response(-theta, phi, ANT4)
        np.testing.assert_allclose(b, np.conj(a), atol=1e-12)


def test_matched_beam_zero_db():
    theta, phi = 0.7, -0.3
    f = np.conj(array_response(theta, phi, ANT4))
    assert abs(beam_gain_db(f, theta, phi, ANT4)) < 1e-12


def test_orthogonal_beam_clamps_to_floor():
    # At boresight the response is constant 1/q. The alternating-sign DFT
    # tone is orthogonal to it with exact float cancellation, so the gain
    # clamps to the floor.
    a = array_response(0.0, 0.0, ANT4)
    tone = ((-1.0) ** np.arange(16)).astype(complex) / 4.0
    assert abs(np.vdot(tone, a)) == 0.0
    assert beam_gain_db(np.conj(tone), 0.0, 0.0, ANT4) == -200.0


def test_beam_gain_never_positive():
    rng = np.random.default_rng(12)
    for _ in range(50):
        theta, phi = rng.uniform(-1.5, 1.5, size=2)
        f = np.conj(array_response(*rng.uniform(-1.5, 1.5, size=2), ANT4))
        assert beam_gain_db(f, theta, phi, ANT4) <= 1e-12


def test_mismatched_beam_matches_brute_force():
    theta, phi = 0.3, 0.1
    f = np.conj(array_response(0.0, 0.0, ANT2))
    a = oracles.steering_vector(theta, phi, 2)
    want = 10 * math.log10(abs(np.dot(f, a)))
    assert abs(beam_gain_db(f, theta, phi, ANT2) - want) < 1e-12


def test_path_loss_values():
    p = ChannelParams(p0=60.0, eta=2.0)
    assert path_loss_db(PropagationPath(0, 0, 1.0), p) == 60.0
    assert abs(path_loss_db(PropagationPath(0, 0, 10.0), p) - 80.0) < 1e-12
    p25 = ChannelParams(p0=60.0, eta=2.5)
    assert abs(path_loss_db(PropagationPath(0, 0, 100.0), p25) - 110.0) < 1e-12
    with pytest.raises(ValueError, match="1 m reference"):
        path_loss_db(PropagationPath(0, 0, 0.5), p)


def test_rss_single_and_doubled_path():
    params = ChannelParams(p0=80.0, eta=2.0)
    path = PropagationPath(0.4, 0.2, 1.0)
    f = np.conj(array_response(0.4, 0.2, ANT4))
    s1 = rss([path], f, ANT4, params)
    assert abs(s1 - (-80.0)) < 1e-9
    s2 = rss([path, path], f, ANT4, params)
    assert abs(s2 - 2 * s1) < 1e-9
    with pytest.raises(ValueError, match="no propagation paths"):
        rss([], f, ANT4, params)


def test_rss_monotone_in_path_length():
    params = ChannelParams(p0=60.0, eta=2.2)
    f = np.conj(array_response(0.5, 0.0, ANT4))
    lengths = np.linspace(1.0, 200.0, 40)
    vals = [rss([PropagationPath(0.5, 0.0, l)], f, ANT4, params) for l in lengths]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_blocking_lowers_rss_for_former_best_beam():
    params = ChannelParams(p0=70.0, eta=2.0, power_sum=True)
    los = PropagationPath(0.6, 0.1, 20.0, is_los=True)
    refl = PropagationPath(0.9, 0.1, 28.0, is_los=False)
    f = np.conj(array_response(0.6, 0.1, ANT4))
    assert rss([refl], f, ANT4, params) < rss([los, refl], f, ANT4, params)


def test_codebook_units_and_grid_match():
    cb = build_codebook(ANT4, 16)
    assert cb.shape == (16, 16)
    np.testing.assert_allclose(np.linalg.norm(cb, axis=1), 1.0, atol=1e-12)
    want = oracles.grid_codebook(4, 16, (0.2, 1.35), (-1.2, 1.2))
    np.testing.assert_allclose(cb, want, atol=1e-12)
    # matched filter: the grid codeword hits 0 dB on its own angle pair
    thetas = np.linspace(0.2, 1.35, 4)
    phis = np.linspace(-1.2, 1.2, 4)
    for g, (t, p) in enumerate((t, p) for t in thetas for p in phis):
        assert abs(beam_gain_db(cb[g], t, p, ANT4)) < 1e-12


def test_codebook_nonsquare_and_errors():
    cb = build_codebook(ANT2, 5)
    assert cb.shape == (5, 4)
    np.testing.assert_allclose(np.linalg.norm(cb, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError, match="size"):
        build_codebook(ANT2, 0)


def test_codebook_gram_off_diagonal_below_one():
    cb = build_codebook(ANT4, 16)
    gram = np.abs(cb @ cb.conj().T)
    off = gram - np.diag(np.diag(gram))
    assert off.max() < 1.0 - 1e-9


def test_optimal_beam_aligned_path():
    cb = build_codebook(ANT4, 16)
    thetas = np.linspace(0.2, 1.35, 4)
    phis = np.linspace(-1.2, 1.2, 4)
    target = 1 * 4 + 2  # theta index 1, phi index 2
    paths = [[PropagationPath(thetas[1], phis[2], 15.0)]]
    assert optimal_beam(paths, cb, ANT4, ChannelParams()) == target


def test_optimal_beam_tie_breaks_low():
    ant = AntennaConfig(q=1)  # single element: every beam gain is 0 dB
    cb = build_codebook(ant, 4)
    paths = [[PropagationPath(0.3, 0.0, 5.0)]]
    assert optimal_beam(paths, cb, ant, ChannelParams()) == 0


def test_optimal_beam_shift_invariant_in_p0():
    rng = np.random.default_rng(13)
    cb = build_codebook(ANT4, 16)
    for _ in range(30):
        paths = [[PropagationPath(rng.uniform(0.2, 1.3), rng.uniform(-1.2, 1.2),
                                  rng.uniform(2.0, 80.0))]
                 for _ in range(2)]
        a = optimal_beam(paths, cb, ANT4, ChannelParams(p0=60.0))
        b = optimal_beam(paths, cb, ANT4, ChannelParams(p0=95.0))
        assert a == b


def test_optimal_beam_matches_independent_oracle_100_scenes():
    rng = np.random.default_rng(14)
    params = ChannelParams(p0=65.0, eta=2.1)
    cb = build_codebook(ANT4, 16)
    for _ in range(100):
        vehicles = []
        xis = []
        for _v in range(int(rng.integers(1, 3))):
            n_paths = int(rng.integers(1, 3))
            vehicles.append([PropagationPath(rng.uniform(0.2, 1.3), rng.uniform(-1.2, 1.2),
                                             rng.uniform(1.5, 90.0)) for _ in range(n_paths)])
            xis.append([float(rng.normal(0, 2.0)) for _ in range(n_paths)])
        got = optimal_beam(vehicles, cb, ANT4, params, xi_per_vehicle=xis)
        oracle_vehicles = [[(p.azimuth, p.elevation, p.length, x) for p, x in zip(paths, xi)]
                           for paths, xi in zip(vehicles, xis)]
        want = oracles.best_beam(cb, oracle_vehicles, 65.0, 2.1, True, 4)
        assert got == want


def test_link_status_strict_threshold():
    assert link_status(-47.0, -47.0) == 0
    assert link_status(-40.0, -47.0) == 1
    assert link_status(-50.0, -47.0) == 0
    with pytest.raises(ValueError, match="finite"):
        link_status(float("nan"), -47.0)
