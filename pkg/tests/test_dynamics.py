import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imsnn.dynamics import (
    DegenerateOutputError,
    GaussianSynapse,
    isi_update,
    membrane_step,
    output_probabilities,
    synapse_weight,
)


@pytest.mark.parametrize("phi,s,expected", [(0, 0, 1), (3, 0, 4), (7, 1, 1)])
def test_isi_update(phi, s, expected):
    assert isi_update(phi, s) == expected


@given(st.integers(0, 10_000), st.integers(0, 500))
def test_isi_spike_free_run_adds_length(phi0, k):
    phi = phi0
    for _ in range(k):
        phi = isi_update(phi, 0)
    assert phi == phi0 + k


def test_synapse_weight_examples():
    assert synapse_weight(0.6, 10, 5, 10) == 0.6
    # 0.6 * exp(-0.5)
    assert synapse_weight(0.6, 10, 5, 15) == pytest.approx(0.363918395827580, abs=1e-12)
    assert synapse_weight(0.0, 3.0, 2.0, 40) == 0.0


@given(st.floats(-5, 5), st.floats(1, 20), st.floats(0.5, 60))
def test_weight_never_exceeds_height(w, mu, sigma):
    phi = np.arange(1, 201)
    theta = synapse_weight(w, mu, sigma, phi)
    assert np.all(np.abs(theta) <= abs(w))
    assert np.all(np.sign(theta[theta != 0]) == np.sign(w))
    if w != 0:
        full = np.abs(theta) == abs(w)
        # equality exactly where the ISI sits on the mean (up to rounding of exp)
        assert np.all(np.abs(phi[full] - mu) < 1e-6 * sigma + 1e-7 * sigma * 1e3)


def test_equality_iff_phi_equals_mu():
    theta = synapse_weight(0.8, 12.0, 7.0, np.arange(1, 201))
    assert np.flatnonzero(theta == 0.8).tolist() == [11]


def test_gaussian_synapse_validates_width():
    with pytest.raises(ValueError):
        GaussianSynapse(0.1, 5.0, 0.0)
    syn = GaussianSynapse(0.6, 10.0, 5.0)
    assert syn.weight(10) == 0.6


@pytest.mark.parametrize("v,inflow,expected", [
    (0.5, 0.2, (0.695, 0)),
    (0.9, 0.2, (0.0, 1)),
    (0.0, 0.0, (0.0, 0)),
])
def test_membrane_step(v, inflow, expected):
    v_next, s = membrane_step(v, 0.99, inflow, 1.0)
    assert s == expected[1]
    assert v_next == pytest.approx(expected[0], abs=1e-12)


def test_threshold_is_inclusive():
    assert membrane_step(0.0, 0.99, 1.0, 1.0) == (0.0, 1)


@given(st.floats(-3, 3), st.floats(0.01, 1.0), st.floats(-3, 3))
def test_no_suprathreshold_potential_without_spike(v, beta, inflow):
    v_next, s = membrane_step(v, beta, inflow, 1.0)
    assert not (v_next >= 1.0 and s == 0)
    if s:
        assert v_next == 0.0


def test_output_mode_never_spikes():
    v = np.array([0.5, 3.0, -2.0])
    v_next, s = membrane_step(v, 0.99, np.array([2.0, 2.0, 0.1]), 1.0, spiking=False)
    assert not s.any()
    np.testing.assert_allclose(v_next, 0.99 * v + [2.0, 2.0, 0.1])


def test_output_probabilities_examples():
    np.testing.assert_allclose(output_probabilities([2, 1, 1]), [0.5, 0.25, 0.25])
    np.testing.assert_allclose(output_probabilities([0.3] * 7), np.full(7, 1 / 7))
    np.testing.assert_allclose(output_probabilities([1e-30, 1e-30]), [0.5, 0.5])


def test_output_probabilities_degenerate():
    with pytest.raises(DegenerateOutputError):
        output_probabilities([0.0, -1.0, -3.0])


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=20))
def test_output_probabilities_sum_to_one(v):
    assert math.fsum(output_probabilities(v)) == pytest.approx(1.0, abs=1e-12)
