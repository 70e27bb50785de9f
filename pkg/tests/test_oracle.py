import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import random_instance
from imsnn.backprop import SuppressionMode, backward
from imsnn.network import forward_pass, init_network
from imsnn.oracle import (
    OracleSizeError,
    conventional_backward,
    demo_single_neuron,
    direct_sum_backward,
    expand_bank,
    fd_check_last_layer,
)

MODES = list(SuppressionMode)


def assert_engine_matches_oracle(net, fwd, seed_grad, mode, atol=1e-12, **kw):
    eng = backward(net, fwd, seed_grad, mode)
    ora = direct_sum_backward(net, fwd, seed_grad[0], mode, **kw)
    for a, b in zip(eng.grads, ora.grads):
        np.testing.assert_allclose(a, b, rtol=0, atol=atol)
    for li in range(1, len(fwd.traces) - 1):
        np.testing.assert_allclose(eng.eps[li], ora.eps[li], rtol=0, atol=atol)
        np.testing.assert_allclose(eng.grad_phi[li], ora.grad_phi[li], rtol=0, atol=atol)
    return eng


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(MODES))
def test_engine_equals_direct_sums(seed, mode):
    net, _, fwd, sg = random_instance(seed)
    assert_engine_matches_oracle(net, fwd, sg, mode)


@pytest.mark.parametrize("mode", MODES)
def test_engine_equals_direct_sums_conv(mode):
    net, _, fwd, sg = random_instance(0, arch="64-2c3-3", T=12)
    eng = assert_engine_matches_oracle(net, fwd, sg, mode, max_neurons=200)
    assert eng.spiking_sites > 0


def test_snn_variant_matches_conventional_reference():
    for seed in range(5):
        net, raster, _, sg = random_instance(seed, variant="snn")
        fwd = forward_pass(net, raster, "snn")
        eng = backward(net, fwd, sg, "none").grads
        for a, b in zip(eng, conventional_backward(net, fwd, sg[0])):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_zero_seed_oracle():
    net, _, fwd, sg = random_instance(1)
    ora = direct_sum_backward(net, fwd, np.zeros_like(sg[0]))
    assert all(not g.any() for g in ora.grads)


def test_size_guard():
    net = init_network("40-20-5", seed=0)
    fwd = forward_pass(net, np.zeros((10, 40), dtype=np.int8))
    with pytest.raises(OracleSizeError):
        direct_sum_backward(net, fwd, np.zeros(5))
    net = init_network("4-3-2", seed=0)
    fwd = forward_pass(net, np.zeros((30, 4), dtype=np.int8))
    with pytest.raises(OracleSizeError):
        direct_sum_backward(net, fwd, np.zeros(2))


def test_expand_conv_bank_shares_parameters():
    net = init_network("16-2c3-3", seed=0)
    W, MU, SIG, mask, param = expand_bank(net.banks[0])
    assert W.shape == (16, 2 * 2 * 2)
    assert mask.sum() == 2 * 4 * 9
    # output channel 1, position (0,0) reads input pixel (1,1) through tap (1,1)
    h, j = 4, 5
    assert W[j, h] == net.banks[0].w[1, 0, 1, 1]
    assert MU[j, h] == net.banks[0].mu[1, 0] and SIG[j, h] == net.banks[0].sigma[1, 0]


def _fd_net(seed):
    net = init_network("10-5-3", seed=seed)
    rng = np.random.default_rng(seed)
    net.banks[0].w[...] = rng.normal(0.4, 0.5, size=(10, 5))
    net.banks[1].w[...] = np.abs(rng.normal(0.3, 0.2, size=(5, 3)))
    raster = (rng.random((20, 10)) < 0.4).astype(np.int8)
    return net, raster, int(rng.integers(0, 3))


def test_fd_check_passes():
    net, raster, label = _fd_net(0)
    rep = fd_check_last_layer(net, raster, label, step=1e-6, n_coords=50)
    assert rep.valid and rep.ok
    assert len(rep.coords) == 15  # all coordinates when fewer than requested
    assert rep.max_rel_err < 1e-6
    doc = json.loads(rep.to_json())
    assert doc["tolerance"] == 1e-6 and len(doc["rel_err"]) == 15


def test_fd_zero_trace_coordinate():
    net, raster, label = _fd_net(1)
    # hidden neuron 0 silenced by zeroing its incoming heights
    net.banks[0].w[:, 0] = 0.0
    rep = fd_check_last_layer(net, raster, label, n_coords=15)
    for idx, a, n in zip(rep.coords, rep.analytic, rep.numeric):
        if idx[0] == 0:
            assert a == 0.0 and n == 0.0


def test_fd_coarse_step_is_flagged():
    net, raster, label = _fd_net(2)
    rep = fd_check_last_layer(net, raster, label, step=1e-2)
    assert rep.truncation_dominated
    fine = fd_check_last_layer(net, raster, label, step=1e-6)
    assert not fine.truncation_dominated


def test_fd_step_bounds():
    net, raster, label = _fd_net(0)
    with pytest.raises(ValueError):
        fd_check_last_layer(net, raster, label, step=1.0)


def test_demo(tmp_path):
    res = demo_single_neuron()
    assert res.verdict
    conv, matched, shifted = res.rasters.values()
    assert np.array_equal(conv, matched)
    assert res.counts["gaussian_mu10"] > res.counts["gaussian_mu15"]
    assert res.inflow_per_spike["gaussian_mu15"] == pytest.approx(0.6 * np.exp(-0.5), abs=1e-12)
    path = tmp_path / "demo.csv"
    res.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "network,timestep,neuron,spike"
    assert len(lines) == 1 + sum(res.counts.values())
