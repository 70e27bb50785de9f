import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imsnn.dynamics import gaussian_factor
from imsnn.network import (
    ArchitectureError,
    ConvBank,
    DenseBank,
    Network,
    forward_pass,
    init_network,
    isi_trace,
    load_network,
    network_from_dict,
    network_to_dict,
    parse_architecture,
    save_network,
)
from imsnn.oracle import periodic_raster


def _names(spec):
    return [str(layer) for layer in parse_architecture(spec)]


def test_parse_dense():
    assert _names("784-500-10") == ["Dense 784->500", "Output 500->10"]
    assert _names("784-10") == ["Output 784->10"]


def test_parse_conv():
    layers = parse_architecture("784-48c5-8c5-500-10")
    assert [l.kind for l in layers] == ["conv", "conv", "flatten", "dense", "output"]
    assert (layers[0].in_channels, layers[0].out_channels, layers[0].kernel) == (1, 48, 5)
    assert layers[0].out_shape == (48, 24, 24)
    assert layers[1].out_shape == (8, 20, 20)
    assert layers[3].fan_in == 8 * 20 * 20


@pytest.mark.parametrize("spec,index", [
    ("784-abc-10", 1),
    ("784-0-10", 1),
    ("784-10-4c3", 2),  # conv as output
    ("784-100-4c3-10", 2),  # conv after a dense layer
    ("10-2c3-5", 1),  # input is not a square map
    ("16-2c9-5", 1),  # kernel bigger than map
])
def test_parse_errors_name_the_token(spec, index):
    with pytest.raises(ArchitectureError) as info:
        parse_architecture(spec)
    assert info.value.index == index


def test_parse_needs_two_tokens():
    with pytest.raises(ArchitectureError):
        parse_architecture("784")


def test_init_is_deterministic():
    a = init_network("20-7-3", seed=11)
    b = init_network("20-7-3", seed=11)
    c = init_network("20-7-3", seed=12)
    for x, y in zip(a.banks, b.banks):
        assert np.array_equal(x.w, y.w) and np.array_equal(x.mu, y.mu) and np.array_equal(x.sigma, y.sigma)
    assert not np.array_equal(a.banks[0].w, c.banks[0].w)


def test_init_ranges_and_height_std():
    net = init_network("1000-1000-10", seed=3)
    bank = net.banks[0]
    assert bank.mu.min() >= 5 and bank.mu.max() <= 10
    assert bank.sigma.min() >= 10 and bank.sigma.max() <= 50
    assert bank.w.size == 10**6
    assert abs(bank.w.std() - 0.05) < 1e-3
    assert abs(bank.w.mean()) < 1e-3


def test_conv_bank_shapes():
    net = init_network("64-3c3-2c2-5-4", seed=0)
    conv = net.banks[0]
    assert isinstance(conv, ConvBank)
    assert conv.w.shape == (3, 1, 3, 3) and conv.mu.shape == (3, 1)
    assert net.banks[1].w.shape == (2, 3, 2, 2)
    assert net.hidden_sizes == [3 * 36, 2 * 25, 5]


def test_conv_weight_sharing():
    """Changing one kernel's mean moves every tap of that kernel identically."""
    net = init_network("36-2c3-3", seed=1)
    conv = net.banks[0]
    rng = np.random.default_rng(0)
    s = rng.integers(0, 2, size=(1, 1, 6, 6)).astype(np.int8)
    phi = rng.integers(1, 20, size=(1, 1, 6, 6))
    phi[:] = 7  # one ISI everywhere, so every tap sees the same factor
    before = conv.inflow(s, phi)
    g0 = gaussian_factor(7, conv.mu[0, 0], conv.sigma[0, 0])
    conv.mu[0, 0] += 1.5
    after = conv.inflow(s, phi)
    g1 = gaussian_factor(7, conv.mu[0, 0], conv.sigma[0, 0])
    np.testing.assert_allclose(after[:, 0], before[:, 0] * g1 / g0, rtol=1e-12)
    np.testing.assert_array_equal(after[:, 1], before[:, 1])


def test_conv_inflow_matches_direct_loop():
    net = init_network("25-2c3-4", seed=5)
    conv = net.banks[0]
    rng = np.random.default_rng(2)
    s = rng.integers(0, 2, size=(2, 1, 5, 5)).astype(np.int8)
    phi = rng.integers(1, 15, size=(2, 1, 5, 5))
    got = conv.inflow(s, phi)
    want = np.zeros((2, 2, 3, 3))
    for b in range(2):
        for o in range(2):
            for y in range(3):
                for x in range(3):
                    for u in range(3):
                        for v in range(3):
                            p = phi[b, 0, y + u, x + v]
                            want[b, o, y, x] += (s[b, 0, y + u, x + v] * conv.w[o, 0, u, v]
                                                 * gaussian_factor(p, conv.mu[o, 0], conv.sigma[o, 0]))
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_isi_trace_counts_from_start():
    s = np.zeros((1, 8, 1), dtype=np.int8)
    s[0, [2, 5], 0] = 1
    # step 1 -> 1, spike at step 3 resets at step 4
    assert isi_trace(s)[0, :, 0].tolist() == [1, 2, 3, 1, 2, 3, 1, 2]


def test_zero_input_gives_zero_output():
    net = init_network("30-8-4", seed=0)
    fwd = forward_pass(net, np.zeros((25, 30), dtype=np.int8))
    assert np.all(fwd.output == 0)
    assert fwd.spike_counts().sum() == 0


def test_forward_rejects_non_binary():
    net = init_network("4-3-2", seed=0)
    with pytest.raises(ValueError):
        forward_pass(net, np.full((5, 4), 2))
    with pytest.raises(ValueError):
        forward_pass(net, np.zeros((5, 3)))


def test_trace_shapes():
    net = init_network("12-5-3", seed=0)
    rng = np.random.default_rng(0)
    fwd = forward_pass(net, rng.integers(0, 2, size=(4, 9, 12)))
    assert [tr.s.shape for tr in fwd.traces] == [(4, 9, 12), (4, 9, 5), (4, 9, 3)]
    assert fwd.traces[0].v is None and fwd.traces[-1].phi is None
    assert not fwd.traces[-1].s.any()
    assert set(np.unique(fwd.traces[1].s)) <= {0, 1}
    np.testing.assert_array_equal(fwd.output, fwd.traces[-1].v[:, -1])


def test_forward_is_bit_reproducible_and_batch_independent():
    net = init_network("40-16-5", seed=2)
    net.banks[0].w *= 8
    rng = np.random.default_rng(1)
    raster = rng.integers(0, 2, size=(3, 30, 40))
    a = forward_pass(net, raster)
    b = forward_pass(net, raster)
    for x, y in zip(a.traces, b.traces):
        assert np.array_equal(x.s, y.s) and np.array_equal(x.phi, y.phi)
    single = forward_pass(net, raster[1])
    assert np.array_equal(single.traces[1].s[0], a.traces[1].s[1])
    np.testing.assert_array_equal(single.output[0], a.output[1])


def test_hidden_spikes_obey_threshold():
    net = init_network("40-16-5", seed=2)
    net.banks[0].w *= 8
    raster = np.random.default_rng(1).integers(0, 2, size=(2, 40, 40))
    hid = forward_pass(net, raster).traces[1]
    assert hid.s.sum() > 0
    np.testing.assert_array_equal(hid.s.astype(bool), hid.v >= net.theta)


def test_single_neuron_mu_matched_equals_fixed_weight():
    raster = periodic_raster(100, 10)
    out = {}
    for variant, mu in [("snn", 10.0), ("imsnn", 10.0), ("imsnn", 15.0)]:
        specs = parse_architecture("1-1-1")
        net = Network("1-1-1", specs, [DenseBank([[0.6]], [[mu]], [[5.0]]),
                                       DenseBank([[1.0]], [[1.0]], [[1.0]])], variant=variant)
        out[(variant, mu)] = forward_pass(net, raster).traces[1].s[0, :, 0]
    assert np.array_equal(out[("snn", 10.0)], out[("imsnn", 10.0)])
    assert out[("imsnn", 10.0)].sum() > out[("imsnn", 15.0)].sum()


def test_matched_means_reduce_to_fixed_weights():
    """With every mean set to the ISI a periodic input realizes, inflow equals the snn inflow."""
    n_in, period = 6, 7
    raster = np.zeros((60, n_in), dtype=np.int8)
    for i in range(n_in):
        raster[period - 1 + i % 3::period, i] = 1
    net = init_network(f"{n_in}-4-2", seed=4)
    bank = net.banks[0]
    phi = isi_trace(raster[None])[0]
    for t in range(period, 60):  # after the first spike every presynaptic ISI equals the period
        s = raster[t][None]
        bank_m = DenseBank(bank.w, np.full_like(bank.mu, period), bank.sigma)
        got = bank_m.inflow(s, phi[t][None])
        want = bank.inflow(s, phi[t][None], gaussian=False)
        if s.any() and np.all(phi[t][s[0] == 1] == period):
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_event_inflow_matches_dense_formula(seed):
    rng = np.random.default_rng(seed)
    bank = DenseBank(rng.normal(size=(9, 4)), rng.uniform(5, 10, (9, 4)), rng.uniform(10, 50, (9, 4)))
    s = rng.integers(0, 2, size=(3, 9)).astype(np.int8)
    phi = rng.integers(1, 200, size=(3, 9))
    want = np.einsum("bi,bij->bj", s, bank.w * gaussian_factor(phi[:, :, None], bank.mu, bank.sigma))
    np.testing.assert_allclose(bank.inflow(s, phi), want, atol=1e-13)


def test_serialization_round_trip(tmp_path):
    net = init_network("36-2c3-5-3", seed=9, variant="imsnn_c")
    doc = network_to_dict(net)
    assert doc["format_version"] == 1 and doc["architecture"] == "36-2c3-5-3"
    path = tmp_path / "model.json"
    save_network(net, path)
    back = load_network(path)
    assert back.variant == "imsnn_c"
    for x, y in zip(net.banks, back.banks):
        assert type(x) is type(y)
        assert np.array_equal(x.w, y.w) and np.array_equal(x.mu, y.mu) and np.array_equal(x.sigma, y.sigma)


def test_serialization_rejects_unknown_version():
    doc = network_to_dict(init_network("4-2", seed=0))
    doc["format_version"] = 99
    with pytest.raises(ValueError):
        network_from_dict(doc)
