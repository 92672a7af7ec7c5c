"""Gated-net checks: forward oracle, Jacobian, init, checkpoint round-trip."""

import numpy as np
import pytest

from tvdnn import network, tape
from tvdnn.network import ConfigError, NetParams, NetSpec
from tvdnn.tape import Tape


def reference_forward(p, y):
    """Straight-line transcription of the layer recurrence."""
    z1 = np.tanh(p.W0 @ y + p.b0)
    z2 = np.tanh(p.W1 @ z1 + p.b1)
    z3 = z2 * np.tanh(p.W2 @ y + p.b2)
    z4 = np.tanh(p.W3 @ z3 + p.b3)
    z5 = z4 * np.tanh(p.W4 @ y + p.b4)
    return p.W5 @ z5 + p.b5


def zero_params(spec):
    return network.unpack(np.zeros(network.n_params(spec)), spec)


def test_all_zero_params_give_zero_output():
    p = zero_params(NetSpec(2, 6, 3))
    y = np.array([[0.3, -1.0], [2.0, 0.1]])
    np.testing.assert_array_equal(network.forward(p, y), np.zeros((3, 2)))


def test_output_bias_dominates_when_w5_zero():
    spec = NetSpec(1, 4, 1)
    p = network.init_params(spec, 3)
    p = NetParams(**{**{n: getattr(p, n) for n in
                        ("W0", "b0", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")},
                     "W5": np.zeros((1, 4)), "b5": np.array([[2.5]])})
    y = np.linspace(-1, 1, 7)[None, :]
    np.testing.assert_array_equal(network.forward(p, y), np.full((1, 7), 2.5))


def test_forward_matches_independent_transcription():
    rng = np.random.default_rng(99)
    for spec in (NetSpec(1, 10, 1), NetSpec(3, 50, 3), NetSpec(6, 50, 3)):
        p = network.init_params(spec, 11)
        y = rng.normal(size=(spec.n_in, 17))
        got = network.forward(p, y)
        np.testing.assert_allclose(got, reference_forward(p, y), rtol=1e-12, atol=1e-14)


def test_forward_rejects_wrong_input_width():
    p = network.init_params(NetSpec(2, 4, 1), 0)
    with pytest.raises(ConfigError):
        network.forward(p, np.zeros((3, 5)))


def test_init_xavier_bounds_and_zero_biases():
    spec = NetSpec(3, 50, 3)
    p = network.init_params(spec, 7)
    assert np.abs(p.W0).max() <= np.sqrt(6.0 / (3 + 50))
    assert np.abs(p.W1).max() <= np.sqrt(6.0 / (50 + 50))
    assert np.abs(p.W5).max() <= np.sqrt(6.0 / (50 + 3))
    for name in ("b0", "b1", "b2", "b3", "b4", "b5"):
        assert not np.any(getattr(p, name))


def test_init_zero_output_variant():
    p = network.init_params(NetSpec(1, 10, 1, init="xavier_zero_output"), 5)
    np.testing.assert_array_equal(p.W5, np.zeros((1, 10)))
    np.testing.assert_array_equal(p.b5, np.zeros((1, 1)))
    assert np.any(p.W0)


def test_init_deterministic():
    spec = NetSpec(2, 8, 2)
    a = network.init_params(spec, 123)
    b = network.init_params(spec, 123)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


def test_jacobian_zero_params():
    p = zero_params(NetSpec(2, 5, 2))
    jac = network.input_jacobian(p, np.ones((2, 3)))
    np.testing.assert_array_equal(jac, np.zeros((2, 2, 3)))


def test_jacobian_single_input_vs_finite_difference():
    p = network.init_params(NetSpec(1, 10, 1), 21)
    y = np.linspace(-2, 2, 9)[None, :]
    jac = network.input_jacobian(p, y)[0, 0]
    h = 1e-6
    fd = (reference_forward(p, y + h) - reference_forward(p, y - h))[0] / (2 * h)
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-10)


def test_jacobian_system_vs_finite_difference():
    p = network.init_params(NetSpec(3, 50, 3), 4)
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 6))
    jac = network.input_jacobian(p, y)
    h = 1e-6
    for j in range(3):
        e = np.zeros((3, 1))
        e[j] = h
        fd = (reference_forward(p, y + e) - reference_forward(p, y - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, j, :], fd, rtol=1e-6, atol=1e-9)


def test_jacobian_fd_sweep_many_random_pairs():
    rng = np.random.default_rng(31)
    h = 1e-6
    worst = 0.0
    for trial in range(100):
        spec = NetSpec(int(rng.integers(1, 4)), int(rng.integers(2, 12)),
                       int(rng.integers(1, 4)))
        p = network.init_params(spec, int(rng.integers(0, 10_000)))
        y = rng.normal(size=(spec.n_in, 4))
        jac = network.input_jacobian(p, y)
        for j in range(spec.n_in):
            e = np.zeros((spec.n_in, 1))
            e[j] = h
            fd = (reference_forward(p, y + e) - reference_forward(p, y - e)) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-6)
            worst = max(worst, float((np.abs(jac[:, j, :] - fd) / denom).max()))
    assert worst < 1e-5


def test_cubic_polynomial_under_identity_activation():
    # with the identity hook the map is a polynomial of degree <= 3: fit on
    # 4 points, predict the rest
    p = network.init_params(NetSpec(1, 10, 1), 17)
    y = np.linspace(-2.0, 2.0, 11)[None, :]
    out = network.forward(p, y, act="identity")[0]
    coef = np.polyfit(y[0, :4], out[:4], 3)
    pred = np.polyval(coef, y[0])
    np.testing.assert_allclose(pred, out, rtol=1e-9, atol=1e-9)


def test_output_layer_scaling_is_exact_for_pow2():
    # scaling W5, b5 by a power of two scales output and jacobian bit-exactly
    spec = NetSpec(2, 7, 2)
    p = network.init_params(spec, 2)
    p = NetParams(**{n: getattr(p, n) for n in
                     ("W0", "b0", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")},
                  W5=p.W5 + 0.1, b5=p.b5 + 0.05)
    y = np.random.default_rng(5).normal(size=(2, 9))
    for c in (0.5, 2.0, 4.0):
        scaled = NetParams(**{n: getattr(p, n) for n in
                              ("W0", "b0", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")},
                           W5=c * p.W5, b5=c * p.b5)
        np.testing.assert_array_equal(network.forward(scaled, y),
                                      c * network.forward(p, y))
        np.testing.assert_array_equal(network.input_jacobian(scaled, y),
                                      c * network.input_jacobian(p, y))


def test_jacobian_differentiable_in_weights():
    # d/dtheta of the input derivative must flow through the tape
    spec = NetSpec(1, 6, 1)
    p = network.init_params(spec, 8)
    y0 = np.linspace(0.1, 0.9, 5)[None, :]
    theta0 = network.pack(p)

    def jac_sum(theta):
        pp = network.unpack(theta, spec)
        return float(np.sum(network.input_jacobian(pp, y0)))

    t = Tape()
    leaves = network.as_leaves(p, t)
    _, cols = network.forward_with_input_jacobian(leaves, t.leaf(y0))
    gs = t.backward(tape.total(cols[0]), wrt=leaves.arrays())
    g = np.concatenate([x.ravel() for x in gs])
    rng = np.random.default_rng(1)
    for i in rng.choice(theta0.size, size=12, replace=False):
        e = np.zeros_like(theta0)
        e[i] = 1e-6
        fd = (jac_sum(theta0 + e) - jac_sum(theta0 - e)) / 2e-6
        assert fd == pytest.approx(float(g[i]), rel=2e-5, abs=1e-10)


def test_pack_unpack_roundtrip():
    spec = NetSpec(3, 9, 2)
    p = network.init_params(spec, 77)
    q = network.unpack(network.pack(p), spec)
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    bundle = {
        "flux": network.init_params(NetSpec(1, 10, 1), 1),
        "nu_plus": network.init_params(NetSpec(2, 10, 1), 2),
    }
    path = tmp_path / "ck.json"
    network.save_checkpoint(path, bundle, meta={"note": "test"})
    loaded, meta = network.load_checkpoint(path)
    assert meta == {"note": "test"}
    assert set(loaded) == {"flux", "nu_plus"}
    for name in bundle:
        for a, b in zip(bundle[name].arrays(), loaded[name].arrays()):
            np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_bad_version(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text('{"format_version": 99, "nets": {}}')
    with pytest.raises(ConfigError):
        network.load_checkpoint(path)


def test_netspec_validation():
    with pytest.raises(ConfigError):
        NetSpec(0, 5, 1)
    with pytest.raises(ConfigError):
        NetSpec(1, 5, 1, init="he")
