import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from varnet.errors import ArchitectureMismatch, ContractError
from varnet.policy import (
    Architecture,
    PolicyParams,
    deserialize_params,
    forward,
    forward_inverter,
    forward_utility,
    init_params,
    inverter_setpoints,
    jacobian,
    serialize_params,
    vjp,
)

from conftest import random_tree
from oracles import central_difference


@pytest.fixture(scope="module")
def arch(topo13):
    return Architecture.for_feeder(topo13)


def random_inputs(rng, arch, scale=1.0):
    w_u = rng.normal(scale=scale, size=arch.utility_dims[0])
    w_local = rng.normal(scale=scale, size=(arch.n_inverters, arch.local_dim))
    return w_u, w_local


# --------------------------------------------------------------------------
# architecture and parameters


def test_default_architecture(arch):
    assert arch.utility_dims == (3, 1)
    assert arch.inverter_dims == (5, 6, 1)
    assert arch.d_u == 1 and arch.local_dim == 4
    # 3*1+1 utility, 2 * (5*6+6 + 6*1+1) inverters
    assert arch.n_params == 4 + 2 * 43


def test_architecture_contract(topo13):
    with pytest.raises(ContractError):
        Architecture(12, (12, 9), (1.0, 1.0))
    with pytest.raises(ContractError):
        Architecture(12, (9, 12), (1.0,))
    with pytest.raises(ContractError):
        Architecture(12, (9, 12), (1.0, 1.0), inverter_dims=(5, 6, 2))
    with pytest.raises(ContractError):
        Architecture(12, (9, 12), (1.0, 1.0), hidden_activation="relu")
    with pytest.raises(ContractError):
        Architecture(12, (9, 12), (1.0, 1.0), utility_dims=(3, 5), inverter_dims=(5, 1))


def test_init_range_and_determinism(arch):
    a = init_params(arch, seed=3)
    assert np.abs(a.theta).max() <= 0.1
    assert_array_equal(a.theta, init_params(arch, seed=3).theta)
    assert not np.array_equal(a.theta, init_params(arch, seed=4).theta)


def test_init_mean_large_arch():
    topo = random_tree(np.random.default_rng(1), 40, n_inverters=25)
    big = Architecture.for_feeder(topo, inverter_hidden=(60,))
    assert big.n_params >= 10_000
    theta = init_params(big, seed=0).theta
    assert abs(theta.mean()) < 0.005
    assert np.abs(theta).max() <= 0.1


def test_flatten_order(arch):
    p = init_params(arch, seed=0)
    (Wu, bu), = p.utility_layers
    assert_array_equal(p.theta[:3], Wu.ravel())
    assert_array_equal(p.theta[3:4], bu)
    (W1, b1), (W2, b2) = p.inverter_layers(9)
    assert_array_equal(p.theta[4:34], W1.ravel())
    assert_array_equal(p.theta[34:40], b1)
    assert_array_equal(p.theta[40:46], W2.ravel())
    assert_array_equal(p.theta[46:47], b2)


@given(seed=st.integers(0, 2**32 - 1))
def test_flatten_unflatten_identity(seed, arch):
    p = init_params(arch, seed=seed)
    inv = [p.inverter_layers(b) for b in arch.inverter_buses]
    q = PolicyParams.from_layers(arch, p.utility_layers, inv)
    assert_array_equal(q.flatten(), p.theta)


def test_params_shape_check(arch):
    with pytest.raises(ArchitectureMismatch):
        PolicyParams(arch, np.zeros(arch.n_params + 1))


# --------------------------------------------------------------------------
# forward pass


def test_zero_theta_gives_zero(arch):
    p = PolicyParams(arch, np.zeros(arch.n_params))
    w_u, w_local = random_inputs(np.random.default_rng(0), arch)
    assert_array_equal(forward_utility(p, w_u), [0.0])
    assert_array_equal(forward(p, w_u, w_local), np.zeros(12))
    assert forward_inverter(p, 9, [0.0], w_local[0], 1.0) == 0.0


def test_utility_saturation_stays_open(arch):
    p = init_params(arch, seed=0)
    p.theta[:4] *= 1000.0
    w_u = np.array([5.0, -3.0, 40.0])
    u = forward_utility(p, w_u)
    assert np.all(np.abs(u) < 1.0)


def test_utility_closed_form(arch):
    theta = np.zeros(arch.n_params)
    theta[0] = 1.0
    u = forward_utility(PolicyParams(arch, theta), np.array([0.5, 0.3, -0.2]))
    assert_allclose(u, [math.tanh(0.5)], rtol=1e-15)
    assert u[0] == pytest.approx(0.4621, abs=1e-4)


def test_zero_qbar_gives_zero(arch):
    p = init_params(arch, seed=1)
    assert forward_inverter(p, 9, [0.3], [1.0, 2.0, 3.0, 0.0], 0.0) == 0.0


def test_unknown_inverter_and_dims(arch):
    p = init_params(arch, seed=1)
    with pytest.raises(ContractError):
        forward_inverter(p, 5, [0.0], np.zeros(4), 1.0)
    with pytest.raises(ContractError):
        forward_inverter(p, 9, [0.0], np.zeros(3), 1.0)
    with pytest.raises(ContractError):
        forward_utility(p, np.zeros(4))
    with pytest.raises(ContractError):
        forward(p, np.zeros(3), np.zeros((3, 4)))


def test_forward_is_composition(arch):
    rng = np.random.default_rng(2)
    p = init_params(arch, seed=2)
    w_u, w_local = random_inputs(rng, arch)
    q = forward(p, w_u, w_local)
    u = forward_utility(p, w_u)
    for m, bus in enumerate(arch.inverter_buses):
        assert q[bus - 1] == forward_inverter(p, bus, u, w_local[m], arch.qbar[m])
    others = np.ones(12, bool)
    others[arch.inverter_index] = False
    assert (q[others] == 0).all()


def test_locality(arch):
    rng = np.random.default_rng(3)
    p = init_params(arch, seed=3)
    w_u, w_local = random_inputs(rng, arch)
    q = forward(p, w_u, w_local)
    w2 = w_local.copy()
    w2[0] += 5.0  # inverter at bus 9
    q2 = forward(p, w_u, w2)
    assert q2[11] == q[11]
    assert q2[8] != q[8]


@given(seed=st.integers(0, 2**32 - 1), scale=st.sampled_from([0.1, 1.0, 10.0, 1e3]))
def test_feasible_by_construction(seed, scale, arch):
    rng = np.random.default_rng(seed)
    p = PolicyParams(arch, rng.uniform(-scale, scale, arch.n_params))
    w_u, w_local = random_inputs(rng, arch, scale)
    q = forward(p, w_u, w_local)
    assert np.all(np.abs(q[arch.inverter_index]) < arch.qbar)
    assert np.all(np.abs(forward_utility(p, w_u)) < 1.0)


@given(seed=st.integers(0, 2**32 - 1))
def test_kernel_forward_matches_reference(seed, arch, backend):
    rng = np.random.default_rng(seed)
    p = PolicyParams(arch, rng.uniform(-1, 1, arch.n_params))
    w_u, w_local = random_inputs(rng, arch)
    q = forward(p, w_u, w_local)
    assert_allclose(inverter_setpoints(p, w_u, w_local), q[arch.inverter_index], rtol=1e-13, atol=1e-15)


# --------------------------------------------------------------------------
# Jacobian


def test_single_layer_jacobian_at_zero(topo13, backend):
    arch = Architecture.for_feeder(topo13, inverter_hidden=())
    p = PolicyParams(arch, np.zeros(arch.n_params))
    w_u = np.array([0.3, -0.2, 0.1])
    w_local = np.array([[0.5, 0.2, 0.1, 1.0], [0.4, 0.3, 0.05, 1.0]])
    J = jacobian(p, w_u, w_local)
    x9 = np.concatenate([[0.0], w_local[0]])
    # inverter 9 block: 5 weights then the bias
    assert_allclose(J[8, 4:9], 1.0 * x9)
    assert J[8, 9] == 1.0
    # utility columns vanish because the inverter weights on u are zero
    assert_array_equal(J[:, :4], 0.0)
    assert_array_equal(J[11, 4:10], 0.0)


def test_jacobian_structure(arch, backend):
    rng = np.random.default_rng(5)
    p = init_params(arch, seed=5)
    w_u, w_local = random_inputs(rng, arch)
    J = jacobian(p, w_u, w_local)
    others = np.ones(12, bool)
    others[arch.inverter_index] = False
    assert_array_equal(J[others], 0.0)
    # each inverter's own block is zero in the other inverter's row
    assert_array_equal(J[11, 4:47], 0.0)
    assert_array_equal(J[8, 47:], 0.0)
    # shared utility columns collect from both heads
    assert np.all(J[8, :4] != 0) and np.all(J[11, :4] != 0)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@given(seed=st.integers(0, 2**32 - 1))
def test_jacobian_finite_difference(seed, arch, backend):
    rng = np.random.default_rng(seed)
    p = PolicyParams(arch, rng.uniform(-1, 1, arch.n_params))
    w_u, w_local = random_inputs(rng, arch)
    J = jacobian(p, w_u, w_local)
    fd = central_difference(lambda th: forward(PolicyParams(arch, th), w_u, w_local), p.theta, h=1e-6)
    assert rel_err(J, fd) < 1e-6


@given(seed=st.integers(0, 2**32 - 1))
def test_vjp_matches_jacobian(seed, arch, backend):
    rng = np.random.default_rng(seed)
    p = PolicyParams(arch, rng.uniform(-1, 1, arch.n_params))
    w_u, w_local = random_inputs(rng, arch)
    cot = rng.normal(size=arch.n_inverters)
    q, g = vjp(p, w_u, w_local, cot)
    J = jacobian(p, w_u, w_local)
    assert_allclose(g, J[arch.inverter_index].T @ cot, rtol=1e-12, atol=1e-14)
    assert_allclose(q, forward(p, w_u, w_local)[arch.inverter_index], rtol=1e-13, atol=1e-15)


@given(seed=st.integers(0, 2**32 - 1))
def test_input_locality_of_jacobian(seed, arch):
    # d q_n / d w_local_m = 0 for m != n
    rng = np.random.default_rng(seed)
    p = PolicyParams(arch, rng.uniform(-1, 1, arch.n_params))
    w_u, w_local = random_inputs(rng, arch)

    def q_of_local(flat):
        return forward(p, w_u, flat.reshape(w_local.shape))[arch.inverter_index]

    Jw = central_difference(q_of_local, w_local.ravel(), h=1e-6)
    assert np.all(Jw[0, 4:] == 0.0)
    assert np.all(Jw[1, :4] == 0.0)


@pytest.mark.parametrize("hidden", [(), (4,), (3, 3)])
def test_deeper_utility_network(topo13, hidden, backend):
    arch = Architecture.for_feeder(topo13, utility_hidden=hidden, d_u=2)
    rng = np.random.default_rng(9)
    p = PolicyParams(arch, rng.uniform(-1, 1, arch.n_params))
    w_u, w_local = random_inputs(rng, arch)
    J = jacobian(p, w_u, w_local)
    fd = central_difference(lambda th: forward(PolicyParams(arch, th), w_u, w_local), p.theta, h=1e-6)
    assert rel_err(J, fd) < 1e-6


# --------------------------------------------------------------------------
# model files


def test_serialize_roundtrip_bytes(tmp_path, arch):
    rng = np.random.default_rng(0)
    p = PolicyParams(arch, rng.normal(size=arch.n_params))
    serialize_params(p, tmp_path / "a.json", {"window_start_minute": 780, "window_end_minute": 840})
    back = deserialize_params(tmp_path / "a.json", expected_arch=arch)
    assert_array_equal(back.theta, p.theta)
    serialize_params(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["metadata"]["window_start_minute"] == 780
    assert doc["architecture"]["inverter_buses"] == [9, 12]


def test_deserialize_arch_mismatch(tmp_path, arch, topo13):
    serialize_params(init_params(arch), tmp_path / "m.json")
    other = Architecture(12, (9,), (1.0,))
    with pytest.raises(ArchitectureMismatch, match="inverter"):
        deserialize_params(tmp_path / "m.json", expected_arch=other)


def test_deserialize_version_check(tmp_path, arch):
    serialize_params(init_params(arch), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ArchitectureMismatch, match="version"):
        deserialize_params(tmp_path / "m.json")
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ArchitectureMismatch):
        deserialize_params(tmp_path / "x.json")
