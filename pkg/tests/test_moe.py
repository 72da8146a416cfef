import numpy as np
import pytest

from spheremoe import tensor as tn
from spheremoe.analysis import fd_jacobian, random_layer
from spheremoe.moe import (
    NonDifferentiableError,
    init_smoe,
    jacobian_analytic,
    routing_grad_component,
    routing_grad_general,
    smoe_forward,
    top2_margin,
)
from spheremoe.routing import RouterConfig
from spheremoe.tensor import Rng, Tensor


def _zero_output(layer):
    for expert in layer.experts:
        for _, _, W2, b2 in expert.blocks:
            W2.data = np.zeros_like(W2.data)
            b2.data = np.zeros_like(b2.data)


def _off_boundary(layer, rng, margin=1e-3):
    while True:
        h = rng.normal(size=layer.router.E.shape[1])
        if top2_margin(h, layer) > margin:
            return h


# --- forward ---------------------------------------------------------------------


def test_zero_gate_is_identity(rng):
    # sigmoid gate at a huge negative score is exactly 0 in float64
    cfg = RouterConfig(variant="baseline", gating="sigmoid", num_experts=2)
    layer = init_smoe(cfg, 4, 8, 1, "gelu", Rng(0))
    layer.router.E.data = np.array([[-1e3, 0, 0, 0], [-1e3, 0, 0, 0]], dtype=float)
    H = np.abs(rng.normal(size=(3, 4))) + 1.0
    out, outcome = smoe_forward(Tensor(H), layer)
    assert not outcome.gate.data.any()
    np.testing.assert_array_equal(out.data, H)


def test_single_zero_output_expert_is_identity(rng):
    layer = init_smoe(RouterConfig(num_experts=1), 5, 10, 3, "gelu", Rng(1))
    _zero_output(layer)
    H = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(smoe_forward(Tensor(H), layer)[0].data, H)


@pytest.mark.parametrize("variant", ["baseline", "hypersphere"])
@pytest.mark.parametrize("activation", ["gelu", "relu"])
def test_forward_matches_per_token_loop(variant, activation, rng):
    cfg = RouterConfig(variant=variant, num_experts=4)
    layer = init_smoe(cfg, 8, 16, 3, activation, Rng(2))
    H = rng.normal(size=(11, 8))
    out, outcome = smoe_forward(Tensor(H), layer)
    act = {"gelu": lambda a: 0.5 * a * (1 + np.tanh(np.sqrt(2 / np.pi) * (a + 0.044715 * a**3))),
           "relu": lambda a: np.maximum(a, 0)}[activation]
    for t in range(11):
        k = outcome.selected[t]
        x = H[t]
        for W1, b1, W2, b2 in layer.experts[k].blocks:
            x = act(x @ W1.data + b1.data) @ W2.data + b2.data
        np.testing.assert_allclose(out.data[t], H[t] + outcome.gate.data[t] * x, rtol=0, atol=1e-13)


def test_token_permutation_equivariance(rng):
    layer = init_smoe(RouterConfig(num_experts=3), 6, 12, 2, "gelu", Rng(3))
    H = rng.normal(size=(9, 6))
    perm = rng.permutation(9)
    a = smoe_forward(Tensor(H), layer)[0].data
    b = smoe_forward(Tensor(H[perm]), layer)[0].data
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-14)


def test_expert_count_must_match_router():
    layer = init_smoe(RouterConfig(num_experts=3), 4, 8, 1, "gelu", Rng(0))
    with pytest.raises(ValueError):
        type(layer)(RouterConfig(num_experts=4), layer.router, layer.experts)


def test_expert_forward_np_jacobian_matches_fd(rng):
    layer = init_smoe(RouterConfig(num_experts=1), 5, 9, 3, "gelu", Rng(4))
    ex = layer.experts[0]
    h = rng.normal(size=5)
    out, J = ex.forward_np(h)
    np.testing.assert_allclose(out, ex(Tensor(h[None])).data[0], rtol=0, atol=1e-14)
    fd = np.stack([(ex.forward_np(h + e)[0] - ex.forward_np(h - e)[0]) / 2e-6 for e in np.eye(5) * 1e-6], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-8)


# --- Jacobian decomposition ------------------------------------------------------------


def test_zero_output_expert_gives_identity_jacobian(rng):
    layer = random_layer(6, 3, seed=0)
    _zero_output(layer)
    J1, J2 = jacobian_analytic(_off_boundary(layer, rng), layer)
    np.testing.assert_array_equal(J1, np.eye(6))
    np.testing.assert_array_equal(J2, np.zeros((6, 6)))


def test_single_expert_has_no_gate_path(rng):
    layer = random_layer(5, 1, seed=1)
    J1, J2 = jacobian_analytic(rng.normal(size=5), layer)
    assert not J2.any()


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_sum_matches_finite_differences(seed):
    layer = random_layer(6, 3, seed=seed)
    h = _off_boundary(layer, np.random.default_rng(seed), 1e-2)
    J1, J2 = jacobian_analytic(h, layer)
    assert np.abs(J1 + J2 - fd_jacobian(layer, h, 1e-6)).max() < 1e-5
    # the gate path matters: dropping it breaks the match
    assert np.abs(J1 - fd_jacobian(layer, h, 1e-6)).max() > 1e-4


def test_jacobian_includes_temperature():
    cfg = RouterConfig(variant="baseline", num_experts=3, learnable_tau=True, tau_init=0.5)
    layer = random_layer(5, 3, seed=2, config=cfg)
    h = _off_boundary(layer, np.random.default_rng(2), 1e-2)
    J1, J2 = jacobian_analytic(h, layer)
    assert np.abs(J1 + J2 - fd_jacobian(layer, h, 1e-6)).max() < 1e-5


def test_boundary_rejected():
    layer = random_layer(4, 2, seed=3)
    E = layer.router.E.data
    h = np.linalg.lstsq(np.vstack([E[0] - E[1]]), [0.0], rcond=None)[0]  # equal top-2 scores
    with pytest.raises(NonDifferentiableError, match="non-differentiable neighborhood"):
        jacobian_analytic(h, layer)


def test_jacobian_requires_plain_router():
    layer = random_layer(4, 2, seed=0, config=RouterConfig(num_experts=2))
    with pytest.raises(ValueError):
        jacobian_analytic(np.ones(4), layer)


# --- routing-gradient component -------------------------------------------------------------


def test_component_zero_when_upstream_orthogonal_to_expert_output(rng):
    layer = random_layer(6, 3, seed=4)
    h = _off_boundary(layer, rng)
    k = int(np.argmax(layer.router.E.data @ h))
    h_ffn = layer.experts[k].forward_np(h)[0]
    u = rng.normal(size=6)
    u -= (u @ h_ffn) / (h_ffn @ h_ffn) * h_ffn
    np.testing.assert_allclose(routing_grad_component(h, layer, u), 0.0, atol=1e-15)


def test_component_zero_for_single_expert(rng):
    layer = random_layer(6, 1, seed=5)
    assert not routing_grad_component(rng.normal(size=6), layer, rng.normal(size=6)).any()


def test_component_equals_coefficient_loop(rng):
    layer = random_layer(6, 4, seed=6)
    h, u = _off_boundary(layer, rng), rng.normal(size=6)
    E = layer.router.E.data
    s = E @ h
    k = int(np.argmax(s))
    S = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    h_ffn = layer.experts[k].forward_np(h)[0]
    expected = np.zeros(6)
    for j in range(4):
        expected += S[k] * ((j == k) - S[j]) * float(h_ffn @ u) * E[j]
    np.testing.assert_allclose(routing_grad_component(h, layer, u), expected, rtol=0, atol=1e-14)
    J1, J2 = jacobian_analytic(h, layer)
    np.testing.assert_allclose(J2.T @ u, expected, rtol=0, atol=1e-14)


@pytest.mark.parametrize(
    "cfg",
    [
        RouterConfig(variant="baseline", num_experts=4),
        RouterConfig(num_experts=4),
        RouterConfig(num_experts=4, gating="sigmoid"),
        RouterConfig(num_experts=4, l2_norm=False),
    ],
)
def test_general_component_matches_autodiff_gate_path(cfg, rng):
    """Gate-path gradient equals full autodiff gradient minus the expert path."""
    layer = random_layer(6, 4, seed=7, config=cfg)
    for _ in range(5):
        h, u = rng.normal(size=6), rng.normal(size=6)
        comp, basis = routing_grad_general(h, layer, u)
        H = Tensor(h[None], requires_grad=True)
        out, outcome = smoe_forward(H, layer)
        tn.backward(tn.sum(tn.mul(out, Tensor(u[None]))))
        k = outcome.selected[0]
        _, J_ffn = layer.experts[k].forward_np(h)
        expert_path = u + outcome.gate.data[0] * (J_ffn.T @ u)
        np.testing.assert_allclose(comp, H.grad[0] - expert_path, rtol=0, atol=1e-12)
        coef = np.linalg.lstsq(basis, comp, rcond=None)[0]
        np.testing.assert_allclose(basis @ coef, comp, atol=1e-12)
