import math

import numpy as np
import pytest

from segnode import autodiff as ad
from segnode.adjoint import adjoint_backward, direct_backward
from segnode.autodiff import ParamStore, Tensor, finite_diff_grad
from segnode.ode import OdeState, SolverConfig, integrate
from segnode.train import cross_entropy_loss, loss_and_grads

from helpers import rel_err, tiny_segnode


def linear_problem(theta=1.0):
    params = ParamStore({"theta": Tensor(np.array([theta]))})
    f = lambda t, s: OdeState([ad.mul(s[0], params["theta"])])  # noqa: E731
    return params, f


def test_scalar_growth_closed_form():
    params, f = linear_problem()
    cfg = SolverConfig("rk4", step_count=16)
    h0 = OdeState([Tensor(np.array([1.0]))])
    hT, _ = integrate(f, h0, cfg)
    ones = OdeState([Tensor(np.ones(1))])
    dh0, grads, _ = adjoint_backward(f, params, hT, ones, cfg)
    assert abs(grads["theta"][0] - math.e) <= 1e-4
    assert abs(dh0[0].data[0] - math.e) <= 1e-4
    dh0, grads = direct_backward(f, params, h0, ones, cfg)
    assert abs(grads["theta"][0] - math.e) <= 1e-4
    assert abs(dh0[0].data[0] - math.e) <= 1e-4


def test_zero_cotangent_gives_zero_gradients():
    params, f = linear_problem(0.7)
    cfg = SolverConfig("rk4", step_count=4)
    hT = OdeState([Tensor(np.array([2.0]))])
    dh0, grads, _ = adjoint_backward(f, params, hT, OdeState([Tensor(np.zeros(1))]), cfg)
    assert dh0[0].data[0] == 0.0 and grads["theta"][0] == 0.0


def test_identity_flow():
    params = ParamStore({"w": Tensor(np.zeros((2, 2)))})
    f = lambda t, s: OdeState([Tensor(s[0].data @ params["w"].data)])  # noqa: E731
    cfg = SolverConfig("rk4", step_count=4)
    s = OdeState([Tensor(np.array([[1.0, -2.0]]))])
    cot = OdeState([Tensor(np.array([[0.3, 0.4]]))])
    dh0, grads, _ = adjoint_backward(f, params, s, cot, cfg)
    np.testing.assert_array_equal(dh0[0].data, cot[0].data)
    assert not grads["w"].any()
    ddh0, dgrads = direct_backward(f, params, s, cot, cfg)
    np.testing.assert_array_equal(ddh0[0].data, dh0[0].data)
    assert not dgrads["w"].any()


def test_fresh_segnode_is_identity_flow():
    model, images, _ = tiny_segnode(scale=0.0)
    s0 = model.encode(Tensor(images))
    cot = OdeState([Tensor(np.ones_like(p.data)) for p in s0])
    dh, grads, _ = adjoint_backward(model.dynamics, model.body_params, s0, cot, model.solver)
    for a, b in zip(dh, cot):
        np.testing.assert_array_equal(a.data, b.data)
    ddh, dgrads = direct_backward(model.dynamics, model.body_params, s0, cot, model.solver)
    for a, b in zip(ddh, dh):
        np.testing.assert_array_equal(a.data, b.data)
    for name in grads:
        np.testing.assert_allclose(grads[name], dgrads[name], atol=1e-12)


def test_direct_rejects_adaptive_and_shape_mismatch():
    params, f = linear_problem()
    h0 = OdeState([Tensor(np.ones(1))])
    with pytest.raises(ValueError, match="fixed-step"):
        direct_backward(f, params, h0, h0, SolverConfig("dopri5"))
    with pytest.raises(ValueError, match="shapes"):
        adjoint_backward(f, params, h0, OdeState([Tensor(np.ones(2))]), SolverConfig())


def test_adjoint_with_dopri5():
    params, f = linear_problem()
    cfg = SolverConfig("dopri5", rtol=1e-7, atol=1e-9)
    hT = OdeState([Tensor(np.array([math.e]))])
    _, grads, stats = adjoint_backward(f, params, hT, OdeState([Tensor(np.ones(1))]), cfg)
    assert abs(grads["theta"][0] - math.e) <= 1e-5
    assert stats.nfe == 1 + 6 * (stats.accepted_steps + stats.rejected_steps)


def test_tiny_segnode_adjoint_matches_direct():
    model, images, labels = tiny_segnode()
    assert model.params.size() <= 10_000
    ga = model.params.flat_grad(loss_and_grads(model, images, labels, "adjoint").grads)
    gd = model.params.flat_grad(loss_and_grads(model, images, labels, "direct").grads)
    assert rel_err(ga, gd) <= 1e-2


def test_tiny_segnode_direct_matches_finite_differences():
    model, images, labels = tiny_segnode()
    gd = model.params.flat_grad(loss_and_grads(model, images, labels, "direct").grads)
    idx = np.random.default_rng(5).choice(model.params.size(), 60, replace=False)
    objective = lambda p: cross_entropy_loss(model.forward(Tensor(images)), labels).item()  # noqa: E731
    fd = finite_diff_grad(objective, model.params, 1e-5, idx)
    assert rel_err(gd[idx], [fd[i] for i in idx]) <= 1e-3
