import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segnode import autodiff as ad
from segnode.autodiff import Tensor
from segnode.model import (NetworkConfig, analytic_param_count, build_params, conv_params,
                           make_model, norm_params, param_count, parameter_reduction)
from segnode.nn import conv2d, group_norm
from segnode.ode import OdeState, SolverConfig

SMALL = NetworkConfig(branch_channels=(4, 8, 8, 16), num_classes=3, input_size=(32, 32),
                      norm_groups=2, blocks_per_branch=2, modules_in_dynamics=2)


def nudge(model, scale=0.1, seed=0):
    """Give the zero-initialised weights non-zero values so the body does something."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if not t.data.any():
            t.data[...] = rng.standard_normal(t.shape) * scale
    return model


def image(n=2, size=32, seed=1, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(dtype))


def test_param_formula_examples():
    assert conv_params(8, 16, 3) == 1168
    assert norm_params(48) == 96


@pytest.mark.parametrize("size", [32, 64, 96])
def test_stem_shapes(size):
    model = make_model("segnode", NetworkConfig(input_size=(size, size)))
    out = model.stem_forward(image(1, size, dtype=np.float32))
    assert out.shape == (1, 8, size // 4, size // 4)


def test_stem_rejects_bad_sizes_and_zero_image():
    model = make_model("segnode", NetworkConfig(), dtype=np.float64)
    with pytest.raises(ValueError, match="divisible"):
        model.stem_forward(Tensor(np.zeros((1, 3, 30, 30))))
    for name in model.params.names():
        if name.startswith("stem.") and name.endswith(("bias", "beta")):
            model.params[name].data[...] = 0.0
    assert not model.stem_forward(Tensor(np.zeros((1, 3, 16, 16)))).data.any()


def test_branch_project_shapes():
    model = make_model("segnode", NetworkConfig(), dtype=np.float64)
    s = model.branch_project(Tensor(np.random.default_rng(0).standard_normal((2, 8, 16, 16))))
    assert [p.shape[2:] for p in s] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [p.shape[1] for p in s] == [8, 16, 32, 64]


def test_input_size_rule():
    with pytest.raises(ValueError):
        NetworkConfig(input_size=(30, 32))
    with pytest.raises(ValueError):
        NetworkConfig(branch_channels=(8, 16, 32, 60))
    assert NetworkConfig(input_size=(36, 36)).branch_sizes() == [(9, 9), (5, 5), (3, 3), (2, 2)]


def test_fresh_dynamics_are_zero():
    model = make_model("segnode", SMALL, dtype=np.float64)
    s = model.encode(image())
    out = model.dynamics(0.0, s)
    assert all(not p.data.any() for p in out)
    for t in model.body_params.tensors():
        t.data[...] = 0.0
    assert all(not p.data.any() for p in model.dynamics(0.3, s))


def test_single_branch_chain_matches_hand_composition():
    model = nudge(make_model("segnode", SMALL, dtype=np.float64))
    p = model.params
    s = model.encode(image())
    got = model.module_residual(0, s, fuse=False)[0].data

    def block(base, y):
        z = ad.relu(group_norm(y, p[base + ".norm1.gamma"], p[base + ".norm1.beta"], 2))
        z = conv2d(z, p[base + ".conv1.weight"], p[base + ".conv1.bias"], 1, 1)
        z = ad.relu(group_norm(z, p[base + ".norm2.gamma"], p[base + ".norm2.beta"], 2))
        return y + conv2d(z, p[base + ".conv2.weight"], p[base + ".conv2.bias"], 1, 1)

    y = s[0]
    for u in range(SMALL.blocks_per_branch):
        y = block(f"body.m0.b0.u{u}", y)
    np.testing.assert_allclose(got, y.data - s[0].data, atol=1e-6)


@settings(max_examples=8, deadline=None)
@given(widths=st.lists(st.sampled_from([2, 4, 6]), min_size=4, max_size=4),
       size=st.sampled_from([8, 12, 20, 28]), modules=st.integers(1, 2),
       blocks=st.integers(1, 2), seed=st.integers(0, 100))
def test_dynamics_preserve_state_shapes(widths, size, modules, blocks, seed):
    cfg = NetworkConfig(branch_channels=tuple(widths), num_classes=2, input_size=(size, size),
                        norm_groups=2, modules_in_dynamics=modules, blocks_per_branch=blocks)
    model = nudge(make_model("segnode", cfg, seed=seed, dtype=np.float64), seed=seed)
    s = model.encode(image(1, size, seed))
    out = model.dynamics(0.0, s)
    assert out.shapes == s.shapes
    assert all(np.isfinite(p.data).all() for p in out)


def test_heads_constant_map():
    cfg = NetworkConfig(num_classes=1)
    model = make_model("segnode", cfg, dtype=np.float64)
    biases = [0.5, -1.0, 2.0, 0.25]
    for i, b in enumerate(biases):
        model.params[f"heads.b{i}.weight"].data[...] = 0.0
        model.params[f"heads.b{i}.bias"].data[...] = b
    s = model.encode(image(1, 64))
    out = model.heads_forward(s, (64, 64)).data
    assert out.shape == (1, 1, 64, 64)
    np.testing.assert_allclose(out, sum(biases), rtol=1e-12)


def test_heads_branch_permutation_symmetry():
    cfg = NetworkConfig(branch_channels=(4, 4, 4, 4), norm_groups=2, num_classes=3)
    model = make_model("segnode", cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    parts = [Tensor(rng.standard_normal((2, 4, 8, 8))) for _ in range(4)]
    before = model.heads_forward(OdeState(parts), (32, 32)).data
    p = model.params
    for suffix in (".weight", ".bias"):
        a, b = p["heads.b1" + suffix], p["heads.b2" + suffix]
        a.data, b.data = b.data.copy(), a.data.copy()
    after = model.heads_forward(OdeState([parts[0], parts[2], parts[1], parts[3]]), (32, 32)).data
    np.testing.assert_allclose(after, before, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("modules", [1, 2])
def test_one_euler_step_equals_weight_shared_baseline(modules):
    cfg = NetworkConfig(modules_in_dynamics=modules, baseline_repeats=modules)
    seg = nudge(make_model("segnode", cfg, seed=0, dtype=np.float64,
                           solver=SolverConfig("euler", step_count=1)))
    base = make_model("baseline", cfg, seed=5, dtype=np.float64)
    for name, t in seg.params.items():
        base.params[name].data = t.data.copy()
    x = image(2, 64, seed=6)
    np.testing.assert_allclose(seg.forward(x).data, base.forward(x).data, atol=1e-6)
    # the same update written out without any solver
    s0 = seg.encode(x)
    f0 = seg.dynamics(0.0, s0)
    manual = seg.heads_forward(OdeState([a + b for a, b in zip(s0, f0)]), (64, 64))
    np.testing.assert_allclose(seg.forward(x).data, manual.data, atol=1e-6)


def test_zero_body_is_identity():
    for kind in ("segnode", "baseline"):
        model = make_model(kind, SMALL, dtype=np.float64)
        for name in model.params.names():
            if name.startswith("body."):
                model.params[name].data[...] = 0.0
        x = image()
        direct = model.heads_forward(model.encode(x), (32, 32)).data
        np.testing.assert_array_equal(model.forward(x).data, direct)


def test_logits_finite_at_init():
    for kind in ("segnode", "baseline"):
        logits = make_model(kind, NetworkConfig()).forward(image(2, 64, dtype=np.float32)).data
        assert logits.shape == (2, 4, 64, 64) and np.isfinite(logits).all()


def test_counts_match_closed_form():
    for cfg in (NetworkConfig(), SMALL, NetworkConfig(modules_in_dynamics=1, blocks_per_branch=3)):
        for kind in ("segnode", "baseline"):
            counted = param_count(make_model(kind, cfg))
            assert counted == analytic_param_count(cfg, kind)
            assert counted["total"] == sum(t.size for t in build_params(cfg, kind).tensors())
    desk = NetworkConfig()
    seg = param_count(make_model("segnode", desk))["total"]
    base = param_count(make_model("baseline", desk))["total"]
    assert seg < base
    assert parameter_reduction(desk) == pytest.approx(1 - seg / base, abs=0)


def test_parameters_are_seeded_per_name():
    a = build_params(SMALL, "segnode", seed=0)
    b = build_params(SMALL, "baseline", seed=0)
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)
    c = build_params(SMALL, "segnode", seed=1)
    assert not np.array_equal(a["stem.conv1.weight"].data, c["stem.conv1.weight"].data)
