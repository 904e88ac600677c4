import numpy as np

from segnode.autodiff import Tape, Tensor, vjp


def numeric_vjp(fn, arrays, cotangent, eps=1e-6, sample=None, rng=None):
    """Central-difference estimate of <cotangent, d fn / d arrays[i]> per entry.

    Returns one dict {flat index: estimate} per input array.
    """
    rng = rng or np.random.default_rng(0)
    out = []
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        idx = range(flat.size) if sample is None or flat.size <= sample else \
            rng.choice(flat.size, sample, replace=False)
        est = {}
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float((fn(*arrays) * cotangent).sum())
            flat[i] = orig - eps
            fm = float((fn(*arrays) * cotangent).sum())
            flat[i] = orig
            est[int(i)] = (fp - fm) / (2 * eps)
        out.append(est)
    return out


def tape_vjp(op, arrays, cotangent):
    """Analytic VJP of ``op(*tensors)`` via the tape."""
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        y = op(*leaves)
    grads = vjp(tape, [y], [cotangent])
    return [grads.of(t) for t in leaves]


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_vjp(op, arrays, rng, tol=1e-4, sample=100):
    """Compare the tape VJP of an op with finite differences at sampled coordinates."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    y = op(*[Tensor(a) for a in arrays]).data
    cot = rng.standard_normal(y.shape)
    analytic = tape_vjp(op, arrays, cot)
    fn = lambda *xs: op(*[Tensor(x) for x in xs]).data  # noqa: E731
    numeric = numeric_vjp(fn, arrays, cot, sample=sample, rng=rng)
    for g, est in zip(analytic, numeric):
        idx = sorted(est)
        err = rel_err(g.reshape(-1)[idx], [est[i] for i in idx])
        assert err <= tol, err


def tiny_segnode(scale=0.05, seed=1, steps=8):
    """A 4k-parameter f64 SegNode whose zero-initialised weights are nudged off zero.

    Fresh networks have f == 0 exactly, which makes gradient checks trivial;
    the perturbation keeps the flow mild so the adjoint's backward
    reconstruction of h(t) stays accurate.
    """
    from segnode.model import NetworkConfig, make_model
    from segnode.ode import SolverConfig

    cfg = NetworkConfig(branch_channels=(4, 4, 4, 4), num_classes=2, modules_in_dynamics=1,
                        blocks_per_branch=1, input_size=(16, 16), norm_groups=2)
    model = make_model("segnode", cfg, seed=0, dtype=np.float64,
                       solver=SolverConfig("rk4", step_count=steps))
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if not t.data.any() or name.endswith("gamma"):
            t.data[...] += rng.standard_normal(t.shape) * scale
    images = rng.standard_normal((2, 3, 16, 16))
    labels = rng.integers(0, 2, (2, 16, 16))
    return model, images, labels
