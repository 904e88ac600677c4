"""Gradients through ODE solves.

:func:`adjoint_backward` integrates the augmented system (state, adjoint,
parameter-gradient accumulator) backwards in time.  Each evaluation of the
augmented dynamics records one call of ``f`` on a private tape, pulls the
adjoint back through it, and drops the tape, so stored activations do not
grow with the number of solver steps.

:func:`direct_backward` records the whole unrolled solve on one tape and
backpropagates through it.  It is exact for the discrete solver and serves
as the reference for the adjoint path.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tape, Tensor, vjp
from .ode import Dynamics, OdeState, SolveStats, SolverConfig, SolverError, integrate


def _augmented_dynamics(f: Dynamics, params: ParamStore, cfg: SolverConfig, n_state: int):
    """Dynamics of ``[h, a, g]`` in reversed time ``tau = t1 + t0 - t``."""
    tensors = params.tensors()
    flip = cfg.t1 + cfg.t0

    def aug(tau: float, z: OdeState) -> OdeState:
        t = flip - tau
        h_parts = z.parts[:n_state]
        a_parts = z.parts[n_state:2 * n_state]
        with Tape() as tape:
            h = OdeState([Tensor(p.data, requires_grad=True) for p in h_parts])
            fh = f(t, h)
        grads = vjp(tape, fh.parts, [a.data for a in a_parts])
        for p in fh.parts:
            if not np.isfinite(p.data).all():
                raise SolverError(f"non-finite dynamics during adjoint solve at t={t:.6g}", t=t)
        dh = [Tensor(-p.data) for p in fh.parts]
        da = [Tensor(grads.of(hp)) for hp in h.parts]
        for d in da:
            if not np.isfinite(d.data).all():
                raise SolverError(f"non-finite adjoint at t={t:.6g}", t=t)
        parts = dh + da
        if tensors:
            parts.append(Tensor(np.concatenate([grads.of(p).reshape(-1) for p in tensors])))
        return OdeState(parts)

    return aug


def adjoint_backward(f: Dynamics, params: ParamStore, hT: OdeState, dL_dhT: OdeState,
                     cfg: SolverConfig, backward_cfg: Optional[SolverConfig] = None,
                     ) -> tuple[OdeState, dict[str, np.ndarray], SolveStats]:
    """Adjoint-method gradients of a loss on ``h(t1)``.

    Returns ``(dL/dh(t0), {name: dL/dtheta}, stats)``.  ``backward_cfg``
    defaults to ``cfg`` (same method, steps and tolerances).
    """
    if hT.shapes != dL_dhT.shapes:
        raise ValueError(f"cotangent shapes {dL_dhT.shapes} do not match state {hT.shapes}")
    bcfg = backward_cfg or cfg
    n = len(hT)
    parts = [Tensor(p.data) for p in hT.parts] + [Tensor(np.asarray(p.data)) for p in dL_dhT.parts]
    n_params = params.size()
    if n_params:
        dtype = hT.parts[0].dtype
        parts.append(Tensor(np.zeros(n_params, dtype=dtype)))
    aug = _augmented_dynamics(f, params, bcfg, n)
    z0, stats = integrate(aug, OdeState(parts), bcfg)
    dh0 = OdeState(z0.parts[n:2 * n])
    if n_params:
        grads = params.unflatten(z0.parts[2 * n].data)
    else:
        grads = {}
    return dh0, grads, stats


def direct_backward(f: Dynamics, params: ParamStore, h0: OdeState, dL_dhT: OdeState,
                    cfg: SolverConfig) -> tuple[OdeState, dict[str, np.ndarray]]:
    """Backpropagate through the recorded fixed-step solve."""
    if not cfg.fixed_step:
        raise ValueError("direct_backward needs a fixed-step method (euler or rk4)")
    with Tape() as tape:
        leaves = OdeState([Tensor(p.data, requires_grad=True) for p in h0.parts])
        hT, _ = integrate(f, leaves, cfg)
    if hT.shapes != dL_dhT.shapes:
        raise ValueError(f"cotangent shapes {dL_dhT.shapes} do not match state {hT.shapes}")
    grads = vjp(tape, hT.parts, [p.data for p in dL_dhT.parts])
    dh0 = OdeState([Tensor(grads.of(p)) for p in leaves.parts])
    return dh0, params.named(grads)
