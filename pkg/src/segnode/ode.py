"""Explicit Runge-Kutta integration over tuples of tensors.

States are :class:`OdeState` objects (an ordered tuple of tensors).  All
stage arithmetic goes through the autodiff primitives, so a solve run under
an active :class:`~segnode.autodiff.Tape` is fully recorded (the "direct"
gradient path) and a solve run without one stores nothing.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class OdeState:
    __slots__ = ("parts",)

    def __init__(self, parts: Sequence[Tensor]):
        self.parts = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parts)

    def __len__(self) -> int:
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def __getitem__(self, i: int) -> Tensor:
        return self.parts[i]

    @property
    def shapes(self) -> tuple:
        return tuple(p.shape for p in self.parts)

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parts]

    def detach(self) -> "OdeState":
        return OdeState([Tensor(p.data) for p in self.parts])

    @classmethod
    def zeros_like(cls, s: "OdeState") -> "OdeState":
        return cls([Tensor(np.zeros_like(p.data)) for p in s.parts])


Dynamics = Callable[[float, OdeState], OdeState]


class SolverError(RuntimeError):
    def __init__(self, message: str, t: Optional[float] = None, stats: Optional["SolveStats"] = None):
        super().__init__(message)
        self.t = t
        self.stats = stats


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    t0: float = 0.0
    t1: float = 1.0
    step_count: int = 8
    rtol: float = 1e-3
    atol: float = 1e-4
    max_nfe: int = 100_000

    def __post_init__(self):
        if self.method not in ("euler", "rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")
        if self.step_count < 1:
            raise ValueError("step_count must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_nfe < 1:
            raise ValueError("max_nfe must be >= 1")

    @property
    def fixed_step(self) -> bool:
        return self.method in ("euler", "rk4")

    def with_span(self, t0: float, t1: float) -> "SolverConfig":
        return replace(self, t0=t0, t1=t1)


@dataclass
class SolveStats:
    nfe: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    final_step_size: float = 0.0


# --------------------------------------------------------------------------
# state arithmetic


def _check_shapes(x: OdeState, y: OdeState) -> None:
    if x.shapes != y.shapes:
        raise ValueError(f"state shape mismatch {x.shapes} vs {y.shapes}")


def state_axpy(alpha: float, x: OdeState, y: OdeState) -> OdeState:
    """``alpha * x + y`` part by part."""
    _check_shapes(x, y)
    return OdeState([ad.axpy(alpha, a, b) for a, b in zip(x.parts, y.parts)])


def state_add(x: OdeState, y: OdeState) -> OdeState:
    _check_shapes(x, y)
    return OdeState([ad.add(a, b) for a, b in zip(x.parts, y.parts)])


def state_scale(alpha: float, x: OdeState) -> OdeState:
    return OdeState([ad.scale(a, alpha) for a in x.parts])


def state_norm(s: OdeState) -> float:
    return max(float(np.max(np.abs(p.data))) for p in s.parts)


def _combine(s: OdeState, h: float, coeffs: Sequence[float], ks: Sequence[OdeState]) -> OdeState:
    """``s + h * sum_i coeffs[i] * ks[i]``, skipping zero coefficients."""
    out = s
    for c, k in zip(coeffs, ks):
        if c != 0.0:
            out = state_axpy(h * c, k, out)
    return out


def _check_finite(s: OdeState, t: float, stats: Optional[SolveStats] = None) -> None:
    for p in s.parts:
        if not np.isfinite(p.data).all():
            raise SolverError(f"non-finite state at t={t:.6g}", t=t, stats=stats)


# --------------------------------------------------------------------------
# single steps


def euler_step(f: Dynamics, t: float, h: float, s: OdeState) -> OdeState:
    if h <= 0:
        raise ValueError("step size must be positive")
    k1 = f(t, s)
    _check_finite(k1, t)
    return state_axpy(h, k1, s)


def rk4_step(f: Dynamics, t: float, h: float, s: OdeState) -> OdeState:
    """Classical four-stage Runge-Kutta step."""
    if h <= 0:
        raise ValueError("step size must be positive")
    k1 = f(t, s)
    _check_finite(k1, t)
    k2 = f(t + h / 2, state_axpy(h / 2, k1, s))
    _check_finite(k2, t + h / 2)
    k3 = f(t + h / 2, state_axpy(h / 2, k2, s))
    _check_finite(k3, t + h / 2)
    k4 = f(t + h, state_axpy(h, k3, s))
    _check_finite(k4, t + h)
    acc = state_add(state_axpy(2.0, k3, state_axpy(2.0, k2, k1)), k4)
    return state_axpy(h, state_scale(1 / 6, acc), s)


# Dormand-Prince 5(4)
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_DP_E = tuple(b5 - b4 for b5, b4 in zip(_DP_B5, _DP_B4))


class DopriStep(NamedTuple):
    state: OdeState
    error: float
    nfe: int
    k_last: OdeState


def dopri5_step(f: Dynamics, t: float, h: float, s: OdeState, rtol: float = 1e-3,
                atol: float = 1e-4, k1: Optional[OdeState] = None) -> DopriStep:
    """One Dormand-Prince step.

    Returns the fifth-order state, the scaled error
    ``norm(s5 - s4) / (atol + rtol * max(norm(s), norm(s5)))``, the number of
    new dynamics evaluations, and the last stage (reusable as the next
    step's first stage).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    nfe = 0
    if k1 is None:
        k1 = f(t, s)
        nfe += 1
        _check_finite(k1, t)
    ks = [k1]
    for i in range(1, 7):
        si = _combine(s, h, _DP_A[i], ks)
        ti = t + _DP_C[i] * h
        ki = f(ti, si)
        nfe += 1
        _check_finite(ki, ti)
        ks.append(ki)
        if i == 6:
            s5 = si  # row 6 of A equals b5
    err_state = _combine(OdeState.zeros_like(s), h, _DP_E, ks)
    scale_ = atol + rtol * max(state_norm(s), state_norm(s5))
    return DopriStep(s5, state_norm(err_state) / scale_, nfe, ks[6])


# --------------------------------------------------------------------------
# full solves

_STAGES = {"euler": 1, "rk4": 4}


def _fixed_step(method: str):
    return euler_step if method == "euler" else rk4_step


def integrate(f: Dynamics, s0: OdeState, cfg: SolverConfig) -> tuple[OdeState, SolveStats]:
    """Solve from ``cfg.t0`` to ``cfg.t1`` and return the final state."""
    if cfg.fixed_step:
        return _integrate_fixed(f, s0, cfg)
    return _integrate_adaptive(f, s0, cfg, ())[0]


def _integrate_fixed(f, s0, cfg):
    stages = _STAGES[cfg.method]
    n = cfg.step_count
    stats = SolveStats()
    if stages * n > cfg.max_nfe:
        raise SolverError(f"{n} {cfg.method} steps need {stages * n} evaluations, "
                          f"over max_nfe={cfg.max_nfe}", t=cfg.t0, stats=stats)
    step = _fixed_step(cfg.method)
    h = (cfg.t1 - cfg.t0) / n
    s = s0
    for i in range(n):
        t = cfg.t0 + i * h
        s = step(f, t, h, s)
        stats.nfe += stages
        stats.accepted_steps += 1
        _check_finite(s, t + h, stats)
    stats.final_step_size = h
    return s, stats


def _step_factor(err: float) -> float:
    if err == 0.0:
        return 5.0
    return min(5.0, max(0.2, 0.9 * err ** (-1 / 5)))


def _integrate_adaptive(f, s0, cfg, stops: Sequence[float]):
    """Adaptive Dormand-Prince solve that lands exactly on each of ``stops``.

    Returns ``((final_state, stats), [(state, nfe) per stop])``.
    """
    stats = SolveStats()
    t = cfg.t0
    h = (cfg.t1 - cfg.t0) / 10
    s = s0
    k1 = None

    def advance(target):
        nonlocal t, h, s, k1
        while t < target:
            needed = 6 if k1 is not None else 7
            if stats.nfe + needed > cfg.max_nfe:
                raise SolverError(f"max_nfe={cfg.max_nfe} exceeded at t={t:.6g}", t=t, stats=stats)
            last = t + h >= target
            hh = target - t if last else h
            step = dopri5_step(f, t, hh, s, cfg.rtol, cfg.atol, k1)
            stats.nfe += step.nfe
            if step.error <= 1.0:
                t = target if last else t + hh
                s = step.state
                k1 = step.k_last
                stats.accepted_steps += 1
                _check_finite(s, t, stats)
            else:
                stats.rejected_steps += 1
            h = hh * _step_factor(step.error)
            stats.final_step_size = hh

    snaps = []
    for x in stops:
        advance(x)
        snaps.append((s, stats.nfe))
    advance(cfg.t1)
    return (s, stats), snaps


def integrate_trajectory(f: Dynamics, s0: OdeState, cfg: SolverConfig, times: Sequence[float],
                         with_nfe: bool = False):
    """States at each of the ascending ``times``.

    Fixed-step methods follow the same uniform grid as :func:`integrate`;
    a requested time between grid points is reached by one shortened step
    branching off the grid, so the main trajectory is unchanged.  Dopri5
    clips its steps to land on every requested time.  With ``with_nfe`` the
    cumulative evaluation count needed to reach each time is returned too.
    """
    times = [float(x) for x in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("trajectory times must be ascending")
    if times and (times[0] < cfg.t0 or times[-1] > cfg.t1):
        raise ValueError("trajectory times must lie inside the solver span")
    if cfg.fixed_step:
        out = _trajectory_fixed(f, s0, cfg, times)
    else:
        _, out = _integrate_adaptive(f, s0, cfg, times)
    if with_nfe:
        return [s for s, _ in out], [n for _, n in out]
    return [s for s, _ in out]


def _trajectory_fixed(f, s0, cfg, times):
    stages = _STAGES[cfg.method]
    step = _fixed_step(cfg.method)
    n = cfg.step_count
    h = (cfg.t1 - cfg.t0) / n
    out = []
    k, s = 0, s0
    for tau in times:
        # advance the grid while the next grid point does not overshoot tau
        while k < n and _grid_time(cfg, k + 1, h) <= tau + 1e-12 * max(1.0, abs(tau)):
            s = step(f, _grid_time(cfg, k, h), h, s)
            k += 1
        tk = _grid_time(cfg, k, h)
        gap = tau - tk
        if gap <= 1e-12 * max(1.0, abs(tau)):
            out.append((s, stages * k))
        else:
            out.append((step(f, tk, gap, s), stages * (k + 1)))
    return out


def _grid_time(cfg: SolverConfig, k: int, h: float) -> float:
    return cfg.t1 if k == cfg.step_count else cfg.t0 + k * h
