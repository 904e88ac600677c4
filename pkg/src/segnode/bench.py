"""Measurements behind the ``bench`` and ``gradcheck`` commands."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, finite_diff_grad
from .data import DatasetConfig, generate_dataset, stack
from .memory import MemoryReport, memory_probe
from .model import NetworkConfig, make_model, analytic_param_count, param_count
from .ode import SolverConfig
from .train import cross_entropy_loss, loss_and_grads

TINY_CONFIG = NetworkConfig(branch_channels=(4, 4, 4, 4), num_classes=2, modules_in_dynamics=1,
                            blocks_per_branch=1, input_size=(16, 16), norm_groups=2)


@dataclass
class MemoryRow:
    steps: int
    adjoint: MemoryReport
    direct: MemoryReport

    def format(self) -> str:
        a, d = self.adjoint, self.direct
        return (f"steps={self.steps} adjoint_peak_bytes={a.peak_activation_bytes} "
                f"direct_peak_bytes={d.peak_activation_bytes} adjoint_nfe={a.nfe} "
                f"direct_nfe={d.nfe} adjoint_seconds={a.wall_time:.3f} "
                f"direct_seconds={d.wall_time:.3f}")


def memory_law(cfg: NetworkConfig, step_counts: Sequence[int], batch_size: int = 2,
               method: str = "rk4", seed: int = 0) -> list[MemoryRow]:
    """Peak logical activation bytes of one training step, adjoint vs direct."""
    data = generate_dataset(DatasetConfig(image_size=cfg.input_size, num_classes=cfg.num_classes,
                                          sample_count=batch_size, seed=seed))
    images, labels = stack(data)
    model = make_model("segnode", cfg, seed=seed)
    pbytes = model.params.nbytes()
    rows = []
    for n in step_counts:
        model.solver = SolverConfig(method=method, step_count=n)
        reports = {}
        for mode in ("adjoint", "direct"):
            def run(mode=mode):
                res = loss_and_grads(model, images, labels, mode)
                return res.nfe_forward + res.nfe_backward
            reports[mode] = memory_probe(run, pbytes)
        rows.append(MemoryRow(n, reports["adjoint"], reports["direct"]))
    return rows


def parameter_table(cfg: NetworkConfig) -> dict:
    """Counted and closed-form totals for both models, plus the reduction in percent."""
    seg = param_count(make_model("segnode", cfg))["total"]
    base = param_count(make_model("baseline", cfg))["total"]
    return {
        "segnode": seg,
        "baseline": base,
        "segnode_analytic": analytic_param_count(cfg, "segnode")["total"],
        "baseline_analytic": analytic_param_count(cfg, "baseline")["total"],
        "reduction_percent": 100.0 * (1.0 - seg / base),
    }


def perturbed_tiny_model(steps: int = 8, scale: float = 0.05, seed: int = 0,
                         cfg: Optional[NetworkConfig] = None):
    """Tiny f64 SegNode with its zero-initialised weights and norm scales nudged.

    A fresh network has f == 0, for which every gradient check passes
    trivially; the nudge gives a mild, non-trivial flow.
    """
    cfg = cfg or TINY_CONFIG
    model = make_model("segnode", cfg, seed=seed, dtype=np.float64,
                       solver=SolverConfig("rk4", step_count=steps))
    rng = np.random.default_rng([seed, 1])
    for name, t in model.params.items():
        if not t.data.any() or name.endswith("gamma"):
            t.data[...] += rng.standard_normal(t.shape) * scale
    images = rng.standard_normal((2, cfg.in_channels, *cfg.input_size))
    labels = rng.integers(0, cfg.num_classes, (2, *cfg.input_size))
    return model, images, labels


@dataclass
class GradCheckResult:
    adjoint_vs_direct: float
    adjoint_vs_fd: float
    direct_vs_fd: float
    worst_index: int
    worst_name: str
    worst_values: tuple  # (adjoint, direct, finite difference)
    samples: int
    params: int

    @property
    def max_error(self) -> float:
        return max(self.adjoint_vs_direct, self.adjoint_vs_fd, self.direct_vs_fd)

    def format(self) -> str:
        a, d, f = self.worst_values
        return (f"params={self.params} samples={self.samples}\n"
                f"adjoint_vs_direct={self.adjoint_vs_direct!r}\n"
                f"adjoint_vs_fd={self.adjoint_vs_fd!r}\n"
                f"direct_vs_fd={self.direct_vs_fd!r}\n"
                f"worst_index={self.worst_index} worst_name={self.worst_name} "
                f"adjoint={a!r} direct={d!r} fd={f!r}\n")


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def gradient_triangle(steps: int = 8, samples: int = 200, seed: int = 0, eps: float = 1e-5,
                      scale: float = 0.05) -> GradCheckResult:
    """Adjoint vs direct over every parameter, both vs central differences on a sample."""
    model, images, labels = perturbed_tiny_model(steps, scale, seed)
    ga = model.params.flat_grad(loss_and_grads(model, images, labels, "adjoint").grads)
    gd = model.params.flat_grad(loss_and_grads(model, images, labels, "direct").grads)
    rng = np.random.default_rng([seed, 2])
    idx = np.sort(rng.choice(model.params.size(), min(samples, model.params.size()), replace=False))

    def objective(_):
        return cross_entropy_loss(model.forward(Tensor(images)), labels).item()

    fd_map = finite_diff_grad(objective, model.params, eps, idx)
    fd = np.array([fd_map[int(i)] for i in idx])
    dev = np.abs(ga[idx] - fd) + np.abs(gd[idx] - fd)
    worst = int(idx[int(np.argmax(dev))])
    offsets = np.cumsum([0] + [t.size for t in model.params.tensors()])
    name = model.params.names()[int(np.searchsorted(offsets, worst, side="right")) - 1]
    return GradCheckResult(
        adjoint_vs_direct=_rel(ga, gd),
        adjoint_vs_fd=_rel(ga[idx], fd),
        direct_vs_fd=_rel(gd[idx], fd),
        worst_index=worst,
        worst_name=name,
        worst_values=(float(ga[worst]), float(gd[worst]), float(fd_map[worst])),
        samples=len(idx),
        params=model.params.size(),
    )
