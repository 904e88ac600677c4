"""SegNode and its discrete residual baseline.

Both networks share the same stem, branch projection and segmentation
heads.  The body differs: SegNode integrates a shared multi-resolution
dynamics function with an ODE solver, the baseline stacks independent
copies of the same module as residual blocks.

Parameter names are stable across the two models (``body.m{k}...`` for the
k-th module), so weights can be copied between them by name.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .nn import bilinear_resize, conv2d, conv_output_size, group_norm, he_normal
from .ode import OdeState, SolverConfig, SolveStats, integrate

NUM_BRANCHES = 4


@dataclass(frozen=True)
class NetworkConfig:
    branch_channels: tuple = (8, 16, 32, 64)
    num_classes: int = 4
    modules_in_dynamics: int = 2
    baseline_repeats: int = 6
    blocks_per_branch: int = 2
    input_size: tuple = (64, 64)
    in_channels: int = 3
    norm_groups: int = 8
    norm_eps: float = 1e-5
    time_channel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branch_channels", tuple(int(c) for c in self.branch_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.branch_channels) != NUM_BRANCHES or min(self.branch_channels) < 1:
            raise ValueError("branch_channels must be 4 positive integers")
        for c in self.branch_channels:
            if c % self.norm_groups:
                raise ValueError(f"norm_groups={self.norm_groups} does not divide {c} channels")
        if self.num_classes < 1 or self.modules_in_dynamics < 1 or self.baseline_repeats < 1:
            raise ValueError("num_classes, modules_in_dynamics and baseline_repeats must be >= 1")
        if self.blocks_per_branch < 1:
            raise ValueError("blocks_per_branch must be >= 1")
        h, w = self.input_size
        if h % 4 or w % 4:
            raise ValueError(f"input size {self.input_size} must be divisible by 4")

    def branch_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_size[0] // 4, self.input_size[1] // 4
        sizes = [(h, w)]
        for _ in range(NUM_BRANCHES - 1):
            h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        return asdict(self)


FULL_WIDTHS = (48, 96, 192, 384)


# --------------------------------------------------------------------------
# parameter layout


def _conv(name, c_in, c_out, k, zero=False):
    yield f"{name}.weight", (c_out, c_in, k, k), "zeros" if zero else "he_normal"
    yield f"{name}.bias", (c_out,), "zeros"


def _norm(name, c):
    yield f"{name}.gamma", (c,), "ones"
    yield f"{name}.beta", (c,), "zeros"


def fusion_pairs() -> Iterator[tuple[int, int]]:
    for j in range(NUM_BRANCHES):
        for i in range(NUM_BRANCHES):
            if i != j:
                yield i, j


def _module_layout(cfg: NetworkConfig, prefix: str):
    ch = cfg.branch_channels
    extra = 1 if cfg.time_channel else 0
    for i, c in enumerate(ch):
        for u in range(cfg.blocks_per_branch):
            p = f"{prefix}.b{i}.u{u}"
            yield from _norm(f"{p}.norm1", c)
            yield from _conv(f"{p}.conv1", c + extra, c, 3)
            yield from _norm(f"{p}.norm2", c)
            yield from _conv(f"{p}.conv2", c, c, 3, zero=True)
    for i, j in fusion_pairs():
        p = f"{prefix}.fuse.{i}to{j}"
        if i < j:
            steps = j - i
            for q in range(steps - 1):
                yield from _conv(f"{p}.conv{q}", ch[i], ch[i], 3)
                yield from _norm(f"{p}.norm{q}", ch[i])
            yield from _conv(f"{p}.conv{steps - 1}", ch[i], ch[j], 3, zero=True)
        else:
            yield from _conv(f"{p}.conv0", ch[i], ch[j], 1, zero=True)


def param_layout(cfg: NetworkConfig, kind: str):
    """Yield ``(name, shape, init_kind)`` for every parameter, in order."""
    if kind not in ("segnode", "baseline"):
        raise ValueError(f"unknown model kind {kind!r}")
    c0 = cfg.branch_channels[0]
    yield from _conv("stem.conv1", cfg.in_channels, c0, 3)
    yield from _norm("stem.norm1", c0)
    yield from _conv("stem.conv2", c0, c0, 3)
    yield from _norm("stem.norm2", c0)
    for i, c in enumerate(cfg.branch_channels):
        for q in range(i):
            yield from _conv(f"proj.b{i}.down{q}.conv", c0, c0, 3)
            yield from _norm(f"proj.b{i}.down{q}.norm", c0)
        yield from _conv(f"proj.b{i}.out", c0, c, 1)
    n_modules = cfg.modules_in_dynamics if kind == "segnode" else cfg.baseline_repeats
    for k in range(n_modules):
        yield from _module_layout(cfg, f"body.m{k}")
    for i, c in enumerate(cfg.branch_channels):
        yield from _conv(f"heads.b{i}", c, cfg.num_classes, 1)


def _name_seed(seed: int, name: str) -> list[int]:
    return [int(seed), zlib.crc32(name.encode())]


def build_params(cfg: NetworkConfig, kind: str, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Initialise parameters.

    Convolutions are He-normal, biases and shifts zero, scales one.  The
    last convolution of every residual unit and of every fusion transform
    starts at zero, so the initial dynamics vanish.  Each tensor is drawn
    from its own generator keyed by (seed, name), so equally named
    parameters agree across models.
    """
    store = ParamStore()
    for name, shape, how in param_layout(cfg, kind):
        if how == "zeros":
            arr = np.zeros(shape)
        elif how == "ones":
            arr = np.ones(shape)
        else:
            arr = he_normal(shape, _name_seed(seed, name))
        store[name] = Tensor(arr.astype(dtype))
    return store


# --------------------------------------------------------------------------
# forward passes


class _Network:
    kind = ""

    def __init__(self, cfg: NetworkConfig, params: Optional[ParamStore] = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else build_params(cfg, self.kind, seed, dtype)

    @property
    def dtype(self):
        return self.params.tensors()[0].dtype

    def _conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        p = self.params
        return conv2d(x, p[name + ".weight"], p[name + ".bias"], stride, padding)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        return group_norm(x, p[name + ".gamma"], p[name + ".beta"], self.cfg.norm_groups,
                          self.cfg.norm_eps)

    def stem_forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h % 4 or w % 4:
            raise ValueError(f"image size {h}x{w} is not divisible by 4")
        if c != self.cfg.in_channels:
            raise ValueError(f"image has {c} channels, network expects {self.cfg.in_channels}")
        x = ad.relu(self._norm("stem.norm1", self._conv("stem.conv1", image, 2, 1)))
        return ad.relu(self._norm("stem.norm2", self._conv("stem.conv2", x, 2, 1)))

    def branch_project(self, x: Tensor) -> OdeState:
        parts = []
        for i in range(NUM_BRANCHES):
            y = x
            for q in range(i):
                base = f"proj.b{i}.down{q}"
                y = ad.relu(self._norm(base + ".norm", self._conv(base + ".conv", y, 2, 1)))
            parts.append(self._conv(f"proj.b{i}.out", y))
        return OdeState(parts)

    def _unit_residual(self, base: str, x: Tensor, t: float) -> Tensor:
        y = ad.relu(self._norm(base + ".norm1", x))
        if self.cfg.time_channel:
            n, _, h, w = y.shape
            y = ad.concat([y, Tensor(np.full((n, 1, h, w), t, dtype=y.dtype))], axis=1)
        y = self._conv(base + ".conv1", y, 1, 1)
        y = ad.relu(self._norm(base + ".norm2", y))
        return self._conv(base + ".conv2", y, 1, 1)

    def module_residual(self, k: int, s: OdeState, t: float = 0.0, fuse: bool = True) -> OdeState:
        """Residual of the k-th multi-resolution module: mod(s) - s.

        Per branch, a chain of pre-activation residual units; then every
        output branch sums the transformed outputs of every input branch.
        The identity term of the fusion is carried as the accumulated unit
        residual, so a module with all-zero parameters returns exact zeros.
        """
        prefix = f"body.m{k}"
        feats, deltas = [], []
        for i, x in enumerate(s.parts):
            delta = None
            y = x
            for u in range(self.cfg.blocks_per_branch):
                r = self._unit_residual(f"{prefix}.b{i}.u{u}", y, t)
                y = y + r
                delta = r if delta is None else delta + r
            feats.append(y)
            deltas.append(delta)
        if not fuse:
            return OdeState(deltas)
        sizes = [p.shape[2:] for p in s.parts]
        out = []
        for j in range(NUM_BRANCHES):
            acc = deltas[j]
            for i in range(NUM_BRANCHES):
                if i == j:
                    continue
                base = f"{prefix}.fuse.{i}to{j}"
                if i < j:
                    z = feats[i]
                    steps = j - i
                    for q in range(steps - 1):
                        z = ad.relu(self._norm(f"{base}.norm{q}", self._conv(f"{base}.conv{q}", z, 2, 1)))
                    z = self._conv(f"{base}.conv{steps - 1}", z, 2, 1)
                else:
                    z = self._conv(f"{base}.conv0", feats[i])
                    z = bilinear_resize(z, *sizes[j])
                acc = acc + z
            out.append(acc)
        res = OdeState(out)
        if res.shapes != s.shapes:
            raise RuntimeError(f"module changed state shapes {s.shapes} -> {res.shapes}")
        return res

    def heads_forward(self, s: OdeState, out_hw: Optional[tuple] = None) -> Tensor:
        out_hw = out_hw or self.cfg.input_size
        h0, w0 = s.parts[0].shape[2:]
        total = None
        for i, x in enumerate(s.parts):
            z = bilinear_resize(self._conv(f"heads.b{i}", x), h0, w0)
            total = z if total is None else total + z
        return bilinear_resize(total, *out_hw)

    def encode(self, image: Tensor) -> OdeState:
        return self.branch_project(self.stem_forward(image))


class SegNodeModel(_Network):
    """Stem, projection, ODE body over the 4-branch state, heads."""

    kind = "segnode"

    def __init__(self, cfg: NetworkConfig, params: Optional[ParamStore] = None, seed: int = 0,
                 dtype=np.float32, solver: Optional[SolverConfig] = None):
        super().__init__(cfg, params, seed, dtype)
        self.solver = solver or SolverConfig()
        self.body_params = self.params.subset("body.")
        self.last_stats: Optional[SolveStats] = None

    def dynamics(self, t: float, s: OdeState) -> OdeState:
        cur, total = s, None
        for k in range(self.cfg.modules_in_dynamics):
            r = self.module_residual(k, cur, t)
            total = r if total is None else OdeState([a + b for a, b in zip(total.parts, r.parts)])
            if k + 1 < self.cfg.modules_in_dynamics:
                cur = OdeState([a + b for a, b in zip(cur.parts, r.parts)])
        return total

    def body_forward(self, s0: OdeState, solver: Optional[SolverConfig] = None) -> OdeState:
        sT, stats = integrate(self.dynamics, s0, solver or self.solver)
        self.last_stats = stats
        return sT

    def forward(self, image: Tensor, solver: Optional[SolverConfig] = None) -> Tensor:
        s0 = self.encode(image)
        return self.heads_forward(self.body_forward(s0, solver), image.shape[2:])


class BaselineModel(_Network):
    """Same pipeline with ``baseline_repeats`` independent residual modules."""

    kind = "baseline"

    def body_forward(self, s: OdeState) -> OdeState:
        for k in range(self.cfg.baseline_repeats):
            r = self.module_residual(k, s)
            s = OdeState([a + b for a, b in zip(s.parts, r.parts)])
        return s

    def forward(self, image: Tensor) -> Tensor:
        s0 = self.encode(image)
        return self.heads_forward(self.body_forward(s0), image.shape[2:])


def make_model(kind: str, cfg: NetworkConfig, seed: int = 0, dtype=np.float32,
               solver: Optional[SolverConfig] = None, params: Optional[ParamStore] = None):
    if kind == "segnode":
        return SegNodeModel(cfg, params, seed, dtype, solver)
    if kind == "baseline":
        return BaselineModel(cfg, params, seed, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# parameter counts


def _component(name: str) -> str:
    return name.split(".", 1)[0]


def param_count(model) -> dict[str, int]:
    """Counted parameters per component (stem, proj, body, heads) and total."""
    counts = {"stem": 0, "proj": 0, "body": 0, "heads": 0}
    for name, t in model.params.items():
        counts[_component(name)] += t.size
    counts["total"] = sum(counts.values())
    return counts


def conv_params(c_in: int, c_out: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def norm_params(c: int) -> int:
    return 2 * c


def analytic_param_count(cfg: NetworkConfig, kind: str) -> dict[str, int]:
    """Closed-form layer sums, independent of the materialised parameters."""
    ch = cfg.branch_channels
    c0 = ch[0]
    stem = conv_params(cfg.in_channels, c0, 3) + conv_params(c0, c0, 3) + 2 * norm_params(c0)
    proj = sum(i * (conv_params(c0, c0, 3) + norm_params(c0)) + conv_params(c0, c, 1)
               for i, c in enumerate(ch))
    extra = 1 if cfg.time_channel else 0
    units = sum(cfg.blocks_per_branch * (2 * norm_params(c) + conv_params(c + extra, c, 3)
                                         + conv_params(c, c, 3)) for c in ch)
    fusion = 0
    for i, j in fusion_pairs():
        if i < j:
            fusion += (j - i - 1) * (conv_params(ch[i], ch[i], 3) + norm_params(ch[i]))
            fusion += conv_params(ch[i], ch[j], 3)
        else:
            fusion += conv_params(ch[i], ch[j], 1)
    n_modules = cfg.modules_in_dynamics if kind == "segnode" else cfg.baseline_repeats
    body = n_modules * (units + fusion)
    heads = sum(conv_params(c, cfg.num_classes, 1) for c in ch)
    return {"stem": stem, "proj": proj, "body": body, "heads": heads,
            "total": stem + proj + body + heads}


def parameter_reduction(cfg: NetworkConfig) -> float:
    """Fractional parameter saving of SegNode relative to the baseline."""
    seg = analytic_param_count(cfg, "segnode")["total"]
    base = analytic_param_count(cfg, "baseline")["total"]
    return 1.0 - seg / base
