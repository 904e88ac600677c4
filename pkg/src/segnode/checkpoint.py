"""Model checkpoints: a text manifest plus one SGNT file per parameter.

``manifest.txt`` holds ``key=value`` lines in a fixed order::

    format=segnode-checkpoint-1
    kind=segnode
    dtype=float32
    config.branch_channels=8,16,32,64
    ...
    solver.method=rk4
    ...
    param.stem.conv1.weight=p0000.sgnt

Values are written with ``repr`` for floats so a reload is exact.
"""
from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import Union

import numpy as np

from . import tensorio
from .autodiff import ParamStore, Tensor
from .model import NetworkConfig, build_params, make_model
from .ode import SolverConfig

FORMAT = "segnode-checkpoint-1"
MANIFEST = "manifest.txt"


class CheckpointError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, like):
    if isinstance(like, bool):
        if raw not in ("true", "false"):
            raise CheckpointError(f"bad boolean {raw!r}")
        return raw == "true"
    if isinstance(like, tuple):
        return tuple(int(x) for x in raw.split(",")) if raw else ()
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def write_kv(path: Path, items) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in items:
            fh.write(f"{k}={_fmt(v)}\n")


def read_kv(path: Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _config_from(kv: dict, prefix: str, cls):
    default = cls()
    values = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in kv:
            values[f.name] = _parse(kv[key], getattr(default, f.name))
    return cls(**values)


def save_checkpoint(path: Union[str, os.PathLike], model) -> None:
    """Write ``model`` to directory ``path`` (replaced atomically if present)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        items = [("format", FORMAT), ("kind", model.kind), ("dtype", np.dtype(model.dtype).name)]
        items += [(f"config.{k}", v) for k, v in asdict(model.cfg).items()]
        solver = getattr(model, "solver", None)
        if solver is not None:
            items += [(f"solver.{k}", v) for k, v in asdict(solver).items()]
        for i, (name, t) in enumerate(model.params.items()):
            fname = f"p{i:04d}.sgnt"
            tensorio.save(tmp / fname, t.data)
            items.append((f"param.{name}", fname))
        write_kv(tmp / MANIFEST, items)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path: Union[str, os.PathLike]):
    """Rebuild the model stored in directory ``path``.

    Every tensor must exist in the manifest and match the shape implied by
    the stored network config; a mismatch names the offending tensor.
    """
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise CheckpointError(f"{path} has no {MANIFEST}")
    kv = read_kv(path / MANIFEST)
    if kv.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {kv.get('format')!r}")
    kind = kv.get("kind")
    dtype = np.dtype(kv.get("dtype", "float32"))
    try:
        cfg = _config_from(kv, "config.", NetworkConfig)
        solver = _config_from(kv, "solver.", SolverConfig)
    except ValueError as exc:
        raise CheckpointError(f"invalid config in manifest: {exc}") from exc
    expected = build_params(cfg, kind, seed=0, dtype=dtype)
    stored = {k[len("param."):]: v for k, v in kv.items() if k.startswith("param.")}
    extra = sorted(set(stored) - set(expected.names()))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]}")
    params = ParamStore()
    for name, ref in expected.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        try:
            arr = tensorio.load(path / stored[name])
        except (OSError, tensorio.TensorFormatError) as exc:
            raise CheckpointError(f"tensor {name}: {exc}") from exc
        if arr.shape != ref.shape:
            raise CheckpointError(f"tensor {name}: shape {arr.shape} does not match "
                                  f"expected {ref.shape}")
        if arr.dtype != dtype:
            raise CheckpointError(f"tensor {name}: dtype {arr.dtype} does not match {dtype}")
        params[name] = Tensor(arr)
    return make_model(kind, cfg, dtype=dtype, solver=solver, params=params)
