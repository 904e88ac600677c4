"""``segnode`` command-line program.

Subcommands: dataset, train, eval, trajectory, gradcheck, bench, replay.
Exit codes: 0 success, 1 runtime error, 2 usage error.  ``SEGNODE_THREADS``
caps the BLAS thread pool.

Every command that writes files also writes ``manifest.txt`` (a RunManifest:
command, fully resolved arguments, seed, artifact list, version).  ``replay``
re-runs a manifest; in deterministic mode (f64, fixed-step solver) the
outputs come out byte-identical.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shlex
import shutil
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, tensorio
from .bench import gradient_triangle, memory_law, parameter_table
from .checkpoint import CheckpointError, load_checkpoint, read_kv, save_checkpoint, write_kv
from .data import DatasetConfig, SynthSample, generate_dataset
from .model import FULL_WIDTHS, NetworkConfig, SegNodeModel, make_model
from .ode import SolverConfig
from .train import TrainConfig, evaluate, train, trajectory_eval, trajectory_predictions

log = logging.getLogger("segnode")

DATASET_MANIFEST = "manifest.txt"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


@contextlib.contextmanager
def _staged_dir(out: Path):
    """Yield a temporary sibling of ``out``; rename it into place on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _resolved_argv(parser: argparse.ArgumentParser, args: argparse.Namespace) -> list[str]:
    """Every option of the subcommand spelled out with its resolved value."""
    argv = [args.command]
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help",):
            continue
        value = getattr(args, action.dest, None)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            if isinstance(value, (list, tuple)):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            argv += [flag, str(value)]
    return argv


def _write_manifest(directory: Path, args, artifacts: Sequence[str], extra=(),
                    name: str = DATASET_MANIFEST) -> None:
    items = [("command", args.command), ("version", __version__), ("seed", getattr(args, "seed", 0)),
             ("argv", shlex.join(args._resolved))]
    items += [(f"arg.{k}", v) for k, v in sorted(vars(args).items())
              if not k.startswith("_") and k not in ("command", "func") and v is not None]
    items += list(extra)
    items += [(f"artifact.{i}", a) for i, a in enumerate(artifacts)]
    write_kv(Path(directory) / name, items)


def _load_dataset(data_dir: Path) -> tuple[list[SynthSample], dict]:
    data_dir = Path(data_dir)
    man = data_dir / DATASET_MANIFEST
    if not man.is_file():
        raise FileNotFoundError(f"{data_dir}: no dataset manifest (run 'segnode dataset' first)")
    kv = read_kv(man)
    if kv.get("command") != "dataset":
        raise ValueError(f"{data_dir} is not a dataset directory")
    count = int(kv["dataset.count"])
    samples = []
    for i in range(count):
        image = tensorio.load(data_dir / f"sample_{i:04d}_image.sgnt").astype(np.float32)
        raw = tensorio.load(data_dir / f"sample_{i:04d}_labels.sgnt")
        labels = raw.astype(np.int64)
        if not np.array_equal(labels, raw):
            raise ValueError(f"sample {i}: non-integer label values")
        samples.append(SynthSample(image, labels))
    return samples, kv


# --------------------------------------------------------------------------
# commands


def cmd_dataset(args) -> int:
    size = (args.size, args.size)
    cfg = DatasetConfig(image_size=size, num_classes=args.classes, sample_count=args.count,
                        seed=args.seed, shapes_per_image=tuple(args.shapes), noise=args.noise)
    samples = generate_dataset(cfg)
    with _staged_dir(args.out) as tmp:
        files = []
        for i, s in enumerate(samples):
            for part, arr in (("image", s.image), ("labels", s.labels.astype(np.float32))):
                fname = f"sample_{i:04d}_{part}.sgnt"
                tensorio.save(tmp / fname, arr)
                files.append(fname)
        extra = [("dataset.count", cfg.sample_count), ("dataset.classes", cfg.num_classes),
                 ("dataset.size", f"{size[0]},{size[1]}")]
        _write_manifest(tmp, args, files, extra)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _network_config(args, num_classes: int, size) -> NetworkConfig:
    widths = FULL_WIDTHS if args.full_widths else tuple(args.widths)
    if args.full_widths:
        warnings.warn("full-scale widths make every step many times slower than the desk config",
                      stacklevel=2)
    return NetworkConfig(branch_channels=widths, num_classes=num_classes,
                         modules_in_dynamics=args.modules, baseline_repeats=args.repeats,
                         blocks_per_branch=args.blocks, input_size=size,
                         time_channel=args.time_channel)


def cmd_train(args) -> int:
    if args.grad is None:
        args.grad = "adjoint" if args.model == "segnode" else "direct"
        args._resolved = _resolved_argv(args._parser, args)
    if args.model == "baseline" and args.grad == "adjoint":
        raise UsageError("--grad adjoint needs --model segnode (the baseline has no ODE)")
    if args.grad == "direct" and args.model == "segnode" and args.solver == "dopri5":
        raise UsageError("--grad direct needs a fixed-step solver (euler or rk4)")
    samples, kv = _load_dataset(args.data)
    size = tuple(int(x) for x in kv["dataset.size"].split(","))
    net = _network_config(args, int(kv["dataset.classes"]), size)
    solver = SolverConfig(method=args.solver, step_count=args.solver_steps, rtol=args.rtol,
                          atol=args.atol)
    dtype = np.float64 if args.dtype == "f64" else np.float32
    model = make_model(args.model, net, seed=args.seed, dtype=dtype, solver=solver)
    overrides = dict(total_steps=args.steps, batch_size=args.batch_size, seed=args.seed,
                     grad_mode=args.grad)
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.clip is not None:
        overrides["clip_norm"] = args.clip
    tcfg = TrainConfig.for_model(args.model, **overrides)
    history = train(model, samples, tcfg, log_every=args.log_every) if args.steps else []
    with _staged_dir(args.out) as tmp:
        _atomic_write(tmp / "history.txt", "".join(r.format() + "\n" for r in history))
        save_checkpoint(tmp / "checkpoint", model)
        extra = [(f"train.{k}", v) for k, v in tcfg.to_dict().items()]
        _write_manifest(tmp, args, ["history.txt", "checkpoint"], extra)
    if history:
        print(f"trained {args.model} for {len(history)} steps: loss {history[0].loss:.4f} -> "
              f"{history[-1].loss:.4f}")
    else:
        print("steps=0: wrote the initial parameters")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples, _ = _load_dataset(args.data)
    report = evaluate(model, samples)
    text = report.format()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval_report.txt"
    _atomic_write(out, text)
    _write_manifest(out.parent, args, [out.name], name=out.stem + ".manifest.txt")
    sys.stdout.write(text)
    return 0


def cmd_trajectory(args) -> int:
    times = args.times
    if any(b < a for a, b in zip(times, times[1:])) or (times and (times[0] < 0 or times[-1] > 1)):
        raise UsageError("--times must be ascending values in [0, 1]")
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, SegNodeModel):
        raise UsageError("trajectory needs a segnode checkpoint")
    samples, _ = _load_dataset(args.data)
    rows = trajectory_eval(model, samples, times)
    preds, _ = trajectory_predictions(model, samples[0].image[None], times)
    with _staged_dir(args.out) as tmp:
        table = "".join(r.format() + "\n" for r in rows)
        _atomic_write(tmp / "trajectory.txt", table)
        files = ["trajectory.txt"]
        for i, p in enumerate(preds):
            fname = f"labels_t{i:02d}.sgnt"
            tensorio.save(tmp / fname, p[0].astype(np.float32))
            files.append(fname)
        _write_manifest(tmp, args, files)
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(args) -> int:
    if args.precision != "f64":
        raise UsageError("gradient checks run in f64 only")
    res = gradient_triangle(steps=args.steps, samples=args.samples, seed=args.seed, eps=args.eps)
    text = res.format()
    sys.stdout.write(text)
    if args.out:
        with _staged_dir(args.out) as tmp:
            _atomic_write(tmp / "gradcheck.txt", text)
            _write_manifest(tmp, args, ["gradcheck.txt"])
    if res.max_error > args.tolerance:
        a, d, f = res.worst_values
        print(f"FAIL: max relative error {res.max_error:.3e} > tolerance {args.tolerance:g}; "
              f"worst coordinate {res.worst_index} ({res.worst_name}): adjoint={a:.6e} "
              f"direct={d:.6e} fd={f:.6e}", file=sys.stderr)
        return 1
    print(f"OK: max relative error {res.max_error:.3e} <= {args.tolerance:g}")
    return 0


def cmd_bench(args) -> int:
    widths = FULL_WIDTHS if args.full_widths else tuple(args.widths)
    cfg = NetworkConfig(branch_channels=widths, input_size=(args.size, args.size))
    lines = [row.format() for row in memory_law(cfg, args.steps, args.batch_size, args.solver,
                                                args.seed)]
    counts = parameter_table(cfg)
    lines.append(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in counts.items()))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with _staged_dir(args.out) as tmp:
            _atomic_write(tmp / "bench.txt", text)
            _write_manifest(tmp, args, ["bench.txt"])
    return 0


def cmd_replay(args) -> int:
    kv = read_kv(args.manifest)
    if "argv" not in kv:
        raise UsageError(f"{args.manifest} is not a run manifest")
    argv = shlex.split(kv["argv"])
    if argv and argv[0] == "replay":
        raise UsageError("refusing to replay a replay")
    if args.out:
        flag = "--out"
        if flag in argv:
            argv[argv.index(flag) + 1] = args.out
        else:
            argv += [flag, args.out]
    return main(argv)


# --------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--widths", type=_int_list, default=[8, 16, 32, 64],
                   help="branch channel widths (desk default 8,16,32,64)")
    p.add_argument("--full-widths", action="store_true",
                   help="use 48,96,192,384 channels (slow)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segnode", description=__doc__.split("\n")[0])
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate a synthetic shape dataset")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=_int_list, default=[1, 3], help="min,max shapes per image")
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train SegNode or the residual baseline")
    p.add_argument("--model", choices=["segnode", "baseline"], default="segnode")
    p.add_argument("--grad", choices=["adjoint", "direct"], default=None,
                   help="default: adjoint for segnode, direct for baseline")
    p.add_argument("--solver", choices=["euler", "rk4", "dopri5"], default="rk4")
    p.add_argument("--solver-steps", type=int, default=8)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-4)
    p.add_argument("--modules", type=int, default=2, help="modules inside the dynamics")
    p.add_argument("--repeats", type=int, default=6, help="baseline module repeats")
    p.add_argument("--blocks", type=int, default=2, help="residual units per branch")
    p.add_argument("--time-channel", action="store_true", help="feed t to the dynamics")
    _add_model_flags(p)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=None, help="override the recipe learning rate")
    p.add_argument("--clip", type=float, default=None, help="override the gradient-norm cap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU report of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trajectory", help="error of partial solves at several times")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--times", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("gradcheck", help="adjoint vs direct vs finite differences")
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="activation memory and parameter counts")
    p.add_argument("--steps", type=_int_list, default=[4, 8, 16, 32])
    p.add_argument("--solver", choices=["euler", "rk4"], default="rk4")
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write outputs here instead")
    p.set_defaults(func=cmd_replay)
    return parser


def _thread_limit():
    raw = os.environ.get("SEGNODE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"SEGNODE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    args._parser = sub
    args._resolved = _resolved_argv(sub, args)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"segnode {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, CheckpointError, FloatingPointError,
            RuntimeError) as exc:
        print(f"segnode {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
