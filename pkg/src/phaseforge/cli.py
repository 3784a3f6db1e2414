"""Command-line entry point.

Subcommands: synth, simulate, train, eval, reconstruct, inspect, selftest.
Every run resolves its configuration from dataclass defaults, then an
optional JSON config file (--config, sections "optics"/"model"/"train"/
"solver"), then explicit flags (flags win), and writes the fully resolved
configuration as run_config.json next to its outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .data import generate_dataset, load_dataset, load_image_file, synth_complex, MODES, SOURCES
from .errors import PhaseForgeError, ConfigurationError, DataError
from .fields import ComplexField
from .network import ModelConfig, init_state
from .optics import OpticsConfig, forward_measure, SCALE_MODES
from .reporting import (
    checkpoint_digest,
    evaluate_classical,
    evaluate_network,
    file_digest,
    inspect_features,
    save_report,
)
from .selfcheck import run_selftest
from .solvers import METHODS, CONSTRAINTS, SolverConfig, solve
from .training import TrainConfig, load_checkpoint, train


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage failures exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dataclass_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # pragma: no cover
            out[f.name] = f.default_factory()
    return out


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.isfile(path):
        raise DataError(f"config file not found: {path}")
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return payload


def _resolve_section(cls, section_name: str, config: dict, args, mapping: dict[str, str]) -> dict:
    """defaults <- config file section <- explicit flags."""
    resolved = _dataclass_defaults(cls)
    section = config.get(section_name, {})
    if not isinstance(section, dict):
        raise ConfigurationError(f"config section {section_name!r} must be a JSON object")
    for key, value in section.items():
        if key not in resolved:
            raise ConfigurationError(
                f"unknown key {key!r} in config section {section_name!r}"
            )
        resolved[key] = value
    for field_name, dest in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            resolved[field_name] = value
    return resolved


OPTICS_MAP = {
    "n": "n",
    "m": "m",
    "wavelength": "wavelength",
    "pitch": "pitch",
    "distance": "distance",
    "bit_depth": "bit_depth",
    "gain": "gain",
    "defocus": "defocus",
}
MODEL_MAP = {
    "c": "c",
    "scales": "scales",
    "unwind": "unwind",
    "g_depth": "g_depth",
    "g_width": "g_width",
    "scale_mode": "scale_mode",
    "dtype": "dtype",
    "seed": "model_seed",
}
TRAIN_MAP = {
    "learning_rate": "lr",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "tv_weight": "tv_weight",
    "seed": "train_seed",
    "checkpoint_every": "checkpoint_every",
    "clip_norm": "clip_norm",
    "fixed_noise": "fixed_noise",
}
SOLVER_MAP = {
    "method": "method",
    "iterations": "iters",
    "restarts": "restarts",
    "beta": "beta",
    "t0": "t0",
    "mu_max": "mu_max",
    "constraint": "constraint",
    "support_size": "support",
    "seed": "solver_seed",
}


def _add_optics_flags(p):
    g = p.add_argument_group("optics")
    g.add_argument("--n", type=int, help="object grid size (default: 128)")
    g.add_argument("--m", type=int, help="oversampled sensor grid size (default: 768)")
    g.add_argument("--wavelength", type=float, help="illumination wavelength in m (default: 632.8e-9)")
    g.add_argument("--pitch", type=float, help="sample pitch in m (default: 8e-6)")
    g.add_argument("--distance", type=float, help="defocus distance in m (default: 30e-3)")
    g.add_argument("--bit-depth", dest="bit_depth", type=int, help="sensor bit depth (default: 12)")
    g.add_argument("--gain", type=float, help="sensor gain (default: 1.0)")
    g.add_argument(
        "--defocus",
        dest="defocus",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="apply the defocus kernel before measuring (default: on)",
    )


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--c", type=int, help="base channel count (default: 64; desk runs use 8)")
    g.add_argument("--scales", type=int, help="resolution levels (default: 3)")
    g.add_argument("--unwind", type=int, help="unwinding layers per hybrid block (default: 5)")
    g.add_argument("--g-depth", dest="g_depth", type=int, help="convolutions per unwinding correction (default: 8)")
    g.add_argument("--g-width", dest="g_width", type=int, help="hidden width of the correction convs (default: 32)")
    g.add_argument("--scale-mode", dest="scale_mode", choices=SCALE_MODES, help="measurement rescaling mode (default: box-filter-decimate)")
    g.add_argument("--dtype", choices=("float64", "float32"), help="parameter dtype (default: float64)")
    g.add_argument("--model-seed", dest="model_seed", type=int, help="parameter init seed (default: 0)")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-4)")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default: 24)")
    g.add_argument("--epochs", type=int, help="training epochs (default: 160)")
    g.add_argument("--tv-weight", dest="tv_weight", type=float, help="total-variation weight (default: 0.1)")
    g.add_argument("--train-seed", dest="train_seed", type=int, help="shuffle/noise seed (default: 0)")
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="checkpoint cadence in epochs, 0 = final only (default: 0)")
    g.add_argument("--clip-norm", dest="clip_norm", type=float, help="global gradient-norm clip (default: 10.0)")
    g.add_argument("--no-clip", dest="no_clip", action="store_true", help="disable gradient clipping")
    g.add_argument(
        "--fixed-noise",
        dest="fixed_noise",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="draw one input-noise image per sample instead of per forward (default: off)",
    )


def _add_solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--method", choices=METHODS, help="classical solver (default: hio)")
    g.add_argument("--iters", type=int, help="iterations per restart (default: 1500)")
    g.add_argument("--restarts", type=int, help="random restarts (default: 3)")
    g.add_argument("--beta", type=float, help="feedback/relaxation parameter (default: 0.9 hio, 0.87 raar)")
    g.add_argument("--t0", type=float, help="wirtinger-flow step-size ramp constant (default: 330)")
    g.add_argument("--mu-max", dest="mu_max", type=float, help="wirtinger-flow step-size cap (default: 0.4)")
    g.add_argument("--constraint", choices=CONSTRAINTS, help="object-domain constraint (default: none)")
    g.add_argument("--support", type=int, help="object support size when the input is a raw array")
    g.add_argument("--solver-seed", dest="solver_seed", type=int, help="restart init seed (default: 0)")


def _common_parent() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags override it")
    common.add_argument(
        "--threads",
        type=int,
        help="BLAS/FFT worker threads (default: env PHASEFORGE_THREADS, else all cores)",
    )
    return common


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("PHASEFORGE_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigurationError(f"PHASEFORGE_THREADS={env!r} is not an integer")
    if threads is None:
        return
    if threads < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {threads}")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=threads)


def _write_run_config(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset_optics(data_dir: str) -> tuple[dict, OpticsConfig]:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return manifest, OpticsConfig(**manifest["optics"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    config = _load_config_file(args.config)
    optics = OpticsConfig(**_resolve_section(OpticsConfig, "optics", config, args, OPTICS_MAP))
    generate_dataset(
        args.out,
        optics,
        mode=args.mode,
        train_count=args.count,
        test_count=args.test_count,
        source=args.source,
        image_dir=args.image_dir,
        seed=args.seed,
    )
    _write_run_config(
        args.out,
        {
            "command": "synth",
            "paths": {"out": args.out, "image_dir": args.image_dir},
            "optics": optics.to_dict(),
            "data": {
                "mode": args.mode,
                "source": args.source,
                "train_count": args.count,
                "test_count": args.test_count,
                "seed": args.seed,
            },
        },
    )
    print(f"wrote {args.count} train + {args.test_count} test samples to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    config = _load_config_file(args.config)
    optics = OpticsConfig(**_resolve_section(OpticsConfig, "optics", config, args, OPTICS_MAP))
    raw_a = load_image_file(args.image, optics.n)
    raw_b = load_image_file(args.image_b, optics.n) if args.image_b else None
    field = synth_complex(raw_a, raw_b, args.mode)
    measurement = forward_measure(field, optics)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "sample.gt.npy"), np.stack([field.re, field.im], axis=-1))
    np.save(os.path.join(args.out, "sample.meas.npy"), measurement.data)
    _write_run_config(
        args.out,
        {
            "command": "simulate",
            "paths": {"image": args.image, "image_b": args.image_b, "out": args.out},
            "optics": optics.to_dict(),
            "data": {"mode": args.mode},
        },
    )
    print(
        f"measured {args.image}: saturated fraction "
        f"{measurement.saturated_fraction:.4f}, wrote {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    manifest, optics = _dataset_optics(args.data)
    model_kwargs = _resolve_section(ModelConfig, "model", config, args, MODEL_MAP)
    model_kwargs["n"] = optics.n
    model_kwargs["m"] = optics.m
    cfg = ModelConfig(**model_kwargs)
    train_kwargs = _resolve_section(TrainConfig, "train", config, args, TRAIN_MAP)
    if args.no_clip:
        train_kwargs["clip_norm"] = None
    tcfg = TrainConfig(**train_kwargs)
    _, train_samples = load_dataset(args.data, split="train")
    _, val_samples = load_dataset(args.data, split="test")
    if not train_samples:
        raise DataError(f"dataset {args.data} has no train split")
    state = init_state(cfg)
    _write_run_config(
        args.out,
        {
            "command": "train",
            "paths": {"data": args.data, "out": args.out},
            "optics": optics.to_dict(),
            "model": cfg.to_dict(),
            "train": tcfg.to_dict(),
        },
    )
    history = train(state, train_samples, val_samples, tcfg, out_dir=args.out,
                    log=None if args.quiet else print)
    last = history[-1]
    print(
        f"finished epoch {last['epoch']}: loss {last['train_loss']:.6f}, "
        f"val phase PSNR {last['val_psnr']:.3f} dB; outputs in {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    manifest, optics = _dataset_optics(args.data)
    _, samples = load_dataset(args.data, split=args.split, verify=args.verify)
    if not samples:
        raise DataError(f"dataset {args.data} has no {args.split} split")
    provenance = {
        "dataset_manifest_sha256": file_digest(os.path.join(args.data, "manifest.json"))
    }
    run_payload = {
        "command": "eval",
        "paths": {"data": args.data, "out": args.out, "checkpoint": args.checkpoint},
        "split": args.split,
        "optics": optics.to_dict(),
    }
    if args.checkpoint:
        state, _ = load_checkpoint(args.checkpoint)
        if state.config.n != optics.n or state.config.m != optics.m:
            raise ConfigurationError(
                f"checkpoint geometry n={state.config.n}, m={state.config.m} does not "
                f"match dataset n={optics.n}, m={optics.m}"
            )
        provenance["checkpoint_sha256"] = checkpoint_digest(args.checkpoint)
        report = evaluate_network(
            state, samples, noise_seed=args.noise_seed, provenance=provenance
        )
        run_payload["model"] = state.config.to_dict()
        run_payload["noise_seed"] = args.noise_seed
    else:
        solver_kwargs = _resolve_section(SolverConfig, "solver", config, args, SOLVER_MAP)
        scfg = SolverConfig(**solver_kwargs)
        provenance["solver"] = scfg.to_dict()
        report = evaluate_classical(scfg, samples, provenance=provenance)
        run_payload["solver"] = scfg.to_dict()
    os.makedirs(args.out, exist_ok=True)
    save_report(report, os.path.join(args.out, "report.json"), os.path.join(args.out, "report.csv"))
    _write_run_config(args.out, run_payload)
    for key, value in report.aggregate.items():
        print(f"{key}: {value:.6f}")
    return 0


def cmd_reconstruct(args) -> int:
    config = _load_config_file(args.config)
    if not os.path.isfile(args.meas):
        raise DataError(f"measurement file not found: {args.meas}")
    manifest_path = os.path.join(os.path.dirname(os.path.abspath(args.meas)), "manifest.json")
    if os.path.isfile(manifest_path) and "optics" not in config and args.n is None:
        with open(manifest_path) as fh:
            optics = OpticsConfig(**json.load(fh)["optics"])
    else:
        optics = OpticsConfig(**_resolve_section(OpticsConfig, "optics", config, args, OPTICS_MAP))
    data = np.load(args.meas)
    if data.shape != (optics.m, optics.m):
        raise DataError(
            f"measurement shape {data.shape} does not match optics m={optics.m}; "
            "pass --m/--n or a config file with the right geometry"
        )
    from .optics import IntensityMeasurement

    measurement = IntensityMeasurement(np.asarray(data, dtype=np.uint16), optics)
    solver_kwargs = _resolve_section(SolverConfig, "solver", config, args, SOLVER_MAP)
    scfg = SolverConfig(**solver_kwargs)
    result = solve(measurement, scfg)
    os.makedirs(args.out, exist_ok=True)
    np.save(
        os.path.join(args.out, "estimate.npy"),
        np.stack([result.field.re, result.field.im], axis=-1),
    )
    with open(os.path.join(args.out, "residuals.csv"), "w") as fh:
        fh.write("iteration,residual\n")
        for i, r in enumerate(result.residuals):
            fh.write(f"{i},{r!r}\n")
    _write_run_config(
        args.out,
        {
            "command": "reconstruct",
            "paths": {"meas": args.meas, "out": args.out},
            "optics": optics.to_dict(),
            "solver": scfg.to_dict(),
        },
    )
    print(
        f"{scfg.method} finished: final residual {result.residual:.6e} "
        f"(restart {result.restart_index}); outputs in {args.out}"
    )
    return 0


def cmd_inspect(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    _, samples = load_dataset(args.data, split=args.split)
    if not samples:
        raise DataError(f"dataset {args.data} has no {args.split} split")
    if args.id:
        matches = [s for s in samples if s.id == args.id]
        if not matches:
            raise DataError(f"sample id {args.id!r} not found in {args.data}")
        sample = matches[0]
    else:
        sample = samples[0]
    sidecar = inspect_features(state, sample, args.out, noise_seed=args.noise_seed)
    _write_run_config(
        args.out,
        {
            "command": "inspect",
            "paths": {"checkpoint": args.checkpoint, "data": args.data, "out": args.out},
            "sample_id": sample.id,
            "noise_seed": args.noise_seed,
            "model": state.config.to_dict(),
        },
    )
    print(f"wrote {len(sidecar['scales'])} feature maps for {sample.id} to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    ok = run_selftest(seed=args.seed, full_model=not args.skip_full_model)
    if not ok:
        print("phaseforge: error: selftest failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="phaseforge", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    common = _common_parent()

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--mode", choices=MODES, default="phase-only", help="complex-field construction mode (default: phase-only)")
    p.add_argument("--source", choices=SOURCES, default="builtin-shapes", help="raw image source (default: builtin-shapes)")
    p.add_argument("--image-dir", dest="image_dir", help="directory of images for the image-directory source")
    p.add_argument("--count", type=int, default=16, help="training samples (default: 16)")
    p.add_argument("--test-count", dest="test_count", type=int, default=4, help="test samples (default: 4)")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default: 0)")
    _add_optics_flags(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("simulate", parents=[common], help="measure one image through the forward model")
    p.add_argument("--image", required=True, help="input image file")
    p.add_argument("--image-b", dest="image_b", help="second image for uncorrelated mode")
    p.add_argument("--mode", choices=MODES, default="correlated", help="complex-field construction mode (default: correlated)")
    p.add_argument("--out", required=True, help="output directory")
    _add_optics_flags(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train the network on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--out", required=True, help="run directory for checkpoints and the loss curve")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a classical solver on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split (default: test)")
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=0, help="network input-noise seed (default: 0)")
    p.add_argument("--verify", action="store_true", help="re-derive every measurement from its ground truth first")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--checkpoint", help="trained network checkpoint directory")
    target.add_argument("--method", choices=METHODS, help="classical solver to evaluate instead")
    _add_solver_flags_for_eval(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("reconstruct", parents=[common], help="run a classical solver on one measurement")
    p.add_argument("--meas", required=True, help="measurement NPY file (uint16, M x M)")
    p.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p)
    _add_optics_flags(p)
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("inspect", parents=[common], help="dump per-scale attention feature maps")
    p.add_argument("--checkpoint", required=True, help="trained network checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split (default: test)")
    p.add_argument("--id", help="sample id (default: first sample of the split)")
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=0, help="network input-noise seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("selftest", parents=[common], help="run gradient and projection self-checks")
    p.add_argument("--seed", type=int, default=0, help="randomization seed (default: 0)")
    p.add_argument("--skip-full-model", dest="skip_full_model", action="store_true", help="skip the full-model gradient spot check")
    p.set_defaults(handler=cmd_selftest)

    return parser


def _add_solver_flags_for_eval(p) -> None:
    # eval exposes the solver knobs except --method, which lives in the
    # checkpoint/method exclusive group.
    g = p.add_argument_group("solver")
    g.add_argument("--iters", type=int, help="iterations per restart (default: 1500)")
    g.add_argument("--restarts", type=int, help="random restarts (default: 3)")
    g.add_argument("--beta", type=float, help="feedback/relaxation parameter (default: 0.9 hio, 0.87 raar)")
    g.add_argument("--t0", type=float, help="wirtinger-flow step-size ramp constant (default: 330)")
    g.add_argument("--mu-max", dest="mu_max", type=float, help="wirtinger-flow step-size cap (default: 0.4)")
    g.add_argument("--constraint", choices=CONSTRAINTS, help="object-domain constraint (default: none)")
    g.add_argument("--support", type=int, help="object support size when the input is a raw array")
    g.add_argument("--solver-seed", dest="solver_seed", type=int, help="restart init seed (default: 0)")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code else 0
    try:
        _apply_threads(args.threads)
        return args.handler(args)
    except (PhaseForgeError, OSError, ValueError) as exc:
        print(f"phaseforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
