"""Command-line entry point: ``sdp-hsi <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checks import gradient_suite
from .experiments import run_toy, toy_dataset, toy_mask_seed, toy_scene_seed
from .optics import Measurement, ShiftSpec, forward_model
from .pipeline import ModelArtifacts, TrainConfig, evaluate, reconstruct, train_stage1, train_stage2
from .plotting import plot_bands, plot_spectra
from .spectral_data import ManifestEntry, load_cube, load_manifest, random_mask, save_cube, save_manifest, save_mask, synthesize_scene


def _load_config(args, stage: int) -> TrainConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    raw["stage"] = stage
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.spim_mode is not None:
        raw["spim_mode"] = args.spim_mode
    # Relative manifest paths are taken relative to the config file.
    base = Path(args.config).parent if args.config else Path.cwd()
    for key in ("train_manifest", "test_manifest"):
        if raw.get(key):
            raw[key] = str((base / raw[key]).resolve())
    return TrainConfig.from_dict(raw)


def _require(value, what: str):
    if not value:
        raise ValueError(f"{what} is required")
    return value


def cmd_simulate(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    spec = ShiftSpec(args.step)
    mask = random_mask(toy_mask_seed(seed), args.size, args.size)
    save_mask(mask, out / "mask.msk")
    entries = []
    for i in range(args.scenes):
        cube = synthesize_scene(toy_scene_seed(seed, i), args.size, args.size, args.bands)
        name = f"scene{i + 1:03d}"
        save_cube(cube, out / f"{name}.hsc")
        np.save(out / f"{name}_meas.npy", forward_model(cube, mask, spec).data)
        entries.append(ManifestEntry(out / f"{name}.hsc", out / "mask.msk", i))
    n_test = args.test_scenes
    if not 0 <= n_test < args.scenes:
        raise ValueError(f"--test-scenes must lie in [0, {args.scenes})")
    save_manifest(entries[: args.scenes - n_test], out / "train.json")
    save_manifest(entries[args.scenes - n_test :], out / "test.json")
    print(f"wrote {args.scenes} scenes ({n_test} test) to {out}")


def cmd_train_stage1(args) -> None:
    config = _load_config(args, 1)
    manifest = load_manifest(_require(config.train_manifest, "train_manifest"))
    model = train_stage1(manifest, config)
    model.save(_require(args.out, "--out"))
    print(f"stage 1 done: final loss {model.losses['stage1'][-1]:.6g} -> {args.out}")


def cmd_train_stage2(args) -> None:
    config = _load_config(args, 2)
    stage1 = ModelArtifacts.load(_require(args.stage1, "--stage1"))
    if args.spim_mode is not None and config.spim_mode != stage1.arch.spim_mode:
        raise ValueError(f"--spim-mode {config.spim_mode} differs from the stage-1 model ({stage1.arch.spim_mode})")
    manifest = load_manifest(_require(config.train_manifest, "train_manifest"))
    model = train_stage2(stage1, manifest, config)
    model.save(_require(args.out, "--out"))
    print(f"stage 2 done: diffusion loss {model.losses['stage2_diffusion'][-1]:.6g} -> {args.out}")


def cmd_reconstruct(args) -> None:
    model = ModelArtifacts.load(_require(args.model, "--model"))
    data = np.load(_require(args.measurement, "--measurement"))
    if data.ndim != 2:
        raise ValueError(f"measurement must be 2-D, got shape {data.shape}")
    expected = None
    if args.width is not None:
        expected = model.shift_spec().measurement_width(args.width, model.bands)
    if expected is not None and data.shape[1] != expected:
        raise ValueError(f"measurement width {data.shape[1]} != {expected} for scene width {args.width}")
    cube = reconstruct(Measurement(data), None, model, args.seed or 0)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    save_cube(cube, out / "reconstruction.hsc")
    print(f"reconstructed {cube.height}x{cube.width}x{cube.bands} -> {out / 'reconstruction.hsc'}")


def cmd_evaluate(args) -> None:
    model = ModelArtifacts.load(_require(args.model, "--model"))
    path = args.manifest
    if path is None and args.config:
        path = _load_config(args, 1).test_manifest
    manifest = load_manifest(_require(path, "--manifest or config test_manifest"), split="test")
    report = evaluate(model, manifest, args.seed or 0)
    if args.out:
        report.save(args.out)
    print(report.to_table(), end="")


def cmd_plot(args) -> None:
    cube = load_cube(_require(args.cube, "--cube"))
    out = Path(_require(args.out, "--out"))
    bands = [int(b) for b in args.bands.split(",")] if args.bands else list(range(min(4, cube.bands)))
    paths = plot_bands(cube, bands, out)
    if args.pixel:
        r, c = (int(v) for v in args.pixel.split(","))
        plot_spectra(cube, (r, c), out / f"spectrum_{r}_{c}.png")
    print(f"wrote {len(paths)} band images to {out}")


def cmd_grad_check(args) -> None:
    reports = gradient_suite(args.seed or 0)
    ok = True
    for name, rep in reports.items():
        passed = rep.passed(args.tol)
        ok &= passed
        print(f"{name:<18}{rep.max_error:>12.3e}  {'ok' if passed else 'FAIL'}")
    if not ok:
        raise RuntimeError(f"gradient check failed (tolerance {args.tol:g})")


def cmd_toy(args) -> None:
    out = Path(_require(args.out, "--out"))
    data = toy_dataset(args.data_seed)
    seeds = [int(s) for s in args.seeds.split(",")]
    modes = args.modes.split(",")
    results = {}
    for seed in seeds:
        for mode in modes:
            run = run_toy(seed, mode, data, out / f"{mode}_seed{seed}")
            results[(seed, run.mode)] = run.report.mean_psnr
            print(f"seed {seed} {run.mode:<9}{run.report.mean_psnr:>9.3f} dB  ({run.seconds:.0f} s)", flush=True)
    for seed in seeds:
        base = results.get((seed, "none"))
        others = [(m, v) for (s, m), v in results.items() if s == seed and m != "none"]
        if base is not None and others:
            print(f"seed {seed} delta vs none: " + ", ".join(f"{m} {v - base:+.3f} dB" for m, v in others))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdp-hsi", description="Toy CASSI reconstruction with a spectral diffusion prior.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with TrainConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--spim-mode", choices=["both", "mul", "add", "none"])
        p.add_argument("--out")
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "synthesize scenes, a mask and measurements")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--test-scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--step", type=int, default=2, help="dispersion step in pixels")

    add("train-stage1", cmd_train_stage1, "train the feature extractor and reconstructor")
    p = add("train-stage2", cmd_train_stage2, "train the diffusion prior and fine-tune")
    p.add_argument("--stage1", help="stage-1 model directory")

    p = add("reconstruct", cmd_reconstruct, "reconstruct a cube from a 2-D measurement (.npy)")
    p.add_argument("--model")
    p.add_argument("--measurement")
    p.add_argument("--width", type=int, help="scene width, to validate the measurement geometry")

    p = add("evaluate", cmd_evaluate, "score a model on a test manifest")
    p.add_argument("--model")
    p.add_argument("--manifest")

    p = add("plot", cmd_plot, "write band images and a pixel spectrum")
    p.add_argument("--cube")
    p.add_argument("--bands", help="comma-separated band indices")
    p.add_argument("--pixel", help="row,col for the spectrum plot")

    p = add("toy", cmd_toy, "run the 32x32x8 toy experiment (both stages plus evaluation)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--modes", default="both,none")
    p.add_argument("--data-seed", type=int, default=0)

    p = add("grad-check", cmd_grad_check, "finite-difference check of all differentiable parts")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, IndexError, RuntimeError, FloatingPointError) as exc:
        print(f"sdp-hsi {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
