"""Command-line surface: one executable, subcommands for every pipeline
stage plus the applications and the self-test.

Exit codes: 0 success, 2 missing prerequisite artifact, 3 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, MissingPrerequisite
from .fileio import sample_seed, write_manifest

STAGE_COMMANDS = ("corpus-gen", "train-prior", "extract-priors", "train-shape",
                  "train-texture", "train-refine")
APP_COMMANDS = ("generate", "retexture", "interpolate", "invert", "evaluate")


def _parse_override(kv: str):
    if "=" not in kv:
        raise ConfigError(f"--set expects key=value, got {kv!r}")
    key, raw = kv.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(args, run_root: Path | None = None) -> RunConfig:
    """--config wins; otherwise reuse the run directory's saved config;
    fall back to defaults. --set/--seed apply on top."""
    if args.config:
        cfg = RunConfig.load(args.config)
    elif run_root is not None and (run_root / "config.json").exists():
        cfg = RunConfig.load(run_root / "config.json")
    else:
        cfg = RunConfig()
    data = cfg.to_dict()
    for kv in args.set or []:
        key, value = _parse_override(kv)
        if key not in data:
            raise ConfigError(f"unknown config key {key!r}")
        data[key] = value
    if args.seed is not None:
        data["seed"] = args.seed
    return RunConfig.from_dict(data)


def _run_dir(args) -> Path:
    out = args.out or os.environ.get("BODYFORGE_RUN_DIR")
    if not out:
        raise ConfigError("no run directory: pass --out or set BODYFORGE_RUN_DIR")
    return Path(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bodyforge",
        description="Desk-scale textured 3D human generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="run directory (or BODYFORGE_RUN_DIR)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field (repeatable)")

    p = sub.add_parser("corpus-gen", help="render the synthetic corpus")
    common(p)
    p.add_argument("--n", type=int, help="override corpus size")

    for name, desc in (("train-prior", "train reconstructor + 2D generator"),
                       ("extract-priors", "write pseudo-GT supervision records"),
                       ("train-shape", "stage 1: shape branch"),
                       ("train-texture", "stage 2: texture branch"),
                       ("train-refine", "stage 3: image refiner"),
                       ("evaluate", "compute the metric report")):
        common(sub.add_parser(name, help=desc))

    p = sub.add_parser("generate", help="generate one textured mesh")
    common(p)
    p.add_argument("--gen-seed", type=int, default=0, help="latent seed")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--name", help="output PLY name")

    p = sub.add_parser("retexture", help="fixed shape, several texture codes")
    common(p)
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument("--textures", type=int, default=5)

    p = sub.add_parser("interpolate", help="latent interpolation sequence")
    common(p)
    p.add_argument("--seed-a", type=int, default=0)
    p.add_argument("--seed-b", type=int, default=1)
    p.add_argument("--steps", type=int, default=5)

    p = sub.add_parser("invert", help="recover latents for a reference image")
    common(p)
    p.add_argument("--corpus-index", type=int, default=None,
                   help="use this corpus sample as the reference")
    p.add_argument("--image", help="raw float32 HxWx3 reference image file")

    common(sub.add_parser("selftest", help="run the oracle/invariant checks"))
    return parser


def _latent(cfg: RunConfig, seed: int, tag: str) -> np.ndarray:
    rng = np.random.default_rng(sample_seed(seed, 0, tag))
    return rng.standard_normal(cfg.latent_dim)


def _cmd_stage(args) -> int:
    from .rundir import RunDir

    root = _run_dir(args)
    cfg = load_config(args, root)
    if args.command == "corpus-gen" and args.n is not None:
        cfg = cfg.replace(corpus_n=args.n)
    run = RunDir(root, cfg)
    if args.command == "corpus-gen":
        manifest = run.run_corpus()
        print(f"corpus: {manifest['n_train']} train / {manifest['n_eval']} eval "
              f"at {manifest['resolution']}^2 -> {run.path('corpus')}")
    elif args.command == "train-prior":
        run.run_train_prior()
        print(f"prior networks trained -> {run.path('prior')}")
    elif args.command == "extract-priors":
        manifest = run.run_extract_priors()
        print(f"pseudo-GT: {len(manifest['records'])} records -> {run.path('pseudo_gt')}")
    elif args.command == "train-shape":
        run.run_train_shape()
        print(f"shape stage done -> {run.path('shape')}")
    elif args.command == "train-texture":
        run.run_train_texture()
        print(f"texture stage done -> {run.path('texture')}")
    elif args.command == "train-refine":
        run.run_train_refine()
        print(f"refine stage done -> {run.path('refine')}")
    elif args.command == "evaluate":
        report = run.run_evaluate()
        print(report.table_row())
        print(f"report -> {run.path('eval', 'report.json')}")
    return 0


def _cmd_app(args) -> int:
    from .applications import generate, interpolate, invert, retexture
    from .fields import save_ply
    from .rundir import RunDir

    root = _run_dir(args)
    cfg = load_config(args, root)
    run = RunDir(root, cfg)
    state = run.load_state(require_refiner=getattr(args, "refine", False))
    mesh_dir = run.path("meshes")
    mesh_dir.mkdir(exist_ok=True)
    comment = f"config_hash={cfg.config_hash}"

    if args.command == "generate":
        z_s = _latent(cfg, args.gen_seed, "z_s")
        z_t = _latent(cfg, args.gen_seed, "z_t")
        mesh = generate(state, z_s, z_t, refine=args.refine)
        if mesh.is_empty:
            print("empty mesh (field has no zero crossing); nothing written")
            return 0
        name = args.name or f"gen_seed{args.gen_seed}.ply"
        save_ply(mesh_dir / name, mesh, comment=comment)
        print(f"mesh -> {mesh_dir / name}")
    elif args.command == "retexture":
        z_s = _latent(cfg, args.gen_seed, "z_s")
        z_ts = [_latent(cfg, args.gen_seed + 1 + k, "z_t") for k in range(args.textures)]
        meshes = retexture(state, z_s, z_ts)
        for k, mesh in enumerate(meshes):
            save_ply(mesh_dir / f"retex_seed{args.gen_seed}_{k}.ply", mesh, comment=comment)
        print(f"{len(meshes)} retextured meshes -> {mesh_dir}")
    elif args.command == "interpolate":
        z_a = _latent(cfg, args.seed_a, "z_s")
        z_b = _latent(cfg, args.seed_b, "z_s")
        meshes = interpolate(state, z_a, z_b, args.steps)
        for k, mesh in enumerate(meshes):
            save_ply(mesh_dir / f"interp_{args.seed_a}_{args.seed_b}_{k}.ply",
                     mesh, comment=comment)
        print(f"{len(meshes)} interpolation steps -> {mesh_dir}")
    elif args.command == "invert":
        if args.corpus_index is not None:
            image = run.corpus_set().load(args.corpus_index).rgb
        elif args.image:
            raw = np.fromfile(args.image, dtype="<f4")
            res = cfg.image_size
            image = raw.reshape(res, res, 3)
        else:
            raise ConfigError("invert needs --corpus-index or --image")
        result = invert(state, run.load_reconstructor(), image, seed=cfg.seed)
        save_ply(mesh_dir / "inverted.ply", result.mesh, comment=comment)
        write_manifest(mesh_dir / "inversion_report.json",
                       {**result.to_dict(), "config_hash": cfg.config_hash})
        print(f"inversion loss {result.final_loss:.5f} "
              f"(init {result.initial_loss:.5f}) -> {mesh_dir / 'inverted.ply'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            from .selftest import run_selftest

            return 0 if run_selftest() else 1
        if args.command in STAGE_COMMANDS or args.command == "evaluate":
            return _cmd_stage(args)
        return _cmd_app(args)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
