"""Command-line entry point: ``tryon-cascade <subcommand> ...``.

Exit codes: 0 success, 1 domain error (bad data, failed check), 2 usage error.
Every command writes a run manifest beside its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__

USAGE_ERROR = 2
DOMAIN_ERROR = 1


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifests


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_manifest(target: Path, argv, config, seed, started: float, outputs: Sequence[Path]) -> Path:
    """Record the run beside ``target``: inside it if a directory, else ``<target>.run.json``."""
    target = Path(target)
    path = target / "run_manifest.json" if target.is_dir() else target.with_name(target.name + ".run.json")
    root = target if target.is_dir() else target.parent
    hashes = {}
    for p in sorted(set(Path(o) for o in outputs)):
        if p.is_file() and p != path:
            try:
                key = str(p.relative_to(root))
            except ValueError:
                key = str(p)
            hashes[key] = sha256_file(p)
    manifest = {
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
        "outputs": hashes,
    }
    _atomic_write(path, json.dumps(manifest, indent=1, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# helpers


def _levels(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from exc


def _load_config(path: Optional[str]):
    from .config import desk_config, load_config

    return load_config(path) if path else desk_config()


def _png_files(directory: str, pattern: str = "*.png") -> list:
    d = Path(directory)
    if not d.is_dir():
        raise DomainError(f"not a directory: {d}")
    files = sorted(d.rglob(pattern))
    if not files:
        raise DomainError(f"no PNG files under {d}")
    return files


def _progress(label: str, every: int):
    def cb(it, loss):
        if every and (it % every == 0):
            print(f"[{label}] iter {it} loss {loss:.5f}", file=sys.stderr)

    return cb


def _dataset(path: str, cfg, with_warped: bool = False, split: Optional[int] = None):
    from .cascade import PairDataset, stage_resolutions, validation_indices
    from .synthpairs import load_dataset

    examples = load_dataset(path)
    if split is not None:
        train, _ = validation_indices(len(examples), split)
        examples = [examples[i] for i in train] or examples
    res = [r for r in stage_resolutions(cfg) if r <= examples[0].resolution]
    return PairDataset(examples, res, with_warped=with_warped)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args, argv, started):
    from .synthpairs import generate_dataset

    files = generate_dataset(args.n, args.seed, args.res, args.out, unpaired=args.unpaired)
    write_manifest(Path(args.out), argv, {"n": args.n, "res": args.res, "unpaired": args.unpaired}, args.seed, started, files)
    print(f"wrote {args.n} examples to {args.out}")


def cmd_preprocess(args, argv, started):
    from . import datamodel as dm
    from .preprocess import clothing_agnostic_rgb, normalize_keypoints, segment_garment

    person, garment = dm.decode_image(args.person), dm.decode_image(args.garment)
    p_parse, g_parse = dm.decode_parsing(args.person_parsing), dm.decode_parsing(args.garment_parsing)
    p_pose, g_pose = dm.decode_pose(args.person_pose), dm.decode_pose(args.garment_pose)
    if args.pose_units == "pixels":
        p_pose = normalize_keypoints(p_pose, *person.shape[:2])
        g_pose = normalize_keypoints(g_pose, *garment.shape[:2])
    for name, pose in (("person_pose", p_pose), ("garment_pose", g_pose)):
        bad = dm.pose_violations(name, pose)
        if bad:
            raise DomainError("; ".join(bad))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "agnostic.png", out / "garment_segmented.png", out / "person_pose.json", out / "garment_pose.json"]
    dm.encode_image(clothing_agnostic_rgb(person, p_parse, p_pose), files[0])
    dm.encode_image(segment_garment(garment, g_parse), files[1])
    dm.encode_pose(p_pose, files[2])
    dm.encode_pose(g_pose, files[3])
    write_manifest(out, argv, {"pose_units": args.pose_units}, None, started, files)
    print(f"wrote {len(files)} files to {out}")


def cmd_train(args, argv, started):
    from .cascade import train_stage
    from .checkpoint import save_checkpoint

    cfg = _load_config(args.config)
    stage = cfg.stage(args.stage)
    data = _dataset(args.data, cfg, split=args.seed)
    ckpt = train_stage(stage, data, args.seed, pipeline_hash=cfg.pipeline_hash, progress=_progress(args.stage, args.log_every))
    out = save_checkpoint(ckpt, args.out)
    write_manifest(out, argv, stage.to_dict(), args.seed, started, [out])
    print(f"{args.stage}: {stage.train.iterations} iterations, final loss {ckpt.loss_trace[-1]:.5f} -> {out}")


def cmd_sample(args, argv, started):
    from . import datamodel as dm
    from .cascade import load_pipeline, sample_pipeline, to_hwc

    ckpts = load_pipeline(args.ckpts)
    person = dm.load_example(args.person)
    garment = dm.load_example(args.garment)
    example = dm.TryOnExample(
        person_image=person.person_image,
        person_parsing=person.person_parsing,
        person_pose=person.person_pose,
        garment_image=garment.garment_image,
        garment_parsing=garment.garment_parsing,
        garment_pose=garment.garment_pose,
    )
    img = sample_pipeline(ckpts, example, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dm.encode_image(to_hwc(img), out)
    write_manifest(out, argv, ckpts.config.to_dict(), args.seed, started, [out])
    print(f"wrote {out}")


def cmd_evaluate(args, argv, started):
    from . import datamodel as dm
    from .evalmetrics import evaluate_sets

    real = [dm.decode_image(p) for p in _png_files(args.real, args.real_glob)]
    fake = [dm.decode_image(p) for p in _png_files(args.fake, args.fake_glob)]
    report = evaluate_sets(real, fake, [m.strip() for m in args.metrics.split(",") if m.strip()], seed=args.seed)
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        write_manifest(out, argv, {"metrics": args.metrics}, args.seed, started, [out])


def cmd_ablate(args, argv, started):
    import dataclasses

    import torch

    from . import datamodel as dm
    from .cascade import (
        PairDataset,
        sample_base,
        sample_sequenced,
        train_sequenced_ablation,
        train_stage,
        to_hwc,
    )
    from .evalmetrics import band_mae, boundary_band, image_fid
    from .synthpairs import load_dataset

    cfg = _load_config(args.config)
    base = cfg.base
    res = base.target_resolution
    train = PairDataset(load_dataset(args.data), [res], with_warped=args.mode == "sequenced")
    evals = PairDataset(load_dataset(args.eval_data), [res], with_warped=False)
    real = evals.at(res)["target"]
    cb = _progress("ablate", args.log_every)
    unified = train_stage(base, train, args.seed, progress=cb)
    fake_u = sample_base(unified, evals, args.seed)
    if args.mode == "concat":
        variant = base.replace(unet=dataclasses.replace(base.unet, variant="concat"))
        other = train_stage(variant, train, args.seed, progress=cb)
        fake_o = sample_base(other, evals, args.seed)
    else:
        a, b = train_sequenced_ablation(train, args.seed, base, progress=cb)
        fake_o = sample_sequenced(a, b, evals, args.seed)
    report = {"mode": args.mode, "seed": args.seed, "fid_unified": image_fid(fake_u, real), f"fid_{args.mode}": image_fid(fake_o, real)}
    if args.mode == "sequenced":
        masks = evals.at(res)["garment_mask"][:, 0].numpy() > 0.5
        bands = [boundary_band(m) for m in masks]
        report["band_mae_unified"] = float(np.mean([band_mae(to_hwc(f), to_hwc(r), bd) for f, r, bd in zip(fake_u, real, bands) if bd.any()]))
        report["band_mae_sequenced"] = float(np.mean([band_mae(to_hwc(f), to_hwc(r), bd) for f, r, bd in zip(fake_o, real, bands) if bd.any()]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "report.json"]
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for name, batch in (("unified", fake_u), (args.mode, fake_o)):
        d = out / name
        d.mkdir(exist_ok=True)
        for i, img in enumerate(batch):
            files.append(d / f"{i:05d}.png")
            dm.encode_image(to_hwc(img), files[-1])
    write_manifest(out, argv, base.to_dict(), args.seed, started, files)
    print(json.dumps(report, indent=1, sort_keys=True))


def cmd_grid_search(args, argv, started):
    from .cascade import load_pipeline, grid_search_tna
    from .synthpairs import load_dataset

    ckpts = load_pipeline(args.ckpts)
    result = grid_search_tna(ckpts, load_dataset(args.data), args.levels, seed=args.seed)
    text = json.dumps(result, indent=1, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        write_manifest(out, argv, {"levels": args.levels}, args.seed, started, [out])


def cmd_param_count(args, argv, started):
    import dataclasses

    from .parallel_unet import param_breakdown, param_count

    cfg = _load_config(args.config)
    names = [args.stage] if args.stage else [s.name for s in cfg.stages()]
    report = {}
    for name in names:
        unet = cfg.stage(name).unet
        if args.variant:
            unet = dataclasses.replace(unet, variant=args.variant)
        report[name] = {"total": param_count(unet), "conv_only": param_count(unet, conv_only=True), "submodules": param_breakdown(unet)}
    for name, r in report.items():
        print(f"{name}: total {r['total']:,} parameters ({r['total'] / 1e9:.3f}B), conv-only {r['conv_only']:,}")
        for sub, n in r["submodules"].items():
            print(f"  {sub:<14} {n:>16,}")
    if args.json:
        print(json.dumps(report, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tryon-cascade", description="Cascaded try-on diffusion: data, training, sampling, evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    s = sub.add_parser("synth-gen", help="render a synthetic paired (or unpaired) dataset")
    s.add_argument("--n", type=int, required=True, help="number of examples")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--res", type=int, default=256, help="render resolution (32, 64, 128 or 256)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--unpaired", action="store_true", help="garment from a different person; target is the counterfactual render")
    s.set_defaults(fn=cmd_synth_gen)

    s = sub.add_parser("preprocess", help="build clothing-agnostic RGB, segmented garment and normalized poses")
    for flag in ("person", "person-parsing", "person-pose", "garment", "garment-parsing", "garment-pose"):
        s.add_argument(f"--{flag}", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--pose-units", choices=("normalized", "pixels"), default="normalized", help="units of the input pose JSON")
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("train", help="train one cascade stage")
    s.add_argument("--stage", choices=("base", "sr1", "sr2"), required=True)
    s.add_argument("--config", help="config file (default: built-in desk config)")
    s.add_argument("--data", required=True, help="dataset directory from synth-gen")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint file to write")
    s.add_argument("--log-every", type=int, default=0, help="print the loss every N iterations (0 = quiet)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="run the full cascade on one person / garment pair")
    s.add_argument("--ckpts", required=True, help="directory with base.ckpt, sr1.ckpt, sr2.ckpt and pipeline.json")
    s.add_argument("--person", required=True, help="example directory providing person_* files")
    s.add_argument("--garment", required=True, help="example directory providing garment_* files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output PNG")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("evaluate", help="compare two PNG directories")
    s.add_argument("--real", required=True)
    s.add_argument("--fake", required=True)
    s.add_argument("--real-glob", default="*.png", help="file pattern under --real (e.g. ground_truth.png)")
    s.add_argument("--fake-glob", default="*.png", help="file pattern under --fake")
    s.add_argument("--metrics", default="fid,kid,psnr,ssim")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and compare an ablation against the unified model at base resolution")
    s.add_argument("--mode", choices=("concat", "sequenced"), required=True)
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="training dataset directory")
    s.add_argument("--eval-data", required=True, help="evaluation dataset directory (e.g. unpaired)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("grid-search-tna", help="choose inference noise-augmentation levels by validation FID")
    s.add_argument("--ckpts", required=True)
    s.add_argument("--data", required=True, help="validation dataset directory")
    s.add_argument("--levels", type=_levels, default=[0.0, 0.1, 0.2])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_grid_search)

    s = sub.add_parser("param-count", help="print parameter totals per stage and submodule")
    s.add_argument("--config")
    s.add_argument("--stage", choices=("base", "sr1", "sr2"))
    s.add_argument("--variant", choices=("parallel", "concat", "efficient"))
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_param_count)
    return p


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return USAGE_ERROR
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return USAGE_ERROR
    started = time.time()
    try:
        args.fn(args, ["tryon-cascade", *argv], started)
    except (DomainError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DOMAIN_ERROR
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
