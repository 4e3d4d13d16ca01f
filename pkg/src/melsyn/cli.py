"""Operator command line.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 verification failure (grad-check). MELSYN_THREADS caps worker
parallelism for corpus rendering and feature-cache builds.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_image_model
from .codecs import image_to_latent, write_wav
from .config import ConfigError, config_hash, codec_config_from, load_config, schedule_from
from .corpus import build_corpus
from .engine import SamplerConfig, generate, inversion_round_trip_error, sampling_grid
from .experiments import (ABLATION_AXES, _pipeline_for, ablate, grad_check_suite,
                          max_workers, run_eval, run_train_image, run_train_music)
from .melt import read_melt, write_melt
from .rng import Rng

USAGE_ERROR, RUNTIME_ERROR, VERIFY_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _config_arg(args) -> dict:
    return load_config(args.config)


def cmd_gen_corpus(args) -> int:
    cfg = _config_arg(args)
    c = cfg["corpus"]
    manifest = build_corpus(
        n_items=c["n_items"], n_genres=c["genres"], split_fracs=tuple(c["split_fracs"]),
        seed=c["seed"], out_dir=args.out, codec_cfg=codec_config_from(cfg),
        image_size=cfg["codecs"]["image_size"], keep_waveform=c["keep_waveform"],
        workers=max_workers(),
    )
    print(json.dumps({"manifest": str(manifest), "n_items": c["n_items"],
                      "config_hash": config_hash(cfg), "seed": c["seed"]}, sort_keys=True))
    return 0


def cmd_train_image(args) -> int:
    cfg = _config_arg(args)
    summary = run_train_image(cfg, args.manifest, args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _config_arg(args)
    summary = run_train_music(cfg, args.manifest, args.image_ckpt, args.out,
                              log_path=args.log)
    if args.image_ckpt:
        # stamp the image checkpoint into the header for later auto-resolution
        header, tensors = load_checkpoint(args.out)
        header["image_ckpt"] = str(Path(args.image_ckpt).resolve())
        from .checkpoint import save_checkpoint

        save_checkpoint(args.out, header, tensors)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sample(args) -> int:
    pipeline = _pipeline_for(args.ckpt, args.image_ckpt)
    cfg = pipeline.run_config
    n_steps = args.steps or cfg["sampler"]["steps"]
    guidance = cfg["sampler"]["guidance"] if args.guidance is None else args.guidance
    sampler = SamplerConfig(steps=sampling_grid(pipeline.sched.T, n_steps), w_cfg=guidance)
    image = read_melt(args.image)
    spec, waveform, info = generate(pipeline, image, args.caption, sampler, Rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "sample.wav", waveform, pipeline.codec_cfg.sample_rate)
    write_melt(out / "sample.melt", spec.values.astype(np.float32))
    sidecar = {
        "caption": args.caption,
        "image": str(args.image),
        "config_hash": config_hash(cfg),
        **info,
    }
    (out / "sample.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), **sidecar}, sort_keys=True))
    return 0


def cmd_invert(args) -> int:
    header, model = load_image_model(args.ckpt)
    cfg = header["config"]
    sched = schedule_from(cfg)
    codec_cfg = codec_config_from(cfg)
    image = read_melt(args.image)
    z_clean = image_to_latent(codec_cfg, codec_cfg.make_codec(), image).data
    grid = sampling_grid(sched.T, args.steps)
    err = inversion_round_trip_error(model, sched, z_clean, grid)
    report = {"steps": args.steps, "grid_len": len(grid),
              "relative_l2_error": err, "config_hash": config_hash(cfg)}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        header, _ = load_checkpoint(args.ckpt)
        cfg = load_config(overrides=header["config"])
    report = run_eval(cfg, args.ckpt, args.manifest, args.out, image_ckpt=args.image_ckpt)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_arg(args)
    rows = ablate(args.axis, cfg, args.manifest, args.image_ckpt, args.out,
                  music_ckpt=args.ckpt)
    print(json.dumps({"axis": args.axis, "rows": len(rows), "csv": str(args.out),
                      "config_hash": config_hash(cfg)}, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config) if args.config else None
    reports = grad_check_suite(cfg)
    worst = 0.0
    failed = 0
    for r in reports:
        ok = r.passed(1e-4)
        failed += 0 if ok else 1
        worst = max(worst, r.max_rel_error)
        print(f"{'PASS' if ok else 'FAIL'} {r.name}  max_rel_error={r.max_rel_error:.3e}")
    print(f"checked {len(reports)} tensors, worst {worst:.3e}, failures {failed}")
    return 0 if failed == 0 else VERIFY_ERROR


def cmd_inspect(args) -> int:
    header, tensors = load_checkpoint(args.ckpt)
    n_params = sum(int(np.prod(arr.shape)) for name, arr in tensors.items()
                   if name.startswith(("theta.", "psi.", "synapse.")))
    info = {
        "kind": header.get("kind"),
        "config_hash": header.get("config_hash"),
        "alphas": header.get("alphas", {}),
        "n_parameters": n_params,
        "n_tensors": len(tensors),
        "train_progress": header.get("train_progress", {}),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melsyn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, help="render the synthetic triplet corpus")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)

    sp = add("train-image", cmd_train_image, help="train and freeze the image branch")
    sp.add_argument("--config", default=None)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, help="train the music model and synapse gates")
    sp.add_argument("--config", default=None)
    sp.add_argument("--image-ckpt", default=None)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", default=None)

    sp = add("sample", cmd_sample, help="generate audio from an image and caption")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--caption", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-ckpt", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--guidance", type=float, default=None)

    sp = add("invert", cmd_invert, help="DDIM inversion round-trip diagnostic")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", default=None)

    sp = add("eval", cmd_eval, help="objective metrics over the test split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-ckpt", default=None)
    sp.add_argument("--config", default=None)

    sp = add("ablate", cmd_ablate, help="one CSV row per setting of an ablation axis")
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.add_argument("--config", default=None)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--image-ckpt", default=None)
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--out", required=True)

    sp = add("grad-check", cmd_grad_check, help="finite-difference gradient suite")
    sp.add_argument("--config", default=None)

    sp = add("inspect", cmd_inspect, help="print gate values and parameter counts")
    sp.add_argument("--ckpt", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
