"""``hasn`` command line: train, warmstart, infer, eval, degrade, count, inspect.

Exit codes: 0 success, 1 partial failure, 2 usage/config error, 3 numeric
failure during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_run_config, parse_overrides
from .data import (
    DatasetSpec,
    ImageReadError,
    bicubic_resize,
    crop_to_multiple,
    degrade,
    image_files,
    load_dataset,
    load_image,
    save_image,
    scan_dataset,
    synthetic_pairs,
)
from .metrics import evaluate_pair, format_metric_rows
from .model import ModelConfig, count_flops, count_params, dump_feature_maps, forward, param_breakdown, self_ensemble_infer
from .trainer import PROFILES, TrainingDiverged, train, warm_start

log = logging.getLogger("hasn")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_ALIASES = {"blocks": "num_blocks", "kernel": "dw_kernel", "k": "dw_kernel", "K": "num_blocks"}


class UsageError(Exception):
    """Bad arguments or inputs; reported and mapped to exit code 2."""


def _err(msg: str) -> None:
    print(f"hasn: error: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _run_config(args, extra) -> RunConfig:
    return load_run_config(args.config, parse_overrides(extra), args.profile)


def _training_data(cfg: RunConfig):
    """(train pairs, eval pairs) from the data section."""
    scale = cfg.model.scale
    seed = cfg.train.seed
    if cfg.data.hr_dir:
        try:
            pairs = load_dataset(cfg.dataset_spec())
        except (FileNotFoundError, ImageReadError) as exc:
            raise UsageError(str(exc)) from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    elif cfg.data.synthetic_count > 0:
        pairs = synthetic_pairs(cfg.data.synthetic_count, cfg.data.synthetic_size, scale, seed=seed + 1)
    else:
        raise UsageError("no training data: set data.hr_dir (or data.synthetic_count)")
    if cfg.data.eval_dir:
        try:
            eval_set = load_dataset(DatasetSpec(hr_dir=[cfg.data.eval_dir], scale=scale, patch_hr=scale))
        except (FileNotFoundError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    elif not cfg.data.hr_dir and cfg.data.synthetic_eval_count > 0:
        eval_set = synthetic_pairs(cfg.data.synthetic_eval_count, cfg.data.synthetic_eval_size, scale, seed=seed + 1001)
    else:
        eval_set = None
    return pairs, eval_set


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args, extra) -> int:
    cfg = _run_config(args, extra)
    if cfg.train.stage != 1:
        raise UsageError("train runs stage 1; use the warmstart command for stage 2")
    pairs, eval_set = _training_data(cfg)
    out = Path(args.out_dir)
    cfg.write(out)
    log.info("training on %d pairs for %d iterations", len(pairs), cfg.train.total_iters)
    try:
        result = train(cfg.model, cfg.train, pairs, out, eval_set, resume_from=args.resume)
    except TrainingDiverged as exc:
        _err(f"{exc} (last checkpoint: {exc.last_checkpoint})")
        return EXIT_NUMERIC
    print(result.final_checkpoint)
    return EXIT_OK


def cmd_warmstart(args, extra) -> int:
    ckpt = Path(args.stage1_ckpt)
    if not ckpt.exists():
        raise UsageError(f"stage-1 checkpoint not found: {ckpt}")
    cfg = _run_config(args, extra)
    try:
        train_cfg = cfg.train.replace(stage=2, loss="stage2", warm_start_from=str(ckpt), pick_iter=args.pick_iter)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        from .trainer import pick_checkpoint

        model_cfg = _load_ckpt(pick_checkpoint(ckpt, args.pick_iter))[0]
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    cfg = dataclasses.replace(cfg, model=model_cfg, train=train_cfg)
    pairs, eval_set = _training_data(cfg)
    out = Path(args.out_dir)
    cfg.write(out)
    try:
        result = warm_start(ckpt, args.pick_iter, cfg.train, pairs, out, eval_set=eval_set)
    except TrainingDiverged as exc:
        _err(f"{exc} (last checkpoint: {exc.last_checkpoint})")
        return EXIT_NUMERIC
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(result.final_checkpoint)
    return EXIT_OK


def _infer_one(model_cfg, params, lr, self_ensemble: bool) -> np.ndarray:
    if self_ensemble:
        y = self_ensemble_infer(model_cfg, params, lr)
    else:
        y = forward(model_cfg, params, lr)
    return np.clip(y, 0.0, 1.0)


def cmd_infer(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    model_cfg, params, _, _ = _load_ckpt(args.ckpt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for path in args.inputs:
        try:
            lr = load_image(path)
            sr = _infer_one(model_cfg, params, lr, args.self_ensemble)
            target = out / f"{Path(path).stem}_x{model_cfg.scale}.png"
            save_image(target, sr)
            print(target)
        except (ImageReadError, ValueError, OSError) as exc:
            failures.append((path, str(exc)))
    if failures:
        _err(f"{len(failures)} of {len(args.inputs)} inputs failed:")
        for path, msg in failures:
            print(f"  {path}: {msg}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    if (args.ckpt is None) == (args.baseline is None):
        raise UsageError("give either a checkpoint or --baseline bicubic|identity")
    model_cfg = params = None
    scale = args.scale
    if args.ckpt is not None:
        model_cfg, params, _, _ = _load_ckpt(args.ckpt)
        if scale is not None and scale != model_cfg.scale:
            raise UsageError(f"--scale {scale} conflicts with the checkpoint's scale {model_cfg.scale}")
        scale = model_cfg.scale
    scale = scale or 4
    hr_dir = Path(args.hr_dir)
    if not hr_dir.is_dir():
        raise UsageError(f"HR directory not found: {hr_dir}")
    if not image_files(hr_dir):
        raise UsageError(f"no images in {hr_dir}")
    spec = DatasetSpec(hr_dir=[str(hr_dir)], lr_dir=args.lr_dir, scale=scale, patch_hr=scale)
    try:
        descs = scan_dataset(spec).pairs
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    quantize = args.quantize
    rows = []
    for desc in descs:
        hr = crop_to_multiple(load_image(desc.hr_path), scale)
        lr = load_image(desc.lr_path) if desc.lr_path else degrade(hr, scale)
        if quantize:
            lr = _quantize(lr)
        if args.baseline == "identity":
            sr = hr
        elif args.baseline == "bicubic":
            sr = np.clip(bicubic_resize(lr, scale), 0.0, 1.0)
        else:
            sr = _infer_one(model_cfg, params, lr, args.self_ensemble)
        if sr.shape != hr.shape:
            raise UsageError(f"{desc.hr_path}: SR {sr.shape[2:]} does not match HR {hr.shape[2:]}")
        p, s = evaluate_pair(sr, hr, scale, quantize)
        rows.append((desc.stem, p, s))
    rows.append(("average", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))))
    text = format_metric_rows(rows)
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_degrade(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    hr_dir = Path(args.hr_dir)
    if not hr_dir.is_dir():
        raise UsageError(f"HR directory not found: {hr_dir}")
    files = image_files(hr_dir)
    if not files:
        raise UsageError(f"no images in {hr_dir}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in files:
        try:
            hr = crop_to_multiple(load_image(path), args.scale)
            save_image(out / f"{path.stem}.png", degrade(hr, args.scale))
        except (ImageReadError, ValueError) as exc:
            _err(f"{path}: {exc}")
            failures += 1
    return EXIT_PARTIAL if failures else EXIT_OK


def _parse_res(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--out-res must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError(f"--out-res must be positive, got {text!r}")
    return w, h


def _fmt_k(n: int) -> str:
    return f"{n:,} ({n / 1000:.0f}K)"


def cmd_count(args, extra) -> int:
    cfg = _run_config(args, extra).model
    w, h = _parse_res(args.out_res)
    if h % cfg.scale or w % cfg.scale:
        raise UsageError(f"--out-res {w}x{h} not divisible by scale {cfg.scale}")
    if not args.sweep:
        n = count_params(cfg)
        print(f"params: {_fmt_k(n)}")
        for part, value in param_breakdown(cfg).items():
            print(f"  {part}: {value:,}")
        print(f"FLOPs @ {w}x{h}: {count_flops(cfg, h, w) / 1e9:.2f}G")
        return EXIT_OK
    key, sep, values = args.sweep.partition("=")
    key = SWEEP_ALIASES.get(key.strip(), key.strip())
    if not sep or key not in {f.name for f in dataclasses.fields(ModelConfig)}:
        raise UsageError(f"--sweep expects <model field>=v1,v2,..., got {args.sweep!r}")
    print(f"{key},params,delta,flops_g")
    prev = None
    for v in _parse_int_list(values, "--sweep values"):
        try:
            c = cfg.replace(**{key: v})
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        n = count_params(c)
        delta = "" if prev is None else f"{n - prev:+d}"
        print(f"{v},{n},{delta},{count_flops(c, h, w) / 1e9:.2f}")
        prev = n
    return EXIT_OK


def cmd_inspect(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    model_cfg, params, _, _ = _load_ckpt(args.ckpt)
    blocks = _parse_int_list(args.blocks, "--blocks")
    bad = [b for b in blocks if not 0 <= b <= model_cfg.num_blocks]
    if bad:
        raise UsageError(f"block index {bad[0]} out of range 0..{model_cfg.num_blocks}")
    try:
        img = load_image(args.image)
    except ImageReadError as exc:
        raise UsageError(str(exc)) from None
    grids = dump_feature_maps(model_cfg, params, img, blocks)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in blocks:
        target = out / f"block_{i}.png"
        save_image(target, grids[i])
        print(target)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hasn", description="Lightweight super-resolution network toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--profile", choices=sorted(PROFILES), help="start from a named preset")

    sp = sub.add_parser("train", help="stage-1 training", epilog="Any --section.key=value overrides a config value.")
    config_args(sp)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume", help="continue from a checkpoint written by this run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("warmstart", help="stage-2 retraining from stage-1 weights")
    sp.add_argument("stage1_ckpt", help="stage-1 checkpoint file or run directory")
    sp.add_argument("--pick-iter", type=int, required=True)
    config_args(sp)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_warmstart)

    sp = sub.add_parser("infer", help="upscale images")
    sp.add_argument("ckpt")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--self-ensemble", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="Y-channel PSNR/SSIM on a benchmark folder")
    sp.add_argument("ckpt", nargs="?")
    sp.add_argument("--hr-dir", required=True)
    sp.add_argument("--lr-dir")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--self-ensemble", action="store_true")
    sp.add_argument("--baseline", choices=("bicubic", "identity"))
    sp.add_argument("--quantize", action="store_true", help="round LR, SR and luma to the 8-bit lattice")
    sp.add_argument("--csv", help="also write the CSV to this file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("degrade", help="write bicubic LR versions of HR images")
    sp.add_argument("--hr-dir", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--scale", type=int, default=4)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("count", help="parameter and FLOP counts")
    config_args(sp)
    sp.add_argument("--out-res", default="1280x720", help="output resolution WxH")
    sp.add_argument("--sweep", help="e.g. blocks=2,4,6 or dw_kernel=3,5,7,9")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("inspect", help="dump per-block feature-map grids")
    sp.add_argument("ckpt")
    sp.add_argument("image")
    sp.add_argument("--blocks", required=True, help="comma-separated indices; 0 = shallow features")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, UsageError) as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
