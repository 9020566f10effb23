"""Command-line interface.

Subcommands: ``phantom`` (dataset generation), ``train``, ``eval``,
``deform`` (field integration + inspection exports), ``gradcheck``. All
subcommands honor ``--seed`` and are bit-reproducible; errors print one
diagnostic line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, apply_overrides, parse_kv_file, write_kv_file
from .diffeo import (DEFAULT_STEPS, DeformationField, VelocityField,
                     exponentiate, jacobian_determinant)
from .io import FormatError, read_mtk1, write_mtk1, write_pgm
from .model import NetConfig, flatten_params, init_params, net_forward
from .optim import load_checkpoint, load_into, save_checkpoint
from .patches import warp_features
from .phantom import PRESETS, PhantomSpec, load_split, make_dataset
from .tensor import ShapeError
from .train import (TrainConfig, evaluate, summarize, train, write_log)


class CLIError(Exception):
    """User-facing failure; printed as a single line to stderr."""


def _load_spec(path: str | None, seed: int) -> PhantomSpec:
    raw = parse_kv_file(path) if path else {}
    preset = raw.pop("preset", "curved")
    if preset not in PRESETS:
        raise CLIError(f"unknown preset {preset!r}; choose from "
                       f"{sorted(PRESETS)}")
    base = PRESETS[preset]
    defaults = dataclasses.asdict(base)
    defaults.pop("seed")
    raw.setdefault("seed", str(seed))
    extra = {"n_train", "n_eval"}
    n_train = int(raw.pop("n_train", "64"))
    n_eval = int(raw.pop("n_eval", "16"))
    merged = {**{k: str(v) for k, v in defaults.items()}, **raw}
    spec = apply_overrides(PhantomSpec, merged, allow_extra=extra)
    return spec, n_train, n_eval


def cmd_phantom(args) -> int:
    spec, n_train, n_eval = _load_spec(args.spec, args.seed)
    out = make_dataset(spec, n_train, n_eval, args.out)
    print(f"wrote {n_train} train / {n_eval} eval pairs to {out}")
    return 0


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_NET_KEYS = {f.name for f in dataclasses.fields(NetConfig)}


def _load_train_configs(path: str | None, seed: int):
    raw = parse_kv_file(path) if path else {}
    net_cfg = apply_overrides(NetConfig, raw, allow_extra=_TRAIN_KEYS)
    tc = apply_overrides(TrainConfig,
                         {**{k: v for k, v in raw.items()
                             if k in _TRAIN_KEYS}, "seed": str(seed)},
                         allow_extra=_NET_KEYS)
    return net_cfg, tc


def cmd_train(args) -> int:
    net_cfg, tc = _load_train_configs(args.config, args.seed)
    if args.no_mp:
        net_cfg = dataclasses.replace(net_cfg, use_mp=False)
    if args.no_sca:
        net_cfg = dataclasses.replace(net_cfg, use_sca=False)
    pairs = load_split(Path(args.data) / "train")
    if not pairs:
        raise CLIError(f"no training pairs under {args.data}")
    log_path = args.log or (str(args.out) + ".log.csv")

    def progress(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  "
              f"dice {row['dice']:.4f}  cldice {row['cldice']:.4f}  "
              f"min|J| {row['min_jacobian']:.3f}")

    params, _ = train(net_cfg, tc, pairs, log_path=log_path,
                      progress=progress if args.verbose else None)
    save_checkpoint(args.out, flatten_params(params))
    cfg_values = dataclasses.asdict(net_cfg)
    cfg_values.update({"epochs": tc.epochs, "lr": tc.lr,
                       "batch_size": tc.batch_size})
    write_kv_file(str(args.out) + ".config", cfg_values)
    # reference full-scale learning rate, recorded alongside the one used
    with open(str(args.out) + ".config", "a") as f:
        f.write("# reference full-scale setting: lr = 5e-05\n")
    print(f"saved checkpoint to {args.out} (log: {log_path})")
    return 0


def _net_from_checkpoint(ckpt: str, config: str | None):
    cfg_path = config or ckpt + ".config"
    if not Path(cfg_path).exists():
        raise CLIError(f"missing config file {cfg_path}")
    raw = parse_kv_file(cfg_path)
    net_cfg = apply_overrides(NetConfig, raw, allow_extra=_TRAIN_KEYS)
    params = init_params(net_cfg, np.random.default_rng(0))
    load_into(flatten_params(params), load_checkpoint(ckpt))
    return params, net_cfg


def cmd_eval(args) -> int:
    params, net_cfg = _net_from_checkpoint(args.ckpt, args.config)
    pairs = load_split(Path(args.data) / "eval")
    if not pairs:
        raise CLIError(f"no eval pairs under {args.data}")
    rows = evaluate(params, net_cfg, pairs)
    summary = summarize(rows)
    names = {"dice": "Dice", "miou": "mIoU", "cldice": "clDice"}
    print(f"evaluated {len(rows)} cases")
    for key, label in names.items():
        mean, std = summary[key]
        print(f"{label:<7} {mean:.3f} ({std:.3f})")
    print()
    print("metric,class,value")
    for key in names:
        for cls in range(1, net_cfg.num_classes):
            print(f"{key},{cls},{summary[key][0]:.6f}")
        print(f"{key},mean,{summary[key][0]:.6f}")
        print(f"{key},std,{summary[key][1]:.6f}")
    return 0


def cmd_deform(args) -> int:
    voff = read_mtk1(args.velocity)
    if voff.ndim != 3 or voff.shape[0] != 2:
        raise CLIError(f"velocity must be [2,H,W], got {voff.shape}")
    v = VelocityField(voff, v_max=max(1e-9, float(
        np.sqrt((voff ** 2).sum(axis=0)).max())))
    phi = exponentiate(v, args.steps)
    jac = jacobian_determinant(phi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mtk1(out / "deformation.mtk1", phi.offsets)
    write_mtk1(out / "jacobian.mtk1", jac)
    write_pgm(out / "deformation_row.pgm", phi.offsets[0])
    write_pgm(out / "deformation_col.pgm", phi.offsets[1])
    write_pgm(out / "jacobian.pgm", jac)
    if args.image:
        img = read_mtk1(args.image)
        squeeze = img.ndim == 2
        if squeeze:
            img = img[None]
        if img.ndim != 3:
            raise CLIError(f"image must be [H,W] or [C,H,W], got {img.shape}")
        if img.shape[1:] != phi.spatial_shape:
            raise CLIError(f"image {img.shape[1:]} does not match field "
                           f"{phi.spatial_shape}")
        warped = warp_features(img, phi)
        write_mtk1(out / "warped.mtk1", warped[0] if squeeze else warped)
        write_pgm(out / "warped.pgm", warped[0])
    print(f"min Jacobian determinant: {jac.min():.6f}")
    print(f"wrote deformation products to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import (KERNEL_CHECKS, KERNEL_TOL, NETWORK_TOL, network_check,
                         run_kernel_check)

    failed = False
    names = list(KERNEL_CHECKS) if (args.full or not args.kernel) \
        else [args.kernel]
    for name in names:
        if name not in KERNEL_CHECKS:
            raise CLIError(f"unknown kernel {name!r}; choose from "
                           f"{sorted(KERNEL_CHECKS)}")
        err = run_kernel_check(name, seeds=[args.seed, args.seed + 1])
        ok = err < KERNEL_TOL
        failed |= not ok
        print(f"kernel={name:<18} max_rel_err={err:.3e} "
              f"tol={KERNEL_TOL:.0e} {'PASS' if ok else 'FAIL'}")
    if args.full:
        err = network_check(seed=args.seed, max_coords=4)
        ok = err < NETWORK_TOL
        failed |= not ok
        print(f"network (16x16)        max_rel_err={err:.3e} "
              f"tol={NETWORK_TOL:.0e} {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="morphseg",
        description="deformable-window segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic tube dataset")
    p.add_argument("--spec", help="key=value spec file (see README)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--config", help="key=value training/architecture file")
    p.add_argument("--data", required=True, help="dataset dir from 'phantom'")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log path (default <out>.log.csv)")
    p.add_argument("--no-mp", action="store_true",
                   help="disable the deformation path")
    p.add_argument("--no-sca", action="store_true",
                   help="disable clustering attention")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="override <ckpt>.config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("deform",
                       help="integrate a velocity field and export products")
    p.add_argument("--velocity", required=True, help="[2,H,W] MTK1 file")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--image", help="optional image to warp")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_deform)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracles")
    p.add_argument("--kernel", help="check a single kernel by name")
    p.add_argument("--full", action="store_true",
                   help="all kernels plus the whole-network check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CLIError, ConfigError, FormatError, ShapeError, ValueError,
            FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
