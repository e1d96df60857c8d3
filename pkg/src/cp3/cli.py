"""Command line interface.

Exit codes: 0 success, 1 validation error (bad arguments, files or configs),
2 runtime failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from cp3.checkpoint import load_checkpoint, save_checkpoint
from cp3.checks import PROBLEMS, run_check
from cp3.config import dump_config, load_config
from cp3.errors import ValidationError
from cp3.geometry import PointCloud, load_xyz, save_xyz
from cp3.ioi import IoiConfig, ioi_sample
from cp3.pipeline import DESK, run_pipeline, write_run
from cp3.synthdata import KINDS, generate_dataset, load_manifest, write_dataset
from cp3.training import (
    PretrainVariant,
    evaluate,
    finetune_generation,
    pretrain_generation,
    run_generator,
    predict,
    train_refinement,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; route them to the validation code instead."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _csv_list(text: str):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _run_config(args, **overrides):
    return load_config(args.config, {"seed": args.seed, **overrides}, DESK if args.desk else None)


def _split(dataset, name: str):
    samples = dataset.split(name)
    if not samples:
        raise ValidationError(f"manifest has no {name!r} samples")
    return samples


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _run_config(
        args,
        per_category=args.per_category,
        n_points=args.n_points,
        crop_rate=args.crop_rate,
        jitter=args.jitter,
        train_fraction=args.train_fraction,
        kinds=_csv_list(args.kinds) if args.kinds else None,
    )
    for k in cfg.kinds:
        if k not in KINDS:
            raise ValidationError(f"unknown shape kind {k!r}; expected one of {KINDS}")
    ds = generate_dataset(cfg.shape_specs(), (cfg.train_fraction, 1 - cfg.train_fraction), cfg.seed, cfg.kinds)
    manifest = write_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples ({len(ds.split('train'))} train, {len(ds.split('val'))} val) to {manifest}")
    return EXIT_OK


def cmd_ioi_sample(args) -> int:
    cloud = load_xyz(args.input)
    kept, dropped = ioi_sample(cloud, IoiConfig(args.gamma, args.seed))
    save_xyz(kept, args.out_kept)
    if args.out_dropped:
        save_xyz(dropped, args.out_dropped)
    print(f"kept {len(kept)} of {len(cloud)} points")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args, variant=args.variant, pretrain_epochs=args.epochs)
    ds = load_manifest(args.data)
    res = pretrain_generation(cfg.train_config("pretrain"), PretrainVariant(cfg.variant), _split(ds, "train"), cfg.init_generator())
    save_checkpoint(res.params, args.out, {"stage": "pretrain", "variant": cfg.variant, "losses": res.losses})
    print(f"pretrain ({cfg.variant}): {len(res.losses)} epochs, final loss {_last(res.losses)}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _run_config(args, finetune_epochs=args.epochs)
    ds = load_manifest(args.data)
    init = load_checkpoint(args.init, "generator")[0] if args.init else cfg.init_generator()
    res = finetune_generation(cfg.train_config("finetune"), _split(ds, "train"), init)
    save_checkpoint(res.params, args.out, {"stage": "finetune", "losses": res.losses})
    print(f"finetune: {len(res.losses)} epochs, final loss {_last(res.losses)}")
    return EXIT_OK


def cmd_refine(args) -> int:
    ds = load_manifest(args.data)
    gen, _ = load_checkpoint(args.gen, "generator")
    cfg = _run_config(args, refine_epochs=args.epochs, encoder_dims=tuple(gen.encoder.dims[1:]))
    if not cfg.num_categories:
        cfg = dataclasses.replace(cfg, num_categories=ds.num_categories)
    res = train_refinement(cfg.train_config("refine"), _split(ds, "train"), gen, cfg.init_scr())
    save_checkpoint(res.params, args.out, {"stage": "refine", "losses": res.losses})
    print(f"refine: {len(res.losses)} epochs, final loss {_last(res.losses)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_manifest(args.data)
    gen, _ = load_checkpoint(args.gen, "generator")
    net = load_checkpoint(args.scr, "scr")[0] if args.scr else None
    seed = args.seed if args.seed is not None else 0
    report = evaluate(gen, net, _split(ds, args.split), args.label_mode, seed, ds.category_names)
    print(report.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = sorted(PROBLEMS) if args.block == "all" else [args.block]
    ok = True
    for name in names:
        out = run_check(name, args.seed or 0, noise_floor=not args.strict)
        lin = "" if out.linear_result is None else f"  linear {out.linear_result.max_rel_error:.3e}"
        status = "PASS" if out.passed else "FAIL"
        print(
            f"{status} {name}: max rel error {out.result.max_rel_error:.3e} (tol {out.tol:g}){lin}; "
            f"{out.result.checked} coords, {len(out.result.excluded)} excluded at kinks"
        )
        ok &= out.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_export_plot(args) -> int:
    ds = load_manifest(args.data)
    gen, _ = load_checkpoint(args.gen, "generator")
    net = load_checkpoint(args.scr, "scr")[0] if args.scr else None
    samples = _split(ds, args.split)[: args.limit]
    coarse = run_generator(gen, samples).coarse
    refined = predict(gen, net, samples) if net is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:04d}_{ds.category_names[s.category]}"
        save_xyz(s.partial, out / f"{stem}_partial.xyz")
        save_xyz(PointCloud(coarse[i], s.category), out / f"{stem}_coarse.xyz")
        if refined is not None:
            save_xyz(PointCloud(refined[i], s.category), out / f"{stem}_refined.xyz")
    print(f"wrote {len(samples)} cloud sets to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _run_config(args)
    ds = load_manifest(args.data)
    result = run_pipeline(cfg, ds, pretrain=not args.no_pretrain, refine=not args.no_refine)
    paths = write_run(result, ds, args.out, cfg)
    print(paths["report_txt"].read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(dump_config(_run_config(args)), end="")
    return EXIT_OK


def _last(losses: List[float]) -> str:
    return f"{losses[-1]:.6g}" if losses else "n/a"


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--desk", action="store_true", help="start from the desk-scale budgets instead of the defaults")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")

    p = _Parser(prog="cp3", description="Point cloud completion with IOI pretraining and semantic refinement.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset and manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--kinds", help=f"comma separated shape kinds, one category each ({', '.join(KINDS)})")
    g.add_argument("--per-category", type=int)
    g.add_argument("--n-points", type=int)
    g.add_argument("--crop-rate", type=float)
    g.add_argument("--jitter", type=float)
    g.add_argument("--train-fraction", type=float)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("ioi-sample", help="crop an incomplete cloud once more (IOI)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-kept", required=True)
    s.add_argument("--out-dropped")
    s.add_argument("--gamma", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ioi_sample, verbose=False)

    t = sub.add_parser("pretrain", parents=[common], help="self-supervised generator pretraining")
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--out", required=True, help="generator checkpoint to write")
    t.add_argument("--variant", choices=[v.value for v in PretrainVariant])
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", parents=[common], help="supervised incomplete -> complete training")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--init", help="generator checkpoint to start from (default: fresh)")
    f.add_argument("--epochs", type=int)
    f.set_defaults(func=cmd_finetune)

    r = sub.add_parser("refine", parents=[common], help="train the refinement net on a frozen generator")
    r.add_argument("--data", required=True)
    r.add_argument("--gen", required=True, help="generator checkpoint")
    r.add_argument("--out", required=True, help="refinement checkpoint to write")
    r.add_argument("--epochs", type=int)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", parents=[common], help="per-category CD / F-score report")
    e.add_argument("--data", required=True)
    e.add_argument("--gen", required=True)
    e.add_argument("--scr", help="refinement checkpoint (omit to score coarse outputs)")
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--label-mode", default="correct", choices=["correct", "random"])
    e.add_argument("--csv", help="also write the report as CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of a block's gradients")
    c.add_argument("--block", default="all", choices=["all", *sorted(PROBLEMS)])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--strict", action="store_true", help="score with the plain 1e-12 floor")
    c.set_defaults(func=cmd_gradcheck, verbose=False)

    x = sub.add_parser("export-plot", help="write partial/coarse/refined XYZ triplets")
    x.add_argument("--data", required=True)
    x.add_argument("--gen", required=True)
    x.add_argument("--scr")
    x.add_argument("--out", required=True)
    x.add_argument("--split", default="val", choices=["train", "val"])
    x.add_argument("--limit", type=int, default=8)
    x.set_defaults(func=cmd_export_plot)

    u = sub.add_parser("run", parents=[common], help="pretrain, finetune and refine in one go, then evaluate")
    u.add_argument("--data", required=True)
    u.add_argument("--out", required=True, help="directory for checkpoints and the report")
    u.add_argument("--no-pretrain", action="store_true", help="finetune from a fresh generator")
    u.add_argument("--no-refine", action="store_true", help="stop after the generator")
    u.set_defaults(func=cmd_run)

    k = sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    k.set_defaults(func=cmd_show_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the CLI maps every failure to an exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
