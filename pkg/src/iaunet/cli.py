"""``iaunet`` command line: synth, train, cv, eval, predict, verify.

Every command accepts ``--config FILE`` (flat JSON, see
``schemas/run_config.schema.json``) and repeated ``--set key=value``
overrides; dedicated flags win over both. Exit codes: 0 success, 1 usage or
configuration error, 2 data validation or checkpoint error, 3 numeric failure
(including a failed ``verify``).

``IAUNET_THREADS`` caps the worker threads used for per-image evaluation.
"""

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data.io import image_to_chw, load_dataset, load_pool, read_image, write_mask
from .data.synth import generate_synthetic
from .errors import IAUNetError, UsageError

EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors are 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _run_config(args, seed_keys=("train.seed", "aug.seed", "synth.seed")):
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        cfg.set(item)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides.update({k: args.seed for k in seed_keys})
    if getattr(args, "lam", None) is not None:
        overrides["loss.lam"] = args.lam
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if getattr(args, "threshold", None) is not None:
        overrides["eval.threshold"] = args.threshold
    if getattr(args, "manifest", None):
        overrides["data.manifest"] = str(args.manifest)
    if getattr(args, "pool", None):
        overrides["data.pool"] = str(args.pool)
    if overrides:
        cfg.update(overrides)
    return cfg


def _records(cfg, require_mask=True):
    manifest = cfg.values["data.manifest"]
    if not manifest:
        raise UsageError("no manifest given (use --manifest or data.manifest)")
    model_cfg = cfg.model_config()
    binary = cfg.values["loss.mode"] == "binary"
    return load_dataset(manifest, binary=binary, require_mask=require_mask,
                        num_classes=None if binary else model_cfg.num_classes)


def _pool(cfg):
    path = cfg.values["data.pool"]
    if path is None and cfg.values["data.manifest"]:
        sibling = Path(cfg.values["data.manifest"]).parent / "pool.json"
        path = sibling if sibling.is_file() else None
    return load_pool(path) if path else None


def _progress(every):
    start = time.perf_counter()

    def report(step, m):
        if step % every == 0:
            _log(f"step {step}: total {m.total:.4f} seg {m.seg:.4f} tri {m.tri:.4f} "
                 f"|g| {m.grad_norm:.3f} ({time.perf_counter() - start:.0f}s)")

    return report


def _safe_name(record_id):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", record_id)


# commands


def cmd_synth(args):
    cfg = _run_config(args, seed_keys=("synth.seed",))
    over = {}
    if args.num is not None:
        over["synth.num_images"] = args.num
    if args.size is not None:
        over["synth.image_size"] = args.size
    if args.pool_size is not None:
        over["synth.pool_size"] = args.pool_size
    if over:
        cfg.update(over)
    result = generate_synthetic(cfg.synth_config(), args.out)
    print(f"wrote {len(result.cells)} scenes to {args.out} "
          f"(manifest {result.manifest}, pool {result.pool_manifest})")
    return 0


def cmd_train(args):
    from .trainer import Trainer

    cfg = _run_config(args)
    out = Path(args.out)
    cfg.update({"train.checkpoint_dir": str(out)})
    records, pool = _records(cfg), _pool(cfg)
    train_cfg = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    log_path = out / "train_log.jsonl"
    if args.resume:
        trainer = Trainer.resume(args.resume, records, pool, cfg=train_cfg, log_path=log_path)
        _log(f"resumed from {args.resume} at step {trainer.step}")
    else:
        log_path.unlink(missing_ok=True)
        trainer = Trainer(records, pool, train_cfg, model_config=cfg.model_config(),
                          log_path=log_path)
    trainer.fit(steps=args.max_steps, progress=None if args.quiet else _progress(args.print_every))
    print(f"trained {trainer.step} steps; checkpoint {out / 'last.ckpt'}, log {log_path}")
    return 0


def cmd_cv(args):
    from .trainer import run_cross_validation

    cfg = _run_config(args)
    records, pool = _records(cfg), _pool(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")

    def done(fold, report):
        report.write_json(out / f"fold_{fold:02d}.json")
        if not args.quiet:
            _log(f"fold {fold}: dice {report.aggregate['dice_mean']:.4f} "
                 f"iou {report.aggregate['iou_mean']:.4f}")

    result = run_cross_validation(records, cfg.train_config(), k=args.k, pool=pool,
                                  model_config=cfg.model_config(),
                                  threshold=cfg.values["eval.threshold"], progress=done)
    agg = result.aggregate
    (out / "aggregate.json").write_text(json.dumps(agg, indent=1, sort_keys=True) + "\n")
    lines = ["fold  dice    iou"]
    lines += [f"{r.fold_id:<4d}  {r.aggregate['dice_mean']:.4f}  {r.aggregate['iou_mean']:.4f}"
              for r in result.reports]
    lines.append(f"mean  {agg['dice_mean']:.4f}  {agg['iou_mean']:.4f}")
    lines.append(f"std   {agg['dice_std']:.4f}  {agg['iou_std']:.4f}")
    table = "\n".join(lines) + "\n"
    (out / "cv_table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_eval(args):
    from .evaluation import evaluate, write_comparison_table, write_overlay

    cfg = _run_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    records = _records(cfg)
    out = Path(args.out)

    def overlay(rec, image, pred, gt):
        write_overlay(image, pred, gt, out / "overlays" / f"{_safe_name(rec.record_id)}.png")

    report = evaluate(model, records, threshold=cfg.values["eval.threshold"],
                      on_prediction=None if args.no_overlays else overlay)
    report.write_json(out / "report.json")
    name = args.name or Path(args.checkpoint).stem
    print(write_comparison_table([(name, report)], out / "table"), end="")
    return 0


def cmd_predict(args):
    from .evaluation import predict_mask

    cfg = _run_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    image = read_image(args.image)
    pred = predict_mask(model, image_to_chw(image), cfg.values["eval.threshold"])
    binary = pred.dtype == bool
    write_mask(args.out, pred.astype(np.uint8), binary=binary)
    print(f"wrote {args.out} ({pred.shape[1]}x{pred.shape[0]}, "
          f"{int((pred > 0).sum())} foreground pixels)")
    return 0


def cmd_verify(args):
    from .verify import run_all

    start = time.perf_counter()
    results = run_all(end_to_end=not args.quick, report=print)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.perf_counter() - start:.1f}s")
    for r in failed:
        print(f"FAILED: {r.suite} {r.name}", file=sys.stderr)
    return EXIT_NUMERIC if failed else 0


# parser


def _common(p, data=True):
    p.add_argument("--config", type=Path, help="flat JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every random number consumer")
    if data:
        p.add_argument("--manifest", type=Path, help="dataset manifest")
        p.add_argument("--pool", type=Path, help="hard-negative pool manifest")


def build_parser():
    parser = _Parser(prog="iaunet", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog="Config keys and defaults: src/iaunet/schemas/run_config.schema.json")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic cell benchmark")
    _common(p, data=False)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--num", type=int, help="number of scenes")
    p.add_argument("--size", type=int, help="scene side length")
    p.add_argument("--pool-size", type=int, help="hard-negative pool size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--lambda", dest="lam", type=float, help="triplet weight (0 = plain U-Net)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--print-every", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _common(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=float)
    p.add_argument("--name", help="method name in the table (default: checkpoint stem)")
    p.add_argument("--no-overlays", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    _common(p, data=False)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output mask PNG")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="gradient, loss-oracle and shape self-checks")
    p.add_argument("--quick", action="store_true", help="skip the full-model gradient check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IAUNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
