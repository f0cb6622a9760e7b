"""``lsla`` command line: cost reports, property verification, training, evaluation, inspection.

Exit codes: 0 success, 1 failed check / diverged training, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attention as at
from . import harness, verify
from .accounting import count_flops
from .model import (
    CheckpointError,
    ModelConfig,
    attention_params,
    block_attention_input,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

PRESETS: dict[str, ModelConfig] = {
    "vit-lsla-t": ModelConfig(),
    "tiny": ModelConfig(
        image_size=56,
        stem_mid_channels=8,
        stages=((1, 16, 1), (1, 32, 2), (2, 64, 4), (1, 128, 8)),
        num_classes=4,
    ),
}
PUBLISHED_TARGET_PRESETS = {"vit-lsla-t"}


class UsageError(Exception):
    pass


def resolve_config(name: str) -> tuple[ModelConfig, bool]:
    """Preset name or key=value config file -> (config, carries published targets)."""
    if name in PRESETS:
        return PRESETS[name], name in PUBLISHED_TARGET_PRESETS
    path = Path(name)
    if path.is_file():
        try:
            return ModelConfig.from_text(path.read_text(encoding="utf-8")), False
        except (ValueError, KeyError) as e:
            raise UsageError(f"bad config file {name}: {e}") from None
    raise UsageError(f"unknown preset or config file: {name} (presets: {', '.join(PRESETS)})")


def cmd_report(args) -> int:
    cfg, has_targets = resolve_config(args.config)
    changes = {}
    if args.variant:
        changes["variant"] = args.variant
        if args.variant == "qxv":
            changes["final_projection"] = False  # QXV stands in for the output projection
    if args.no_projection:
        changes["final_projection"] = False
    if args.bias_mode:
        changes["bias_mode"] = args.bias_mode
    cfg = replace(cfg, **changes)
    rep = count_flops(cfg)
    print(rep.to_text())
    if args.csv:
        try:
            Path(args.csv).write_text(rep.to_csv(), encoding="utf-8")
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
    key = (cfg.variant.value, cfg.final_projection)
    if has_targets and key in verify.PUBLISHED_COSTS:
        tp, tf = verify.PUBLISHED_COSTS[key]
        dp, df = verify.cost_deviation(cfg)
        ok = abs(dp) <= verify.TOL_COST and abs(df) <= verify.TOL_COST
        print(
            f"published target {tp}M / {tf}G: params {dp:+.2%}, FLOPs {df:+.2%} "
            f"({'within' if ok else 'OUTSIDE'} {verify.TOL_COST:.0%})"
        )
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.inject_fault:
        at.set_fault(1e-3)
    try:
        results = verify.run(args.filter, args.seed)
    finally:
        at.set_fault(0.0)
    if not results:
        print(f"no property matches {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    failed = []
    for p, out in results:
        status = "PASS" if out.ok else "FAIL"
        print(f"{status} {p.name}: measured {out.measured:.3e} (bound {out.bound:.1e}) {out.detail}".rstrip())
        if not out.ok:
            failed.append(p.name)
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def _split(root: Path, name: str) -> Path:
    return root / name if (root / name / "manifest.csv").is_file() else root


def cmd_synth(args) -> int:
    tr, ev = harness.synth_dataset(args.out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {tr} and {ev}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = resolve_config(args.config)
    root = Path(args.data)
    train_ds = harness.ingest(_split(root, "train"), num_classes=cfg.num_classes)
    eval_ds = harness.ingest(_split(root, "eval"), num_classes=cfg.num_classes)
    tcfg = harness.TrainConfig(seed=args.seed, input_size=cfg.image_size)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.batch_size is not None:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    if args.lr is not None:
        tcfg = replace(tcfg, base_lr=args.lr)
    res = harness.train(
        cfg, tcfg, train_ds, eval_ds, checkpoint_path=args.out, log_path=args.log,
        on_epoch=lambda r: print(f"epoch {r[0]} loss {r[1]:.4f} eval_top1 {r[2]:.4f} lr {r[3]:.3g}", flush=True),
    )
    print(f"final eval top-1 {res.rows[-1][2]:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    ds = harness.ingest(_split(Path(args.data), "eval"), num_classes=cfg.num_classes)
    print(f"{harness.evaluate((cfg, params), ds):.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    if args.data:
        ds = harness.ingest(_split(Path(args.data), "eval"), num_classes=cfg.num_classes)
        if not 0 <= args.sample < len(ds):
            raise UsageError(f"sample {args.sample} outside [0, {len(ds)})")
        image = ds.images[args.sample : args.sample + 1]
    else:
        image = np.random.default_rng(args.seed).random((1, cfg.image_size, cfg.image_size, cfg.in_channels))
    try:
        st, windows, mask = block_attention_input(cfg, params, image, args.stage, args.block)
        if not 0 <= args.window < windows.shape[0]:
            raise IndexError(f"window {args.window} outside [0, {windows.shape[0]})")
        w = args.window
        win_mask = None if mask is None else at.WindowMask(mask.additive[w : w + 1], mask.keep[w : w + 1])
        prefix = f"stages.{args.stage}.blocks.{args.block}.attn"
        prof = at.bias_profile(st.attention, attention_params(params, prefix), windows.data[w : w + 1], args.query, args.head, win_mask)
    except IndexError as e:
        raise UsageError(str(e)) from None
    Path(args.out).write_text(prof.to_csv(), encoding="utf-8")
    print(f"wrote {args.out} ({prof.ds.size} keys, window {st.window}x{st.window})")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg, _ = resolve_config(args.config)
    save_checkpoint(cfg, init_model(cfg, args.seed), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsla", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("report", help="parameter / FLOP report")
    p.add_argument("--config", required=True, help="preset name or key=value config file")
    p.add_argument("--variant", choices=["qkv", "qxv", "qxx"])
    p.add_argument("--no-projection", action="store_true")
    p.add_argument("--bias-mode", choices=["direct", "table"])
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--filter", help="glob over property names")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write a synthetic grating dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=128)
    p.add_argument("--size", type=int, default=56)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump one query's scale / bias / attention profile as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset root; defaults to a seeded random probe image")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("init", help="write a freshly initialised checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_init)
    return ap


def _thread_limit():
    from threadpoolctl import threadpool_limits

    try:
        n = int(os.environ.get("LSLA_NUM_THREADS", "1"))
    except ValueError:
        n = 1
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except harness.SizeMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except harness.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (harness.DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
