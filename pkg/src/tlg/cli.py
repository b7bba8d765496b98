"""Command-line entry point: train, eval, ablate, inspect, validate-prompts.

Every command writes one run directory (under ``$TLG_RUNS_DIR`` or ./runs)
holding a manifest with the effective config, its hash, the seed and the
output paths.  Exit codes: 0 ok, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import Config, describe_keys, load_config
from .errors import ConfigError, TLGError
from .runs import RunDir, now

log = logging.getLogger("tlg")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _keys_epilog() -> str:
    return "config keys (override with --set section.key=value):\n" + "\n".join(
        "  " + line for line in describe_keys())


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value; repeatable, last writer wins")
    p.add_argument("--runs-dir", help="output root (default: $TLG_RUNS_DIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="tlg", description=__doc__, epilog=_keys_epilog(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training on one fold", epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--support-layers", help="shortcut for --set layers.support=...")
    p.add_argument("--query-layers", help="shortcut for --set layers.query=...")

    p = sub.add_parser("eval", help="meta-test checkpoints on their held-out folds",
                       epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", nargs="+", required=True, help="one checkpoint per fold")
    p.add_argument("--shots", nargs="+", type=int, default=[1], choices=[1, 5])
    p.add_argument("--episodes", type=int, help="episodes per fold (default: train.eval_episodes)")
    p.add_argument("--seed", type=int, help="episode seed (default: train.seed)")

    p = sub.add_parser("ablate", help="train and evaluate an ablation grid", epilog=_keys_epilog(),
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--grid", choices=["layers", "modules", "loss"], required=True)
    p.add_argument("--folds", nargs="+", type=int, help="folds to average (default: data.fold)")

    p = sub.add_parser("inspect", help="render features, attention, transport plan and masks to PNGs",
                       epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode", type=int, required=True,
                   help="index into the evaluation episode stream, 0 <= id < train.eval_episodes")
    p.add_argument("--taps", help="comma-separated taps to render (default: all taps the model reads)")
    p.add_argument("--seed", type=int, help="episode seed (default: train.seed)")

    p = sub.add_parser("validate-prompts", help="check a prompt bank against the dataset categories",
                       epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--bank", help="bank name or CSV path (default: hc.bank)")
    return parser


def _config(args) -> Config:
    overrides = list(args.overrides)
    if getattr(args, "support_layers", None):
        overrides.append(f"layers.support={args.support_layers}")
    if getattr(args, "query_layers", None):
        overrides.append(f"layers.query={args.query_layers}")
    return load_config(args.config, overrides)


def _run(args, cfg: Config, command: str) -> RunDir:
    run = RunDir.create(command, cfg.config_hash(), args.runs_dir)
    run.write_manifest(command=command, argv=sys.argv[1:], config_path=args.config, overrides=args.overrides,
                       config=cfg.to_dict(), config_hash=cfg.config_hash(), seed=cfg.train.seed,
                       started=now(), status="running", outputs=[])
    return run


def _finish(run: RunDir, outputs, **extra):
    run.write_manifest(status="ok", finished=now(), outputs=sorted(str(Path(o).name) for o in outputs), **extra)


def cmd_train(args) -> int:
    from .train import dataset_for, train

    cfg = _config(args)
    run = _run(args, cfg, "train")
    print(f"run directory: {run.path}")
    ds = dataset_for(cfg)
    result = train(cfg, ds, run=run, progress=lambda r: print(
        f"epoch {r['epoch']:3d}  loss {r['train_loss']:.4f}  val mIoU {r['val_miou']:.4f}", flush=True))
    _finish(run, ["metrics.csv", "checkpoint.pt"], best_epoch=result.best_epoch, best_val_miou=result.best_val)
    print(f"best val mIoU {result.best_val:.4f} at epoch {result.best_epoch}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import combine_reports, count_learnable_parameters, dataset_for, evaluate, load_checkpoint, split_for

    cfg = _config(args) if (args.config or args.overrides) else None
    loaded = [load_checkpoint(path, cfg) for path in args.checkpoint]
    base = loaded[0][1]
    run = _run(args, base, "eval")
    run.write_manifest(checkpoints=[str(Path(c).resolve()) for c in args.checkpoint], shots=args.shots)
    ds = dataset_for(base)
    outputs = []
    for shot in args.shots:
        reports = []
        for model, mcfg in loaded:
            split = split_for(mcfg, ds.n_categories)
            n = args.episodes or mcfg.train.eval_episodes
            seed = mcfg.train.seed if args.seed is None else args.seed
            reports.append(evaluate(model, ds, split, shot, n, seed, mcfg.train.batch_size,
                                    config_hash=mcfg.config_hash()))
        rep = combine_reports(reports)
        print(f"{shot}-shot  learnable params {count_learnable_parameters(loaded[0][0])}")
        for row in rep.fold_rows():
            print(f"  fold {row['fold']}: mIoU {row['miou']:.4f}")
        print(f"  mean mIoU {rep.mean_miou:.4f} over {rep.episode_count} episodes")
        outputs.append(run.write_json(f"report_{shot}shot.json", rep.to_dict()))
        outputs.append(run.write_csv(f"folds_{shot}shot.csv", rep.fold_rows()))
    _finish(run, outputs)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import grid_points, run_ablation

    cfg = _config(args)
    run = _run(args, cfg, "ablate")
    run.write_manifest(grid=args.grid, folds=args.folds)
    rows = run_ablation(cfg, grid_points(args.grid), run=run, folds=args.folds)
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['point']:<28} mIoU {r['mean_miou']:.4f}  params {r['learnable_parameters']}")
        else:
            print(f"{r['point']:<28} skipped: {r['reason']}")
    _finish(run, ["ablation.csv"])
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .data import collate, sample_episode
    from .visualize import render_episode
    from .train import dataset_for, load_checkpoint, split_for

    cfg = _config(args) if (args.config or args.overrides) else None
    model, mcfg = load_checkpoint(args.checkpoint, cfg)
    if not 0 <= args.episode < mcfg.train.eval_episodes:
        raise TLGError(f"episode {args.episode} does not exist; valid ids are 0..{mcfg.train.eval_episodes - 1}")
    run = _run(args, mcfg, "inspect")
    ds = dataset_for(mcfg)
    split = split_for(mcfg, ds.n_categories)
    seed = mcfg.train.seed if args.seed is None else args.seed
    episode = sample_episode(ds, split, mcfg.data.shot, seed, args.episode)
    taps = None
    if args.taps:
        taps = sorted({int(t) for t in args.taps.split(",")})
    outputs, summary = render_episode(model, collate([episode]), run.path, taps)
    summary.update(episode={"fold": episode.fold_id, "seed": seed, "index": args.episode,
                            "category": ds.category_names[episode.category_id]})
    outputs.append(run.write_json("inspect.json", summary))
    _finish(run, outputs)
    for o in outputs:
        print(o)
    return EXIT_OK


def cmd_validate_prompts(args) -> int:
    from .prompts import build_prompt_bank, encode_text
    from .train import dataset_for

    cfg = _config(args)
    bank_name = args.bank or cfg.hc.bank
    ds = dataset_for(cfg)
    bank = build_prompt_bank(list(ds.category_names), bank_name)
    fg = encode_text([bank[i].foreground_prompt for i in bank], cfg.hc.d_text).matrix
    sims = fg @ fg.T
    off = sims - torch.eye(len(bank), dtype=sims.dtype) * 2
    self_match = bool((sims.argmax(dim=1) == torch.arange(len(bank))).all())
    for i in bank:
        r = bank[i]
        print(f"{r.category_id:3d} {r.category_name:<16} gain={r.fine_grained_prompt!r} bg={r.background_prompts}")
    print(f"{len(bank)} categories covered by bank {bank_name}; max off-diagonal fg cosine "
          f"{float(off.max()):.3f}; every category matches itself: {self_match}")
    if not self_match:
        print("error: foreground embeddings do not separate the categories", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "inspect": cmd_inspect,
            "validate-prompts": cmd_validate_prompts}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TLGError, OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
