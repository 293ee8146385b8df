"""Command line entry point: ``hal synth|train|eval|ident|ablate|plot|convert``.

Exit codes: 0 success, 2 validation/format error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .core import ValidationError
from .net import NumericalError, load_checkpoint

log = logging.getLogger("hal")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
CHECKPOINT_NAME = "checkpoint.pt"
ABLATION_COLUMNS = ["EXP", "L_r", "L_s", "L_KL", "delta", "MoF", "IoU", "IoD"]


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME


def _load_model(args):
    """Model from the checkpoint; ``--config`` (if given) overrides data paths and eval settings."""
    out_guess = Path(args.out) if args.out else None
    if args.checkpoint:
        path = Path(args.checkpoint)
    elif out_guess is not None:
        path = out_guess / CHECKPOINT_NAME
    else:
        raise ValidationError("--checkpoint or --out is required")
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    model, ckpt_cfg, _ = load_checkpoint(path)
    cfg = runner.load_config(args.config) if args.config else ckpt_cfg
    return model, cfg


def _update_manifest(out: Path, **paths):
    """Record report paths in an existing manifest (no-op without one)."""
    path = out / "manifest.json"
    if not path.exists():
        return
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest.setdefault("reports", {}).update({k: str(v) for k, v in paths.items()})
    runner.ingest.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    cfg = runner.load_config(args.config)
    root = runner.synthesize(cfg, args.out or cfg.data_dir)
    print(f"wrote {cfg.synth_train_count} train / {cfg.synth_test_count} test sequences to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = runner.load_config(args.config)
    out = _out_dir(args, cfg)
    videos, cmap = runner.load_split_videos(cfg, args.split or "train")
    ckpt = _checkpoint_path(args, out)
    res = runner.train(cfg, videos, len(cmap), checkpoint_path=ckpt, progress=args.verbose)
    (out / "losses.csv").write_text(runner.curve_csv(res.curve), encoding="utf-8")
    runner.write_manifest(out, cfg, res, {"checkpoint": str(ckpt), "deterministic": args.deterministic})
    if res.curve:
        last = res.curve[-1]
        print("final epoch " + ", ".join(f"{k}={last[k]:.4f}" for k in runner.LOSS_COLUMNS[1:]))
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load_model(args)
    out = _out_dir(args, cfg)
    videos, _ = runner.load_split_videos(cfg, args.split or "test")
    report = runner.evaluate(model, videos, cfg, free=args.free_decode)
    # transcript-free results never overwrite the main report
    name = "eval_free.csv" if args.free_decode else "eval.csv"
    (out / name).write_text(report.to_csv(), encoding="utf-8")
    _update_manifest(out, **{name.replace(".csv", ""): out / name})
    print(report.table())
    return EXIT_OK


def cmd_ident(args) -> int:
    model, cfg = _load_model(args)
    out = _out_dir(args, cfg)
    videos, cmap = runner.load_split_videos(cfg, args.split or "test", with_sidecars=True)
    report = runner.identifiability(model, videos, cfg, runner.untrained_model(cfg, model.num_classes))
    (out / "ident.csv").write_text(report.to_csv(), encoding="utf-8")
    _update_manifest(out, ident=out / "ident.csv")
    for k, v in vars(report).items():
        print(f"{k:28s} {v:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = runner.load_config(args.config)
    out = _out_dir(args, cfg)
    train, cmap = runner.load_split_videos(cfg, "train")
    test, _ = runner.load_split_videos(cfg, args.split or "test")
    records = runner.run_ablation(cfg, train, test, len(cmap))
    summary = runner.ablation_summary(records)
    (out / "ablation.csv").write_text(runner.table_csv(summary, ABLATION_COLUMNS), encoding="utf-8")
    (out / "ablation_runs.csv").write_text(
        runner.table_csv(records, ABLATION_COLUMNS[:5] + ["seed", "MoF", "IoU", "IoD", "MoF_bg", "seconds"]),
        encoding="utf-8")
    if cfg.sensitivity_betas:
        sens = runner.run_sensitivity(cfg, train, test, len(cmap))
        (out / "sensitivity.csv").write_text(
            runner.table_csv(sens, ["beta", "seed", "MoF", "IoU", "IoD"]), encoding="utf-8")
    runner.write_manifest(out, cfg, None, {"ablation_runs": records})
    print(runner.table_csv(summary, ABLATION_COLUMNS), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    model, cfg = _load_model(args)
    out = _out_dir(args, cfg)
    videos, _ = runner.load_split_videos(cfg, args.split or "test")
    missing = runner.plot_data(model, videos, cfg, out, render=not args.no_render)
    for m in missing:
        print(f"missing: {m}")
    print(f"plot data written to {out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    """Raw headerless float32 dump (width ``--dim``) -> HSEQ."""
    if not (args.input and args.output and args.dim):
        raise ValidationError("convert needs --input, --output and --dim")
    feats = runner.ingest.convert_raw_features(args.input, args.output, args.dim)
    print(f"wrote {args.output}: T={feats.T} d={feats.d}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ident": cmd_ident,
            "ablate": cmd_ablate, "plot": cmd_plot, "convert": cmd_convert}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hal", description="Hierarchical action learning experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config (or a run manifest.json)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    p.add_argument("--out", help="output directory (defaults to the config's out_dir)")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.pt)")
    p.add_argument("--split", help="index file name or 'train'/'test'")
    p.add_argument("--free-decode", action="store_true", help="transcript-free argmax decoding")
    p.add_argument("--no-render", action="store_true", help="plot: skip image rendering")
    p.add_argument("--input", help="convert: raw float32 feature dump")
    p.add_argument("--output", help="convert: HSEQ file to write")
    p.add_argument("--dim", type=int, help="convert: feature width d")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("synth", "train", "ablate") and not args.config:
        print(f"hal {args.command}: --config is required", file=sys.stderr)
        return EXIT_VALIDATION
    runner.set_deterministic(args.deterministic)
    try:
        return COMMANDS[args.command](args)
    except (runner.NumericalAbort, NumericalError) as exc:
        print(f"hal {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"hal {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
