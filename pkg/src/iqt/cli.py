"""Command-line entry point: ``iqt <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import plotting
from .backbone import BackboneSpec, extract_features, load_feature_file, inception_backbone, save_feature_file
from .errors import IQTError
from .eval import (
    ablation_csv_rows,
    evaluate,
    format_ablation_table,
    format_report,
    poly3_fit,
    run_ablation,
    write_predictions_csv,
    write_report_csv,
)
from .io import RunConfig, decode_image, encode_pgm, parse_manifest
from .model import PRESETS, ModelConfig, TransformerConfig, preset_config
from .pipeline import TrainConfig, forward_score, load_checkpoint, save_checkpoint, score_pair, train
from .transformer import export_attention, heatmap_to_uint8

log = logging.getLogger("iqt")


def _add_common(p):
    p.add_argument("--config", type=Path, help="key = value settings file (default: $IQT_CONFIG)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model_flags(p):
    p.add_argument("--patch-size", type=int)
    p.add_argument("--backbone", choices=["toy-cnn", "feature-file"])
    p.add_argument("--backbone-stages", type=int)
    p.add_argument("--backbone-channels", type=int)
    p.add_argument("--downsample", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--ff-dim", type=int)
    p.add_argument("--head-dim", type=int)


def _add_train_flags(p):
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--steps", dest="total_steps", type=int)
    p.add_argument("--flip", choices=["true", "false"])
    p.add_argument("--rotate", choices=["true", "false"])


def build_parser():
    parser = argparse.ArgumentParser(prog="iqt", description="Full-reference image quality transformer")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train on a manifest and write a checkpoint")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("score", help="print the quality score of one pair")
    _add_common(p)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--dist", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("eval", help="correlate predictions with MOS over a manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("ablate", help="train and compare every encoder/decoder input routing")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--train-manifest", type=Path)
    p.add_argument("--eval-manifest", type=Path)
    p.add_argument("--probe-only", action="store_true", help="only verify routings, no training")

    p = sub.add_parser("attn-export", help="write the averaged attention map of a centre crop")
    _add_common(p)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--dist", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("extract-features", help="write toy-backbone features of an image as IQTF")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--name", default=None, help="output file name (default: <image stem>.iqtf)")
    return parser


def _run_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_env()
    keys = ["preset", "seed", "patch_size", "batch_size", "lr0", "total_steps", "flip", "rotate", "backbone",
            "backbone_stages", "backbone_channels", "downsample", "layers", "heads", "dim", "ff_dim", "head_dim"]
    return cfg.override(**{k: getattr(args, k, None) for k in keys})


def _model_config(rc):
    preset = rc.get("preset", "iqt")
    kind = rc.get("backbone", "toy-cnn")
    if kind == "feature-file":
        backbone = inception_backbone(seed=rc.get("seed", 0))
    else:
        backbone = BackboneSpec(seed=rc.get("seed", 0))
    backbone = replace(
        backbone,
        stages=rc.get("backbone_stages", backbone.stages),
        channels=rc.get("backbone_channels", backbone.channels),
        downsample=rc.get("downsample", backbone.downsample),
    )
    base = preset_config(preset, backbone=backbone)
    t = base.transformer
    transformer = TransformerConfig(
        layers=rc.get("layers", t.layers),
        heads=rc.get("heads", t.heads),
        dim=rc.get("dim", t.dim),
        ff_dim=rc.get("ff_dim", t.ff_dim),
        head_dim=rc.get("head_dim", t.head_dim),
    )
    return ModelConfig(transformer, backbone, rc.get("patch_size", base.patch_size), base.routing)


def _train_config(rc, model_cfg):
    return TrainConfig(
        patch_size=model_cfg.patch_size,
        batch_size=rc.get("batch_size", 16),
        lr0=rc.get("lr0", 2e-4),
        total_steps=rc.get("total_steps", 1000),
        seed=rc.get("seed", 0),
        flip=rc.get("flip", True),
        rotate=rc.get("rotate", True),
    )


def _out_dir(args, default="iqt-out"):
    out = args.out_dir or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_input(path):
    return load_feature_file(path) if Path(path).suffix == ".iqtf" else decode_image(path)


# --- commands --------------------------------------------------------------


def cmd_train(args):
    rc = _run_config(args)
    model_cfg = _model_config(rc)
    cfg = _train_config(rc, model_cfg)
    out = _out_dir(args)
    ckpt = train(parse_manifest(args.manifest), cfg, model_cfg, log_path=out / "loss.csv")
    save_checkpoint(ckpt, out / "model.iqtc")
    if ckpt.history:
        plotting.plot_loss_curve(ckpt.history, out / "loss.png")
        print(f"final mse {ckpt.history[-1][2]!r}")
    print(out / "model.iqtc")
    return 0


def cmd_score(args):
    model = load_checkpoint(args.ckpt).model()
    ref, dist = _load_input(args.ref), _load_input(args.dist)
    if model.config.backbone.kind == "feature-file":
        score = model.score_features(ref, dist)
    else:
        score = score_pair(ref, dist, model)
    print(repr(score))
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.ckpt).model()
    out = _out_dir(args)
    report, used, preds = evaluate(parse_manifest(args.manifest), model)
    write_report_csv(out / "report.csv", [report])
    write_predictions_csv(out / "predictions.csv", used, preds)
    (out / "report.txt").write_text(format_report(report), encoding="utf-8")
    mos = [e.mos for e in used]
    plotting.plot_scatter(preds, mos, out / "scatter.png", report, poly3_fit(preds, mos))
    print(format_report(report), end="")
    return 0


def cmd_ablate(args):
    rc = _run_config(args)
    model_cfg = _model_config(rc)
    cfg = _train_config(rc, model_cfg)
    out = _out_dir(args)
    if args.probe_only:
        train_entries = eval_entries = []
    else:
        if not (args.train_manifest and args.eval_manifest):
            raise IQTError("--train-manifest and --eval-manifest are required unless --probe-only is given")
        train_entries = parse_manifest(args.train_manifest)
        eval_entries = parse_manifest(args.eval_manifest)
    rows = run_ablation(train_entries, eval_entries, model_cfg, cfg, probe_only=args.probe_only)
    write_report_csv(out / "ablation.csv", ablation_csv_rows(rows))
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    plotting.plot_ablation(rows, out / "ablation.png")
    print(table, end="")
    return 1 if any(r.error for r in rows) else 0


def cmd_attn_export(args):
    model = load_checkpoint(args.ckpt).model()
    ref, dist = decode_image(args.ref), decode_image(args.dist)
    p = model.config.patch_size
    if ref.pixels.shape != dist.pixels.shape:
        raise IQTError(f"{args.ref} and {args.dist} differ in size")
    if ref.height < p or ref.width < p:
        raise IQTError(f"images must be at least {p}x{p} for attention export")
    top, left = (ref.height - p) // 2, (ref.width - p) // 2
    ref_c, dist_c = ref.crop(top, left, p), dist.crop(top, left, p)
    records = []
    score = forward_score(ref_c, dist_c, model, records=records)
    heat = export_attention(records, p, p, grid=model.config.grid)
    out = _out_dir(args)
    (out / "attention.pgm").write_bytes(encode_pgm(heatmap_to_uint8(heat)))
    plotting.plot_attention(dist_c.pixels, heat, out / "attention.png")
    print(repr(score))
    return 0


def cmd_extract_features(args):
    rc = _run_config(args)
    model_cfg = _model_config(rc)
    if model_cfg.backbone.kind != "toy-cnn":
        raise IQTError("extract-features runs the toy backbone; feature-file features come from elsewhere")
    fmap = extract_features(decode_image(args.image), model_cfg.backbone)
    out = _out_dir(args)
    path = out / (args.name or f"{args.image.stem}.iqtf")
    save_feature_file(fmap, path)
    print(f"{path} {fmap.height}x{fmap.width}x{fmap.channels}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attn-export": cmd_attn_export,
    "extract-features": cmd_extract_features,
}


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (IQTError, OSError) as exc:
        print(f"iqt {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
