"""``icre`` command line: gen-synthetic, train, eval, ablate, plot-dist."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from pathlib import Path

from . import config as cfgio
from .dataset import Split, generate_synthetic, load_manifest
from .harness import (
    TrainConfig,
    ablate,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    param_hash,
    plot_dist,
    rows_to_csv,
    summarize,
    train,
)
from .metrics import Metric, ProtocolConfig


def _train_config(path) -> TrainConfig:
    return cfgio.from_mapping(TrainConfig, cfgio.read_flat(path)) if path else TrainConfig()


def _protocol(path) -> ProtocolConfig:
    return cfgio.from_mapping(ProtocolConfig, cfgio.read_flat(path)) if path else ProtocolConfig()


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gen_synthetic(args) -> None:
    size = tuple(int(v) for v in args.size.lower().split("x"))
    out = {}
    for split in Split:
        m = generate_synthetic(args.ids, args.per_id, size, args.seed, args.out, split)
        out[split.value.lower()] = {"records": len(m), "n_vis": m.n_vis, "n_ir": m.n_ir,
                                    "manifest": str(Path(args.out) / f"{split.value.lower()}.csv")}
    _emit(out)


def cmd_train(args) -> None:
    cfg = _train_config(args.config)
    manifest = load_manifest(args.manifest, Split.TRAIN)
    trainer = train(cfg, manifest, args.out)
    summary = {"checkpoint": str(Path(args.out) / "checkpoint.pt"), "epochs": trainer.epoch,
               "final": trainer.history[-1] if trainer.history else None,
               "param_hash": param_hash(trainer.model), "report": list(manifest.report)}
    if args.query and args.gallery:
        rep = evaluate(trainer.model, cfg, load_manifest(args.query, Split.QUERY),
                       load_manifest(args.gallery, Split.GALLERY), _protocol(args.protocol))
        (Path(args.out) / "eval.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        summary["eval"] = rep.to_dict()
    _emit(summary)


def cmd_eval(args) -> None:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    rep = evaluate(model, cfg, load_manifest(args.query, Split.QUERY), load_manifest(args.gallery, Split.GALLERY),
                   _protocol(args.protocol))
    _emit(rep.to_dict(), args.out)


def cmd_ablate(args) -> None:
    base = _train_config(args.config)
    grid = {name: {k: cfgio.coerce(v, _field_type(k)) for k, v in kv.items()}
            for name, kv in cfgio.read_sections(args.grid).items()}
    for flag in ("manifest", "query", "gallery"):
        if getattr(args, flag) is None:
            raise ValueError(f"ablate needs --{flag}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = ablate(base, grid, load_manifest(args.manifest, Split.TRAIN), load_manifest(args.query, Split.QUERY),
                  load_manifest(args.gallery, Split.GALLERY), _protocol(args.protocol), seeds=seeds)
    if args.out:
        Path(args.out).write_text(rows_to_csv(rows), encoding="utf-8")
    else:
        sys.stdout.write(rows_to_csv(rows))
    print(json.dumps({"median_mAP": summarize(rows), "median_R1": summarize(rows, "R1")}, sort_keys=True),
          file=sys.stderr)


def _field_type(name):
    hints = typing.get_type_hints(TrainConfig)
    if name not in hints:
        raise cfgio.ConfigError(f"unknown TrainConfig key {name!r}")
    return hints[name]


def cmd_plot_dist(args) -> None:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    hist = plot_dist(model, cfg, load_manifest(args.manifest, Split.QUERY), bins=args.bins, metric=Metric(args.metric))
    Path(args.out).write_text(hist.to_csv(), encoding="utf-8")
    _emit({"csv": args.out, "intra_mean": hist.intra_mean, "inter_mean": hist.inter_mean, "gap": hist.gap})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icre", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="render a synthetic two-modality dataset")
    g.add_argument("--ids", type=int, default=10)
    g.add_argument("--per-id", type=int, default=20, help="images per identity per modality")
    g.add_argument("--size", default="64x32", help="HxW")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--query")
    t.add_argument("--gallery")
    t.add_argument("--protocol")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--query", required=True)
    e.add_argument("--gallery", required=True)
    e.add_argument("--protocol")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate a grid of component switches")
    a.add_argument("--config")
    a.add_argument("--grid", required=True)
    a.add_argument("--manifest")
    a.add_argument("--query")
    a.add_argument("--gallery")
    a.add_argument("--protocol")
    a.add_argument("--seeds", help="comma-separated seeds")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("plot-dist", help="cross-modal distance histograms as CSV")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--bins", type=int, default=50)
    d.add_argument("--metric", default="COSINE_DISTANCE", choices=[m.value for m in Metric])
    d.set_defaults(func=cmd_plot_dist)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
