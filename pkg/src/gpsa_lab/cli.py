"""``gpsa-lab`` command line: train, eval, ablate, inspect and gradcheck.

Exit codes: 0 success, 1 numeric or training failure, 2 usage or config
error, 3 incompatible artifact (checkpoint that does not fit the config).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import config as C
from . import gradcheck as G
from . import metrics as MT
from . import model as M
from . import tensor as T
from . import trainer as TR
from .errors import ConfigError, ContractError, FormatError, GpsaError, NumericError, ShapeError

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_ARTIFACT = 0, 1, 2, 3


class ArtifactError(GpsaError):
    """A checkpoint or dump does not fit the requested run."""


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpsa-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "ablate", "inspect", "gradcheck"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config with model/train/data/inspect sections")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override such as train.epochs=0 (repeatable)")
        s.add_argument("--out", required=True, help="output directory")
        if name in ("eval", "inspect"):
            s.add_argument("--checkpoint", help="checkpoint directory (else a fresh model from the config)")
            s.add_argument("--mask-pos-embed", action="store_true")
            s.add_argument("--mask-attention", choices=("content", "position"))
        if name == "inspect":
            s.add_argument("--layer", type=int)
            s.add_argument("--head", type=int, action="append", dest="heads")
            s.add_argument("--query", type=int)
    return p


def _resolve(args) -> C.RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "checkpoint", None):
        overrides.append(("inspect.checkpoint", args.checkpoint))
    if getattr(args, "mask_pos_embed", False):
        overrides.append(("inspect.mask_pos_embed", True))
    if getattr(args, "mask_attention", None):
        overrides.append(("inspect.mask_attention", args.mask_attention))
    for flag in ("layer", "query"):
        if getattr(args, flag, None) is not None:
            overrides.append((f"inspect.{flag}", getattr(args, flag)))
    if getattr(args, "heads", None):
        overrides.append(("inspect.heads", list(args.heads)))
    cfg = C.load_config(args.config, overrides)
    mult = cfg.data.subsample_spec.epoch_multiplier
    if cfg.data.fraction < 1 and cfg.train.epoch_multiplier != mult:
        cfg.train = dataclasses.replace(cfg.train, epoch_multiplier=mult)
    return cfg


def _load_model(cfg: C.RunConfig) -> M.ConViT:
    if not cfg.inspect.checkpoint:
        return M.ConViT(cfg.model, seed=cfg.train.init_seed)
    try:
        model, _ = M.load_checkpoint(cfg.inspect.checkpoint)
    except (FormatError, ConfigError, ShapeError) as exc:
        raise ArtifactError(f"cannot use checkpoint {cfg.inspect.checkpoint}: {exc}") from None
    mc = model.config
    if (mc.image_size, mc.channels) != (cfg.model.image_size, cfg.model.channels):
        raise ArtifactError(f"checkpoint expects {mc.channels}x{mc.image_size}x{mc.image_size} images, "
                            f"config gives {cfg.model.channels}x{cfg.model.image_size}x{cfg.model.image_size}")
    return model


def _apply_masks(model: M.ConViT, ic: C.InspectConfig) -> None:
    M.mask_abs_pos_embed(model, ic.mask_pos_embed)
    if ic.mask_attention != "none":
        # masking content leaves the positional pathway, and vice versa
        mode = "position_only" if ic.mask_attention == "content" else "content_only"
        M.mask_attention_mode(model, mode)


def _check_images(model: M.ConViT, test) -> None:
    cfg = model.config
    if test.image_shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ArtifactError(f"dataset images {test.image_shape} do not fit the model")
    if test.num_classes > cfg.num_classes:
        raise ArtifactError(f"dataset has {test.num_classes} classes, model {cfg.num_classes}")


def cmd_train(cfg: C.RunConfig, out: Path) -> int:
    train_set, test_set = C.load_datasets(cfg.data, cfg.model)
    model = M.ConViT(cfg.model, seed=cfg.train.init_seed)
    log = TR.train(model, train_set, cfg.train, test_set, out)
    if len(log):
        last = log.rows[-1]
        print(f"epoch {last['epoch']}: loss {last['train_loss']:.4f} top1 {last['test_top1']:.2f}")
    print(f"wrote {out / 'runlog.csv'}")
    return EXIT_OK


def cmd_eval(cfg: C.RunConfig, out: Path) -> int:
    model = _load_model(cfg)
    _, test_set = C.load_datasets(cfg.data, cfg.model)
    _check_images(model, test_set)
    _apply_masks(model, cfg.inspect)
    ev = TR.evaluate(model, test_set, limit=cfg.train.eval_limit)
    (out / "eval.json").write_text(json.dumps(ev, indent=2, sort_keys=True) + "\n")
    print(f"top1 {ev['top1']:.2f} top5 {ev['top5']:.2f} loss {ev['loss']:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: C.RunConfig, out: Path) -> int:
    train_set, test_set = C.load_datasets(cfg.data, cfg.model)
    results = TR.ablation_suite(cfg.model, cfg.train, train_set, test_set, out)
    for r in results:
        print(f"{r['row_id']}: top1 {r['top1']:.2f}")
    return EXIT_OK


def cmd_inspect(cfg: C.RunConfig, out: Path) -> int:
    ic = cfg.inspect
    model = _load_model(cfg)
    _, test_set = C.load_datasets(cfg.data, cfg.model)
    _check_images(model, test_set)
    n_layers = len(model.blocks)
    if not 0 <= ic.layer < n_layers:
        raise ContractError(f"--layer {ic.layer} out of range (model has {n_layers} layers)")
    n_heads = model.config.num_heads
    heads = ic.heads or list(range(n_heads))
    bad = [h for h in heads if not 0 <= h < n_heads]
    if bad:
        raise ContractError(f"--head {bad[0]} out of range (model has {n_heads} heads)")
    grid = model.grid
    query = ic.query if ic.query >= 0 else grid.index(grid.rows // 2, grid.cols // 2)
    if not 0 <= query < grid.L:
        raise ContractError(f"--query {query} out of range (grid has {grid.L} patches)")
    _apply_masks(model, ic)
    with T.no_grad():
        _, record = model(test_set.images[:ic.probe_size], capture=True)
    MT.write_nonlocality_csv(out / "nonlocality.csv", [(0, MT.nonlocality_report(record))])
    if model.gpsa_blocks:
        MT.write_gating_csv(out / "gating.csv", MT.gating_summary(model))
    for h in heads:
        MT.export_attention_map(record, ic.layer, h, query, out / f"attn_l{ic.layer}_h{h}_q{query}.pgm")
    print(f"wrote nonlocality.csv and {len(heads)} attention maps to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: C.RunConfig, out: Path) -> int:
    report = G.run_gradcheck(cfg.model, seed=cfg.train.init_seed)
    lines = report.lines()
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not report.passed:
        failed = report.failures()
        ops = [e.name for e in failed if e.group.startswith("op:")]
        params = [e.name for e in failed if not e.group.startswith("op:")]
        print(f"gradcheck failed: ops {ops}; parameters {params}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _model_section(args) -> dict:
    """Model keys given explicitly (config file or overrides), for gradcheck."""
    raw = {}
    if args.config:
        raw = dict(json.loads(Path(args.config).read_text()).get("model", {}))
    for o in args.overrides:
        key, value = C.parse_override(o)
        if key.startswith("model."):
            raw[key[len("model."):]] = value
    return raw


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _resolve(args)
        if args.command == "gradcheck":
            # the finite-difference suite runs on the micro model unless told otherwise
            cfg.model = G.micro_config(**_model_section(args))
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.resolved.json")
        handler = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
                   "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}
        return handler[args.command](cfg, out)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
