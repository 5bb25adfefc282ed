"""Command-line entry point.

Subcommands: validate, train, eval, loo, cross, coloc, synth, patches.
Every command reads one JSON config (all knobs optional, schema-checked),
then applies `--set key=value` overrides and the convenience flags
`--out`, `--workers`, `--seed`.  Commands that write artifacts also write
a `run.json` with the fully resolved config and a sha256 per artifact, so
a run can be reproduced and verified byte for byte.

Exit codes: 0 success, 1 validation or metric failure, 2 I/O or config
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .dataset import (SchemaError, load_abundance_table, load_embedding_block,
                      load_spot_table, scan_abundance_csv, scan_spots_csv)
from .experiments import (ConfigError, ExperimentConfig, config_to_dict,
                          evaluate_predictions, generate_synthetic,
                          load_config_file, load_dataset, parse_config,
                          run_cross_dataset, run_loo, set_override)
from .experiments import _write_history  # shared artifact writer
from .patchprep import scan_patch_dir, write_fractions_csv
from .regressor import load_model, predict, save_model, train
from .spatial import (average_coloc, colocalization_matrix,
                      compare_colocalization, default_length_scale,
                      render_heatmap, upgma_order, write_coloc_csv)

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (dotted path)")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--workers", type=int, help="concurrent fold workers")
    common.add_argument("--seed", type=int, help="seed override (train.seed and synth.seed)")

    parser = argparse.ArgumentParser(
        prog="histocell",
        description="Cell-type abundance regression from histology patch "
                    "embeddings, with spatial colocalization analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common],
                   help="check dataset files against the CSV schemas")
    sub.add_parser("train", parents=[common],
                   help="train one model on every spot; write a checkpoint")
    sub.add_parser("eval", parents=[common],
                   help="evaluate a saved checkpoint on a dataset")
    loo = sub.add_parser("loo", parents=[common],
                         help="leave-one-patient-out cross-validation")
    loo.add_argument("--fold", action="append", default=None, metavar="PATIENT",
                     help="re-run only this fold (repeatable)")
    sub.add_parser("cross", parents=[common],
                   help="train on one dataset, evaluate on another")
    sub.add_parser("coloc", parents=[common],
                   help="colocalization matrices and heatmaps per sample")
    sub.add_parser("synth", parents=[common],
                   help="generate a seeded synthetic dataset")
    sub.add_parser("patches", parents=[common],
                   help="background fractions for a directory of patch PNGs")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    raw = load_config_file(args.config) if args.config else {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_override(raw, key, value)
    if args.out is not None:
        raw["out"] = args.out
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.seed is not None:
        set_override(raw, "train.seed", str(args.seed))
        set_override(raw, "synth.seed", str(args.seed))
    return parse_config(raw)


def _require_out(cfg: ExperimentConfig) -> Path:
    if cfg.out_dir is None:
        raise ConfigError("an output directory is required (--out or config 'out')")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_record(out_dir: Path, command: str, cfg: ExperimentConfig,
                      overrides) -> None:
    artifacts = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "run.json":
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            artifacts[path.relative_to(out_dir).as_posix()] = digest
    record = {
        "command": command,
        "config": config_to_dict(cfg),
        "overrides": list(overrides),
        "artifacts": artifacts,
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as handle:
        json.dump(record, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def _summary_line(s: dict) -> str:
    return (f"mean CC {_fmt(s.get('mean_cc'))} L1 {_fmt(s.get('l1'))} "
            f"coloc cosine {_fmt(s.get('coloc_cosine'))} "
            f"correlation {_fmt(s.get('coloc_correlation'))}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = _resolve_config(args)
    if cfg.spots is None or cfg.abundances is None:
        raise ConfigError("validate needs dataset.spots and dataset.abundances")
    findings = scan_spots_csv(cfg.spots)
    spot_ids = None
    if not findings:
        spot_ids = load_spot_table(cfg.spots).spot_ids
    findings.extend(scan_abundance_csv(cfg.abundances, spot_ids=spot_ids))
    for path in cfg.embedding_blocks:
        try:
            load_embedding_block(path)
        except SchemaError as exc:
            findings.append(exc)
    for finding in findings:
        print(finding)
    if findings:
        print(f"{len(findings)} finding(s)")
        return 1
    print("ok")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    spots, truth = load_dataset(cfg)
    with threadpool_limits(limits=1):
        model, history = train(spots, truth, None, cfg.train)
    save_model(model, out / "model.ckpt")
    _write_history(history, out / "history.csv")
    _write_run_record(out, "train", cfg, args.overrides)
    last = f"; final total loss {history[-1]['total']:.6f}" if history else ""
    print(f"trained on {spots.n} spots ({spots.dim} -> {len(truth.cell_types)}){last}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if cfg.eval_model is None:
        raise ConfigError("eval needs a checkpoint path (eval.model)")
    out = _require_out(cfg)
    spots, truth = load_dataset(cfg)
    model = load_model(cfg.eval_model)
    with threadpool_limits(limits=1):
        pred = predict(model, spots, cell_types=truth.cell_types,
                       clamp=cfg.clamp_predictions)
        summary = evaluate_predictions("eval", pred, truth, spots, cfg, out)
    _write_run_record(out, "eval", cfg, args.overrides)
    print(_summary_line(summary))
    return 0


def cmd_loo(args) -> int:
    cfg = _resolve_config(args)
    _require_out(cfg)
    results = run_loo(cfg, fold_names=args.fold)
    _write_run_record(Path(cfg.out_dir), "loo", cfg, args.overrides)
    failed = [(name, detail) for name, status, detail in results if status != "ok"]
    ok = [detail for _, status, detail in results if status == "ok"]
    for name, detail in failed:
        print(f"fold {name} failed: {detail}", file=sys.stderr)
    if ok:
        keys = ("mean_cc", "l1", "coloc_cosine", "coloc_correlation")
        means = {}
        for key in keys:
            cells = [s[key] for s in ok if s.get(key) is not None]
            means[key] = sum(cells) / len(cells) if cells else None
        print(f"{len(ok)}/{len(results)} folds ok: " + _summary_line(means))
    return 0 if not failed else 1


def cmd_cross(args) -> int:
    cfg = _resolve_config(args)
    _require_out(cfg)
    summary = run_cross_dataset(cfg, cfg.test_side())
    _write_run_record(Path(cfg.out_dir), "cross", cfg, args.overrides)
    print(_summary_line(summary))
    return 0


def cmd_coloc(args) -> int:
    """Colocalization maps for the configured abundances (one CSV and SVG
    per sample); with coloc.predictions set, also compares prediction maps
    against them and prints the row-wise similarity."""
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    spots, truth = load_dataset(cfg)
    pred = None
    if cfg.coloc_predictions is not None:
        pred = load_abundance_table(cfg.coloc_predictions, spots, allow_negative=True)
        if set(pred.cell_types) != set(truth.cell_types):
            raise ValueError("prediction cell types differ from the dataset's")
        pred = pred.reorder_cell_types(truth.cell_types)

    samples: dict[str, list[str]] = {}
    for sid, sample in zip(spots.spot_ids, spots.sample_ids):
        samples.setdefault(sample, []).append(sid)

    mats_truth, mats_pred, weights = [], [], []
    with threadpool_limits(limits=1):
        for sample in sorted(samples):
            spots_s = spots.subset(samples[sample])
            if spots_s.n < 2:
                print(f"sample {sample}: fewer than 2 spots, skipped", file=sys.stderr)
                continue
            length_scale = cfg.length_scale
            if length_scale is None:
                length_scale = default_length_scale(spots_s.coords, cfg.nn_multiplier)
            cm = colocalization_matrix(truth.subset(samples[sample]), spots_s.coords,
                                       length_scale, sample_id=sample)
            write_coloc_csv(cm, out / f"coloc_{sample}.csv")
            (out / f"coloc_{sample}.svg").write_text(
                render_heatmap(cm, upgma_order(cm)), encoding="utf-8")
            mats_truth.append(cm)
            weights.append(spots_s.n)
            if pred is not None:
                cm_pred = colocalization_matrix(pred.subset(samples[sample]),
                                                spots_s.coords, length_scale,
                                                sample_id=sample)
                write_coloc_csv(cm_pred, out / f"pred_coloc_{sample}.csv")
                (out / f"pred_coloc_{sample}.svg").write_text(
                    render_heatmap(cm_pred, upgma_order(cm_pred)), encoding="utf-8")
                mats_pred.append(cm_pred)

    if not mats_truth:
        raise ValueError("no sample had enough spots for colocalization")
    _write_run_record(out, "coloc", cfg, args.overrides)
    if pred is not None:
        cosine, correlation = compare_colocalization(
            average_coloc(mats_pred, weights), average_coloc(mats_truth, weights))
        print(f"coloc cosine {cosine:.3f} correlation {correlation:.3f}")
    else:
        print(f"wrote colocalization for {len(mats_truth)} sample(s)")
    return 0


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    spots_path, abundance_path = generate_synthetic(cfg.synth, out)
    _write_run_record(out, "synth", cfg, args.overrides)
    print(f"wrote {spots_path} and {abundance_path}")
    return 0


def cmd_patches(args) -> int:
    cfg = _resolve_config(args)
    if cfg.patches_dir is None:
        raise ConfigError("patches needs a directory (patches.dir)")
    out = _require_out(cfg)
    fractions = scan_patch_dir(cfg.patches_dir, cfg.white_threshold)
    write_fractions_csv(fractions, out / "fractions.csv")
    _write_run_record(out, "patches", cfg, args.overrides)
    print(f"wrote background fractions for {len(fractions)} patch(es)")
    return 0


_COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "cross": cmd_cross,
    "coloc": cmd_coloc,
    "synth": cmd_synth,
    "patches": cmd_patches,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
