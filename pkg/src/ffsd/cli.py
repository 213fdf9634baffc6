"""Command-line entry points: ``ffsd train | eval | ablate | export-attention``.

Exit codes: 0 on success, 1 when a run fails (divergence, I/O, damaged
files), 2 for configuration errors. ``FFSD_OUTPUT_ROOT`` prefixes every
relative output directory.
"""
import argparse
import csv
import itertools
import json
import logging
import statistics
import sys
from pathlib import Path

from .config import apply_overrides, config_diff, config_hash, load_config, loads, tomllib
from .data import AugmentationPolicy, load_datasets, make_batch
from .evaluation import evaluate_group, export_attention
from .exceptions import ConfigError, FormatError, TrainingAborted
from .trainer import VARIANTS, load_checkpoint, resolve_output_dir, run_experiment

logger = logging.getLogger("ffsd")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2
SUMMARY_METRICS = ("student_mean", "ens_acc", "fusion_acc", "leader_acc", "cosine")


def _load(args):
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def cmd_train(args):
    cfg = _load(args)
    if args.output_dir:
        cfg = cfg.replace(train=dict(output_dir=args.output_dir))
    result = run_experiment(cfg, resume=not args.no_resume)
    print(f"{result.config_hash} {cfg.distill.variant}: "
          + ", ".join(f"{k} {v:.2f}" for k, v in result.table_row().items() if v is not None))
    print(f"report: {Path(result.output_dir) / 'report.json'}")
    return EXIT_OK


def _checkpoint_config(args):
    group, manifest, cfg = load_checkpoint(args.checkpoint)
    if args.set:
        wanted = apply_overrides(cfg, args.set)
        if config_hash(wanted) != manifest["config_hash"]:
            raise ConfigError("overrides change the config hash of the checkpoint: "
                              + "; ".join(config_diff(cfg, wanted)))
        cfg = wanted
    return group, manifest, cfg


def cmd_eval(args):
    group, manifest, cfg = _checkpoint_config(args)
    train_set, test_set = load_datasets(cfg)
    policy = AugmentationPolicy.from_dataset(train_set, cfg.data.pad, cfg.data.flip_p, cfg.data.augment)
    flags = VARIANTS[cfg.distill.variant]
    report = evaluate_group(group, test_set, policy, cfg.train.eval_batch_size, fusion=flags.leader,
                            leader=flags.leader)
    out = {"config_hash": manifest["config_hash"], "epoch": manifest["epoch"], **report.to_dict()}
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.output:
        Path(args.output).write_text(text)
    if args.export_attention:
        _export(group, cfg, manifest, test_set, policy, args.export_attention, "leader" if flags.leader else "student_1",
                args.samples)
    return EXIT_OK


def _export(group, cfg, manifest, test_set, policy, path, component, samples):
    components = group.components()
    if component not in components or not component.startswith(("leader", "student_")):
        raise ConfigError(f"cannot export attention of {component!r}; choose leader or student_<i>")
    ids = list(range(min(samples, len(test_set))))
    x, _ = make_batch(test_set, ids, policy, train=False)
    meta = {"config_hash": manifest["config_hash"], "component": component, "split": "test"}
    export_attention(components[component], x, path, ids, meta=meta)
    logger.info("wrote %d attention maps to %s", len(ids) * len(group.tap_shapes), path)


def cmd_export_attention(args):
    group, manifest, cfg = _checkpoint_config(args)
    train_set, test_set = load_datasets(cfg)
    policy = AugmentationPolicy.from_dataset(train_set, cfg.data.pad, cfg.data.flip_p, cfg.data.augment)
    _export(group, cfg, manifest, test_set, policy, args.output, args.component, args.samples)
    print(args.output)
    return EXIT_OK


# --- ablation grids ------------------------------------------------------

def load_grid(path):
    """Parse a grid file.

    Keys: ``base`` (preset name or config path, relative to the grid file
    when it exists there), optional ``set`` (list of overrides applied to
    every cell), optional ``name``, and an ``[axes]`` table mapping
    ``"section.key"`` to the list of values to sweep.
    """
    path = Path(path)
    try:
        grid = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed grid file {path}: {exc}") from exc
    unknown = set(grid) - {"base", "set", "axes", "name"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {', '.join(sorted(unknown))}")
    if "base" not in grid or not grid.get("axes"):
        raise ConfigError("grid file needs 'base' and a non-empty [axes] table")
    base_path = path.parent / grid["base"]
    base = loads(base_path.read_text()) if base_path.is_file() else load_config(grid["base"])
    base = apply_overrides(base, grid.get("set", []))
    axes = grid["axes"]
    for key, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis {key!r} must be a non-empty list")
    return grid.get("name", path.stem), base, axes


def _toml_value(v):
    return json.dumps(v) if isinstance(v, str) else str(v).lower() if isinstance(v, bool) else str(v)


def grid_cells(base, axes):
    keys = list(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        point = dict(zip(keys, combo))
        cfg = apply_overrides(base, [f"{k}={_toml_value(v)}" for k, v in point.items()])
        yield point, cfg


def summarize(rows, axes):
    """Mean and population std over seeds for every non-seed axis point."""
    group_keys = [k for k in axes if k != "train.seed"]
    groups = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        groups.setdefault(tuple(row[k] for k in group_keys), []).append(row)
    out = []
    for key, members in groups.items():
        s = dict(zip(group_keys, key), runs=len(members))
        metrics = [m for m in members[0] if m.startswith("student_") and m.endswith("_acc")] + list(SUMMARY_METRICS)
        for m in metrics:
            vals = [r[m] for r in members if r.get(m) not in (None, "")]
            s[f"{m}_mean"] = statistics.fmean(vals) if vals else None
            s[f"{m}_std"] = statistics.pstdev(vals) if vals else None
        out.append(s)
    return out


def _write_csv(path, rows):
    fields = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def cmd_ablate(args):
    name, base, axes = load_grid(args.grid)
    root = Path(args.output_dir) if args.output_dir else Path(base.train.output_dir).parent / f"ablate-{name}"
    rows, failed = [], 0
    for point, cfg in grid_cells(base, axes):
        chash = config_hash(cfg)
        cfg = cfg.replace(train=dict(output_dir=str(root / "cells" / chash)))
        out = resolve_output_dir(cfg)
        row = {"config_hash": chash, **point}
        if (out / "report.json").is_file():
            final = json.loads((out / "report.json").read_text())["final"]
            row["status"] = "ok"
            logger.info("cell %s %s already complete", chash, point)
        else:
            try:
                final = run_experiment(cfg).final
                row["status"] = "ok"
            except (TrainingAborted, OSError, FormatError) as exc:
                logger.error("cell %s %s failed: %s", chash, point, exc)
                failed += 1
                rows.append({**row, "status": "failed", "error": str(exc)})
                continue
        row.update({f"student_{i}_acc": a for i, a in enumerate(final["student_acc"], 1)})
        row.update({k: final[k] for k in ("student_mean", "ens_acc", "fusion_acc", "leader_acc", "cosine")})
        rows.append(row)
    out_root = resolve_output_dir(base.replace(train=dict(output_dir=str(root))))
    out_root.mkdir(parents=True, exist_ok=True)
    _write_csv(out_root / "cells.csv", rows)
    summary = summarize(rows, axes)
    if summary:
        _write_csv(out_root / "summary.csv", summary)
    for s in summary:
        label = ", ".join(f"{k}={s[k]}" for k in axes if k != "train.seed")
        cols = [f"{m} {s[m + '_mean']:.2f} ({s[m + '_std']:.2f})" for m in SUMMARY_METRICS
                if s.get(m + "_mean") is not None]
        print(f"{label} [{s['runs']} runs]: " + ", ".join(cols))
    print(f"summary: {out_root / 'summary.csv'}")
    if failed:
        print(f"{failed} of {len(rows)} cells failed", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ffsd", description="Online distillation with a leader, fusion and "
                                                         "self-distillation modules.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment")
    t.add_argument("--config", required=True, help="TOML file or preset name")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--output-dir")
    t.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint directory")
    e.add_argument("checkpoint")
    e.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    e.add_argument("--output", help="also write the report JSON here")
    e.add_argument("--export-attention", metavar="PATH")
    e.add_argument("--samples", type=int, default=16)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a variant x seed grid and aggregate")
    a.add_argument("--grid", required=True)
    a.add_argument("--output-dir")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-attention", help="dump normalized attention maps of one network")
    x.add_argument("checkpoint")
    x.add_argument("output")
    x.add_argument("--component", default="leader")
    x.add_argument("--samples", type=int, default=16)
    x.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    x.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
