"""Command-line entry point: ``dpk {train,distill,ablate,analyze-cka,dump-features}``.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from dpk.archive import ArchiveError, read_archive, write_archive
from dpk.config import ConfigError, DistillConfig, build_config, load_config, parse_override
from dpk.similarity import (
    MIN_BATCH,
    CosineProjector,
    DegenerateBatchError,
    cka_minibatch,
    cosine_gap,
    dynamic_ratio,
    merge_small_batches,
)

logger = logging.getLogger("dpk")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _config_from_args(args) -> DistillConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(("out", str(args.out)))
    if args.config is None:
        return build_config({}, overrides)
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from dpk.harness.train import run_baseline

    cfg = _config_from_args(args)
    result = run_baseline(cfg)
    print(f"top1={result.report.top1:.2f} top5={result.report.top5:.2f} -> {result.out_dir}")
    return EXIT_OK


def cmd_distill(args) -> int:
    from dpk.harness.train import run_distillation

    cfg = _config_from_args(args)
    result = run_distillation(cfg)
    print(f"top1={result.report.top1:.2f} top5={result.report.top5:.2f} -> {result.out_dir}")
    return EXIT_OK


def parse_sweep(items) -> list[dict]:
    """``["mask.ratio=0.15,0.35", "kd.region=full"]`` -> cartesian list of settings."""
    axes = []
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"sweep {item!r}: expected KEY=V1,V2,..."])
        values = [yaml.safe_load(v) for v in raw.split(",")]
        axes.append([(key.strip(), v) for v in values])
    return [dict(combo) for combo in itertools.product(*axes)] if axes else []


def setting_label(setting: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in setting.items()) or "base"


def run_ablation(cfg: DistillConfig, settings: list[dict], seeds, out_dir, teacher=None, datasets=None):
    """One distillation run per (setting, seed); returns per-run rows.

    Every setting is validated before the first run starts.
    """
    from dpk.harness.train import load_datasets, load_model, run_distillation

    settings = settings or [{}]
    configs = [(s, cfg.with_overrides(list(s.items()))) for s in settings]
    if teacher is None and cfg.model.teacher_checkpoint:
        teacher = load_model(cfg.model.teacher_checkpoint)
    datasets = datasets or load_datasets(cfg)
    out_dir = Path(out_dir)
    rows = []
    for i, (setting, scfg) in enumerate(configs):
        for seed in seeds:
            run_cfg = scfg.with_overrides([("seed", seed)])
            run_out = out_dir / f"setting{i:02d}" / f"seed{seed}"
            result = run_distillation(run_cfg, teacher=teacher, out_dir=run_out, datasets=datasets)
            rows.append({
                "setting": setting_label(setting), "seed": seed,
                "top1": result.report.top1, "top5": result.report.top5,
                "trace": result.trace,
            })
            logger.info("%s seed %s: top1 %.2f", setting_label(setting), seed, result.report.top1)
    _write_ablation_tables(out_dir, rows)
    return rows


def summarize(rows) -> list[dict]:
    by_setting: dict[str, list] = {}
    for r in rows:
        by_setting.setdefault(r["setting"], []).append(r)
    out = []
    for setting, rs in by_setting.items():
        top1 = np.array([r["top1"] for r in rs])
        top5 = np.array([r["top5"] for r in rs])
        out.append({
            "setting": setting, "n_seeds": len(rs),
            "top1_mean": float(top1.mean()), "top1_std": float(top1.std()),
            "top5_mean": float(top5.mean()),
        })
    return out


def _write_ablation_tables(out_dir: Path, rows) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "seed", "top1", "top5"])
        for r in rows:
            w.writerow([r["setting"], r["seed"], repr(r["top1"]), repr(r["top5"])])
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        fields = ["setting", "n_seeds", "top1_mean", "top1_std", "top5_mean"]
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for s in summarize(rows):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in s.items()})


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    settings = parse_sweep(args.sweep or [])
    seeds = [cfg.seed]
    if args.sweep_file:
        plan = yaml.safe_load(Path(args.sweep_file).read_text()) or {}
        settings += [dict(s) for s in plan.get("settings", [])]
        seeds = plan.get("seeds", seeds)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    for s in settings:
        cfg.with_overrides(list(s.items()))
    rows = run_ablation(cfg, settings, seeds, cfg.out)
    for s in summarize(rows):
        print(f"{s['setting']}: top1 {s['top1_mean']:.2f} (+/- {s['top1_std']:.2f}, n={s['n_seeds']})")
    return EXIT_OK


def _single_tensor(arrays: dict, name: str | None, path) -> tuple[str, np.ndarray]:
    if name is not None:
        if name not in arrays:
            raise UsageError(f"{path}: no tensor named {name!r} (has {sorted(arrays)})")
        return name, arrays[name]
    if len(arrays) != 1:
        raise UsageError(f"{path}: holds {len(arrays)} tensors; pick one with --tensor")
    return next(iter(arrays.items()))


def analyze_cka(archive_a, archive_b, batch_size: int = 32, out_dir=".", tensor: str | None = None,
                seed: int = 0) -> list[dict]:
    """Per-minibatch CKA between two feature dumps, sorted ascending.

    Writes ``cka.csv`` (step, stage, cka, cosine, ratio) and a ranked
    square heatmap ``cka_heatmap.png`` into ``out_dir``.
    """
    if batch_size < MIN_BATCH:
        raise UsageError(f"batch size must be >= {MIN_BATCH}, got {batch_size}")
    name, a = _single_tensor(read_archive(archive_a), tensor, archive_a)
    _, b = _single_tensor(read_archive(archive_b), tensor, archive_b)
    if len(a) != len(b):
        raise UsageError(f"archives hold different example counts: {len(a)} vs {len(b)}")
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    n = len(a)
    sizes = merge_small_batches([min(batch_size, n - i) for i in range(0, n, batch_size)])
    projector = CosineProjector(seed)
    rows = []
    start = 0
    for step, size in enumerate(sizes):
        x, y = a[start : start + size], b[start : start + size]
        start += size
        try:
            cka = cka_minibatch([x], [y])
            ratio = dynamic_ratio(cka)
        except (DegenerateBatchError, ValueError):
            cka, ratio = float("nan"), float("nan")
        rows.append({"step": step, "stage": name, "cka": cka,
                     "cosine": cosine_gap(x, y, projector), "ratio": ratio})
    rows.sort(key=lambda r: (math.isnan(r["cka"]), r["cka"], r["step"]))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cka.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", "cka", "cosine", "ratio"])
        for r in rows:
            w.writerow([r["step"], r["stage"], repr(r["cka"]), repr(r["cosine"]), repr(r["ratio"])])
    write_heatmap([r["cka"] for r in rows], out_dir / "cka_heatmap.png")
    return rows


def write_heatmap(values, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    side = max(1, math.ceil(math.sqrt(len(values))))
    grid = np.full(side * side, np.nan)
    grid[: len(values)] = values
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(grid.reshape(side, side), cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"CKA ({len(values)} batches, ranked)")
    fig.colorbar(im, ax=ax)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_analyze_cka(args) -> int:
    rows = analyze_cka(args.archive_a, args.archive_b, args.batch_size, args.out or ".", args.tensor)
    finite = [r["cka"] for r in rows if not math.isnan(r["cka"])]
    if finite:
        print(f"{len(rows)} batches, CKA mean {np.mean(finite):.4f} (min {min(finite):.4f}, max {max(finite):.4f})")
    return EXIT_OK


def dump_features(model, images: np.ndarray, stage: str, path, batch_size: int = 256) -> None:
    """Write one stage's activations for ``images`` to a DPKF archive."""
    import torch

    from dpk.harness.models import FeatureTaps

    taps = FeatureTaps(model, [stage])
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                model(torch.from_numpy(images[i : i + batch_size]))
                chunks.append(taps.features[stage].numpy())
    finally:
        taps.remove()
    write_archive(path, {stage: np.concatenate(chunks).astype(np.float32)})


def cmd_dump_features(args) -> int:
    from dpk.harness.train import load_datasets, load_model

    cfg = _config_from_args(args)
    model = load_model(args.checkpoint)
    _, test_set = load_datasets(cfg)
    dump_features(model, test_set.images, args.stage, args.output)
    print(f"wrote {args.stage} features for {len(test_set)} examples to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpk", description="Dynamic prior-knowledge distillation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("train", help="supervised baseline (teacher or scratch student)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a student from a trained teacher")
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="sweep config values, one distillation run each")
    common(p)
    p.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="values to sweep; several flags form a cartesian product")
    p.add_argument("--mask-strategy", help="shorthand for --sweep mask.strategy=...")
    p.add_argument("--sweep-file", type=Path, help="YAML with 'settings' (list of overrides) and 'seeds'")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-cka", help="per-batch CKA between two feature archives")
    p.add_argument("archive_a", type=Path)
    p.add_argument("archive_b", type=Path)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--tensor", help="tensor name when an archive holds several")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_analyze_cka)

    p = sub.add_parser("dump-features", help="write one stage's test-set activations to an archive")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--stage", default="stage4")
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "mask_strategy", None):
        args.sweep = (args.sweep or []) + [f"mask.strategy={args.mask_strategy}"]

    from dpk.harness.train import NonFiniteLossError, TeacherNotFoundError

    try:
        return args.func(args)
    except ConfigError as e:
        for msg in e.messages:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ArchiveError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except TeacherNotFoundError as e:
        print(f"error: teacher checkpoint missing: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NonFiniteLossError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
