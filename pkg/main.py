import argparse
import dataclasses
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from typing import Any, Optional

import numpy as np
from dotenv import load_dotenv
from loguru import logger

from flow import build_mermaid, create_al_flow, run_experiment, supervised_baseline
from utils.config import (
    SEED_SEPARATION,
    AugmentConfig,
    BudgetMode,
    ExperimentConfig,
    Policy,
    RunManifest,
    SeparationConfig,
    SeparationMethod,
    SupervoxelParams,
    derive_seed,
    load_config_file,
    merge_dicts,
)
from utils.errors import AlpcError, CloudFormatError, ConfigError
from utils.experiment_log import ExperimentLog
from utils.metrics import budget_at_target, confusion, miou, miou_at_90, region_area, summarize_seeds
from utils.plotting import plot_curves
from utils.pointcloud import read_cloud, save_cloud
from utils.regions import RegionSet, separate_regions
from utils.scene import SceneSpec, load_scene_spec, parse_scene_spec, scene_pair

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def setup_logging(verbose: bool = False) -> str:
    """stderr at LOGURU_LEVEL (INFO, or DEBUG with --verbose) plus a dated DEBUG file under LOG_DIR."""
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else os.getenv("LOGURU_LEVEL", "INFO"))
    log_directory = os.getenv("LOG_DIR", "logs")
    os.makedirs(log_directory, exist_ok=True)
    log_file = os.path.join(log_directory, f"alpc_{datetime.now().strftime('%Y%m%d')}.log")
    logger.add(log_file, level="DEBUG")
    return log_file


def add_supervoxel_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eps", type=float, help="DBSCAN radius in meters")
    parser.add_argument("--min-pts", type=int, help="DBSCAN core point threshold")
    parser.add_argument("--ransac-iterations", type=int, help="RANSAC iterations for the ground plane")
    parser.add_argument("--inlier-threshold", type=float, help="Ground plane inlier distance in meters")
    parser.add_argument("--ground-area", type=float, help="Target area in m² of one ground supervoxel")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Active learning for point cloud semantic segmentation")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging on stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Write a synthetic train/eval scene pair")
    generate.add_argument("--out", required=True, help="Output prefix; writes <out>_train.alpc and <out>_eval.alpc")
    generate.add_argument("--seed", type=int, help="Scene seed (default: the spec file's, else 0)")
    generate.add_argument("--spec", help="Scene spec file with key=value lines")
    generate.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a spec key")
    generate.add_argument("--extent", type=float, nargs=2, metavar=("X", "Y"), help="Scene extent in meters")
    generate.add_argument("--density", type=float, help="Points per m²")
    generate.add_argument("--partial", action="store_true", help="Hide the ground truth of a random half")
    generate.add_argument("--eval-offset", type=int, default=1, help="Seed offset of the evaluation scene")

    run = commands.add_parser("run", help="Run active-learning experiments")
    run.add_argument("--cloud", required=True, help="Training cloud (.alpc or .ply)")
    run.add_argument("--eval-cloud", help="Held-out evaluation cloud")
    run.add_argument("--eval-on-train", action="store_true", default=None, help="Evaluate on the training cloud")
    run.add_argument("--config", help="YAML experiment config; flags override it")
    run.add_argument("--policy", choices=[p.value for p in Policy] + ["all"], help="Acquisition policy")
    run.add_argument("--separation", choices=[m.value for m in SeparationMethod] + ["all"])
    run.add_argument("--r", type=float, nargs="+", help="Column edge length(s) in meters")
    run.add_argument("--cycles", type=int)
    run.add_argument("--budget-mode", choices=[m.value for m in BudgetMode])
    run.add_argument("--budget", type=float, help="Per-cycle budget amount")
    run.add_argument("--initial-budget-mode", choices=[m.value for m in BudgetMode])
    run.add_argument("--initial-budget", type=float, help="Seed budget amount")
    run.add_argument("--ensemble", type=int, help="Ensemble size N")
    run.add_argument("--lr", type=float)
    run.add_argument("--epochs", type=int)
    run.add_argument("--batch", type=int)
    run.add_argument("--l2", type=float)
    run.add_argument("--optimizer", choices=["sgd", "adam"])
    run.add_argument("--k-neighbors", type=int, help="Neighbourhood size of the geometric features")
    run.add_argument("--augment", help="Augmentation letters from S, R, E, C, or 'none'")
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--gamma", type=float)
    run.add_argument("--k-div", type=int, help="ReDAL diversity clusters")
    run.add_argument("--decay", type=float, help="ReDAL diversity decay")
    run.add_argument("--redal-single-member", action="store_true", default=None)
    run.add_argument("--ignore-class", type=int, action="append", help="Class excluded from mIoU")
    add_supervoxel_flags(run)
    run.add_argument("--seed", type=int, nargs="+", help="Master seed(s) (default: the config's seed)")
    run.add_argument("--out-dir", default="runs")
    run.add_argument("--curves", action="store_true", help="Write SVG learning curves")
    run.add_argument("--log-area", action="store_true", help="Log-scale area axis on the curves")
    run.add_argument("--baseline", action="store_true", help="Train the supervised baseline for mIoU@90")
    run.add_argument("--dump-scores", metavar="DIR", help="Write per-cycle region scores")
    run.add_argument("--jobs", type=int, default=1, help="Runs executed in parallel")
    run.add_argument("--mermaid", metavar="PATH", help="Write the active-learning flow as a mermaid graph")

    separate = commands.add_parser("separate", help="Split a cloud into regions and dump them")
    separate.add_argument("--cloud", required=True)
    separate.add_argument("--separation", choices=[m.value for m in SeparationMethod], default="columns")
    separate.add_argument("--r", type=float, default=0.5, help="Column edge length in meters")
    separate.add_argument("--seed", type=int, default=0)
    separate.add_argument("--out", help="Region dump file (stdout summary only when omitted)")
    add_supervoxel_flags(separate)

    evaluate = commands.add_parser("eval", help="Score predicted labels against a ground-truth cloud")
    evaluate.add_argument("--pred", required=True, help="One label per line, or a cloud whose labels are predictions")
    evaluate.add_argument("--cloud", required=True, help="Ground-truth cloud")
    evaluate.add_argument("--ignore-class", type=int, action="append", default=[])
    return parser


def _supervoxel_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "eps": args.eps,
        "min_pts": args.min_pts,
        "ransac_iterations": args.ransac_iterations,
        "inlier_threshold": args.inlier_threshold,
        "ground_region_target_area": args.ground_area,
    }


def flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Nested config mapping of the flags that were given; absent flags stay None and are ignored."""

    def single(value):
        return None if value in (None, "all") else value

    augment = AugmentConfig.from_letters(args.augment) if args.augment is not None else None
    return {
        "policy": single(args.policy),
        "cycles": args.cycles,
        "separation": {
            "method": single(args.separation),
            "r": args.r[0] if args.r else None,
            "supervoxel": _supervoxel_overrides(args),
        },
        "budget": {"mode": args.budget_mode, "amount": args.budget},
        "initial_budget": {"mode": args.initial_budget_mode, "amount": args.initial_budget},
        "learner": {
            "ensemble_size": args.ensemble,
            "lr": args.lr,
            "epochs": args.epochs,
            "batch": args.batch,
            "l2": args.l2,
            "optimizer": args.optimizer,
            "k_neighbors": args.k_neighbors,
        },
        "augment": dataclasses.asdict(augment) if augment else None,
        "redal": {
            "alpha": args.alpha,
            "beta": args.beta,
            "gamma": args.gamma,
            "k_div": args.k_div,
            "decay": args.decay,
            "single_member": args.redal_single_member,
        },
        "ignore_classes": args.ignore_class,
        "eval_on_train": args.eval_on_train,
    }


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the YAML file, then flags."""
    merged = merge_dicts(ExperimentConfig().to_dict(), load_config_file(args.config))
    merged = merge_dicts(merged, flag_overrides(args))
    return ExperimentConfig.from_dict(merged).validate()


def run_seeds(args: argparse.Namespace, base: ExperimentConfig) -> list[int]:
    return list(args.seed) if args.seed else [base.seed]


def build_manifest(args: argparse.Namespace, base: ExperimentConfig) -> tuple[RunManifest, list[str]]:
    """Expand policy/separation/edge-length/seed sweeps into named runs."""
    seeds = run_seeds(args, base)
    policies = list(Policy) if args.policy == "all" else [base.policy]
    methods = list(SeparationMethod) if args.separation == "all" else [base.separation.method]
    edges = args.r or [base.separation.r]
    runs, names = [], []
    for method in methods:
        for r in edges if method == SeparationMethod.COLUMNS else [base.separation.r]:
            separation = dataclasses.replace(base.separation, method=method, r=r)
            tag = f"{method.value}-r{r:g}" if method == SeparationMethod.COLUMNS and len(edges) > 1 else method.value
            for policy in policies:
                for seed in seeds:
                    config = dataclasses.replace(base, separation=separation, policy=policy, seed=seed).validate()
                    runs.append((config, seed))
                    names.append(f"{policy.value}_{tag}_{seed}")
    manifest = RunManifest(runs=runs, output_dir=args.out_dir, curves=args.curves)
    manifest.validate()
    return manifest, names


def cmd_generate(args: argparse.Namespace) -> int:
    spec = load_scene_spec(args.spec) if args.spec else SceneSpec()
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.extent:
        overrides["extent_x"], overrides["extent_y"] = args.extent
    if args.density is not None:
        overrides["density"] = args.density
    if args.partial:
        overrides["partial_annotation"] = True
    spec = parse_scene_spec(args.set, dataclasses.replace(spec, **overrides))
    train, evaluation = scene_pair(spec, args.eval_offset)
    for suffix, cloud in (("train", train), ("eval", evaluation)):
        path = f"{args.out}_{suffix}.alpc"
        save_cloud(cloud, path)
        print(f"{path}: {cloud.n} points, {cloud.class_count} classes")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    manifest, names = build_manifest(args, base)
    seeds = run_seeds(args, base)
    if args.mermaid:
        with open(args.mermaid, "w") as f:
            f.write(f"```mermaid\n{build_mermaid(create_al_flow())}\n```")

    cloud = read_cloud(args.cloud)
    eval_cloud = read_cloud(args.eval_cloud) if args.eval_cloud else None
    logger.info(f"Loaded {cloud.n} training points; {len(manifest.runs)} runs into {manifest.output_dir}")

    targets: dict[int, float] = {}
    if args.baseline:
        for seed in dict.fromkeys(seeds):
            full = supervised_baseline(dataclasses.replace(base, seed=seed), cloud, eval_cloud)
            targets[seed] = miou_at_90(full)
            print(f"baseline seed {seed}: supervised mIoU {full:.4f}, mIoU@90 {targets[seed]:.4f}")

    def run_one(job: tuple[tuple[ExperimentConfig, int], str]) -> ExperimentLog:
        (config, _), name = job
        out_path = os.path.join(manifest.output_dir, f"{name}.csv")
        try:
            return run_experiment(config, cloud, eval_cloud, out_path, args.dump_scores, run_name=name)
        except AlpcError as e:
            logger.error(f"{name}: {e}")
            raise

    with ThreadPoolExecutor(max_workers=args.jobs) as executor:
        logs = list(executor.map(run_one, zip(manifest.runs, names)))

    for ((config, seed), name, log) in zip(manifest.runs, names, logs):
        last = log.rows[-1]
        line = f"{name}: mIoU {last.miou:.4f} at {100 * last.labeled_fraction:.2f}% / {last.labeled_area_m2:.1f} m²"
        if seed in targets:
            reached = budget_at_target(log, targets[seed])
            line += (
                f"; mIoU@90 at {100 * reached[0]:.2f}% / {reached[1]:.1f} m²" if reached else "; mIoU@90 not reached"
            )
        print(line)

    if len(set(seeds)) > 1:
        for line in seed_summary_lines(manifest, names, logs, targets):
            print(line)

    if manifest.curves:
        for seed in dict.fromkeys(seeds):
            by_name = {n: log for (_, s), n, log in zip(manifest.runs, names, logs) if s == seed}
            path = os.path.join(manifest.output_dir, f"curves_{seed}.svg")
            plot_curves(by_name, path, targets.get(seed), args.log_area)
            print(path)
    return 0


def seed_summary_lines(
    manifest: RunManifest, names: list[str], logs: list[ExperimentLog], targets: dict[int, float]
) -> list[str]:
    """One line per configuration with mean ± std over its seeds, in manifest order."""
    groups: dict[str, list[tuple[int, ExperimentLog]]] = {}
    for (_, seed), name, log in zip(manifest.runs, names, logs):
        groups.setdefault(name.rsplit("_", 1)[0], []).append((seed, log))
    lines = []
    for key, runs in groups.items():
        run_logs = [log for _, log in runs]
        summary = summarize_seeds(run_logs, [targets.get(seed) for seed, _ in runs] if targets else None)
        line = f"{key} over {summary.runs} seeds: mIoU {summary.miou_mean:.4f} ± {summary.miou_std:.4f}"
        if targets:
            line += f"; mIoU@90 reached {summary.reached}/{summary.runs}"
            if summary.reached:
                line += (
                    f" at {100 * summary.fraction_mean:.2f}% ± {100 * summary.fraction_std:.2f}%"
                    f" / {summary.area_mean:.1f} ± {summary.area_std:.1f} m²"
                )
        lines.append(line)
    return lines


def region_dump_lines(region_set: RegionSet) -> list[str]:
    lines = []
    for region in region_set:
        i, j = region.column_coords if region.column_coords is not None else ("-", "-")
        lo, hi = region.bbox.min, region.bbox.max
        corners = " ".join(repr(float(v)) for v in (*lo, *hi))
        lines.append(f"{region.id} {region.kind.value} {i} {j} {region.size} {corners}")
    return lines


def cmd_separate(args: argparse.Namespace) -> int:
    supervoxel = SupervoxelParams(**{k: v for k, v in _supervoxel_overrides(args).items() if v is not None})
    config = SeparationConfig(method=SeparationMethod(args.separation), r=args.r, supervoxel=supervoxel)
    config.validate()
    cloud = read_cloud(args.cloud)
    started = time.perf_counter()
    region_set = separate_regions(cloud, config, derive_seed(args.seed, SEED_SEPARATION))
    elapsed = time.perf_counter() - started
    if args.out:
        directory = os.path.dirname(args.out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(region_dump_lines(region_set)) + "\n")
    total_area = sum(region_area(cloud, r) for r in region_set)
    print(f"regions: {len(region_set)}")
    print(f"mean size: {float(np.mean(region_set.sizes)):.2f}")
    print(f"total area: {total_area:.2f} m2")
    print("kinds: " + " ".join(f"{kind}={count}" for kind, count in region_set.kind_counts().items()))
    print(f"separation seconds: {elapsed:.3f}")
    return 0


def load_predictions(path: str) -> np.ndarray:
    """Predicted labels from a cloud file (its label column) or from a file with one integer per line."""
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    if path.lower().endswith(".ply") or first.startswith("alpc "):
        return read_cloud(path).gt_labels
    labels = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            try:
                labels.append(int(line.strip(), 10))
            except ValueError as e:
                raise CloudFormatError(f"invalid label {line.strip()!r}", number) from e
    return np.array(labels, dtype=np.int64)


def cmd_eval(args: argparse.Namespace) -> int:
    cloud = read_cloud(args.cloud)
    pred = load_predictions(args.pred)
    score, ious = miou(confusion(pred, cloud.gt_labels, cloud.class_count, args.ignore_class))
    print(f"mIoU {score:.6f}")
    for c, iou in enumerate(ious):
        print(f"iou_c{c} {iou:.6f}")
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "separate": cmd_separate, "eval": cmd_eval}


def main(argv: Optional[list[str]] = None) -> int:
    """
    Entry point; returns the process exit code.

    0 on success, 2 for usage and configuration errors, 1 for runtime errors.
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0
    setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AlpcError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
