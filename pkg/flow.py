import dataclasses
import math
import os
import time
from typing import Any, Optional

import numpy as np
from loguru import logger
from pocketflow import BatchNode, Flow, Node

from utils.acquisition import (
    AcquisitionScore,
    RedalInputs,
    color_discontinuity,
    ensemble_mean_proba,
    random_policy,
    region_means,
    score_regions,
    select_regions,
)
from utils.config import (
    SEED_FEATURES,
    SEED_INITIAL_SELECTION,
    SEED_LEARNER,
    SEED_REDAL,
    SEED_SELECTION,
    SEED_SEPARATION,
    BudgetMode,
    ExperimentConfig,
    Policy,
    SelectionBudget,
    derive_seed,
)
from utils.errors import RegionError, TrainingError
from utils.experiment_log import ExperimentLog, LogRow
from utils.learner import Ensemble, extract_features, predict_proba, prepare_training, train_member
from utils.metrics import budget_report, confusion, miou
from utils.oracle import Oracle, seed_labels
from utils.pointcloud import PointCloud
from utils.regions import fit_ground_plane, separate_regions
from utils.spatial_index import build_index

COLOR_NEIGHBORS = 10


def featurize(cloud: PointCloud, config: ExperimentConfig):
    """Spatial index, ground plane and feature matrix of one cloud."""
    index = build_index(cloud)
    params = config.separation.supervoxel
    ground, _ = fit_ground_plane(
        cloud, params.ransac_iterations, params.inlier_threshold, seed=derive_seed(config.seed, SEED_FEATURES)
    )
    return index, ground, extract_features(cloud, index, ground, config.learner.k_neighbors)


#############################################
# Preparation
#############################################
class PrepareRunNode(Node):
    def prep(self, shared: dict[str, Any]) -> tuple[ExperimentConfig, PointCloud, Optional[PointCloud]]:
        return shared["config"], shared["cloud"], shared.get("eval_cloud")

    def exec(self, inputs: tuple[ExperimentConfig, PointCloud, Optional[PointCloud]]) -> dict[str, Any]:
        config, cloud, eval_cloud = inputs
        index, _, features = featurize(cloud, config)

        started = time.perf_counter()
        regions = separate_regions(cloud, config.separation, derive_seed(config.seed, SEED_SEPARATION), index)
        separation_seconds = time.perf_counter() - started

        prepared = {
            "index": index,
            "features": features,
            "regions": regions,
            "separation_seconds": separation_seconds,
            "eval_features": features,
        }
        if eval_cloud is not None:
            prepared["eval_features"] = featurize(eval_cloud, config)[2]
        if config.policy == Policy.REDAL:
            prepared["color_discontinuity"] = color_discontinuity(cloud, index, COLOR_NEIGHBORS)
        return prepared

    def post(self, shared: dict[str, Any], prep_res: Any, exec_res: dict[str, Any]) -> None:
        shared.update(exec_res)
        shared["oracle"] = Oracle(shared["cloud"])
        regions = exec_res["regions"]
        logger.info(
            f"PrepareRunNode: {len(regions)} regions {regions.kind_counts()} "
            f"in {exec_res['separation_seconds']:.2f}s"
        )


#############################################
# Seed Labels Node
#############################################
class SeedLabelsNode(Node):
    def prep(self, shared: dict[str, Any]) -> tuple:
        config = shared["config"]
        seed = derive_seed(config.seed, SEED_INITIAL_SELECTION)
        return shared["oracle"], shared["regions"], config.initial_budget, seed

    def exec(self, inputs: tuple) -> list[int]:
        return seed_labels(*inputs)

    def post(self, shared: dict[str, Any], prep_res: tuple, exec_res: list[int]) -> None:
        shared["cycle"] = 0
        shared["selections"] = [exec_res]


#############################################
# Train Ensemble Node
#############################################
class TrainEnsembleNode(BatchNode):
    def prep(self, shared: dict[str, Any]) -> list[tuple]:
        config = shared["config"]
        cloud = shared["cloud"]
        features = shared["features"]
        training = prepare_training(features, cloud)
        base_seed = derive_seed(config.seed, SEED_LEARNER)
        logger.info(f"TrainEnsembleNode: cycle {shared['cycle']}, {len(training.rows)} labeled points")
        return [
            (features, training, cloud.class_count, config.learner, base_seed + n, config.augment)
            for n in range(config.learner.ensemble_size)
        ]

    def exec(self, item: tuple):
        return train_member(*item)

    def post(self, shared: dict[str, Any], prep_res: list[tuple], exec_res_list: list) -> None:
        _, training, class_count, *_ = prep_res[0]
        shared["ensemble"] = Ensemble(
            members=exec_res_list, standardizer=training.standardizer, class_count=class_count
        )


#############################################
# Evaluate Node
#############################################
class EvaluateNode(Node):
    def prep(self, shared: dict[str, Any]) -> dict[str, Any]:
        return {
            "ensemble": shared["ensemble"],
            "eval_cloud": shared["cloud"] if shared.get("eval_cloud") is None else shared["eval_cloud"],
            "eval_features": shared["eval_features"],
            "ignore": shared["config"].ignore_classes,
            "cloud": shared["cloud"],
            "labeled": [shared["regions"][i] for i in shared["oracle"].labeled_regions],
        }

    def exec(self, params: dict[str, Any]) -> dict[str, Any]:
        tensor = predict_proba(params["ensemble"], params["eval_features"])
        predicted = ensemble_mean_proba(tensor).argmax(axis=1)
        eval_cloud = params["eval_cloud"]
        score, ious = miou(confusion(predicted, eval_cloud.gt_labels, eval_cloud.class_count, params["ignore"]))
        report = budget_report(params["cloud"], params["labeled"])
        known = int(np.count_nonzero(params["cloud"].known_mask))
        if report.labeled_points != known:
            raise RegionError(f"budget report counts {report.labeled_points} labeled points, the mask has {known}")
        return {"miou": score, "ious": ious, "report": report}

    def post(self, shared: dict[str, Any], prep_res: dict[str, Any], exec_res: dict[str, Any]) -> str:
        cycle = shared["cycle"]
        report = exec_res["report"]
        log: ExperimentLog = shared["log"]
        log.append(
            LogRow(
                cycle=cycle,
                labeled_points=report.labeled_points,
                labeled_fraction=report.labeled_fraction,
                labeled_area_m2=report.labeled_area_m2,
                miou=exec_res["miou"],
                ious=exec_res["ious"],
                wall_seconds=time.perf_counter() - shared["cycle_started"],
            )
        )
        logger.info(
            f"EvaluateNode: cycle {cycle} mIoU={exec_res['miou']:.4f} "
            f"labeled={100 * report.labeled_fraction:.2f}% area={report.labeled_area_m2:.1f}m²"
        )

        cycles = shared["config"].cycles
        if cycle >= cycles:
            return "done"
        if not shared["oracle"].unlabeled(shared["regions"]):
            # The labels stop changing, so every remaining cycle repeats this row.
            log.note(f"cycle {cycle + 1}: unlabeled regions exhausted")
            logger.warning(f"EvaluateNode: unlabeled regions exhausted after cycle {cycle}")
            last = log.rows[-1]
            for k in range(cycle + 1, cycles + 1):
                log.append(dataclasses.replace(last, cycle=k, ious=list(last.ious), wall_seconds=0.0))
            return "done"
        shared["cycle"] = cycle + 1
        shared["cycle_started"] = time.perf_counter()
        return "score"


#############################################
# Score Regions Node
#############################################
class ScoreRegionsNode(Node):
    def prep(self, shared: dict[str, Any]) -> dict[str, Any]:
        return {
            "config": shared["config"],
            "ensemble": shared["ensemble"],
            "features": shared["features"],
            "regions": shared["regions"],
            "cycle": shared["cycle"],
            "color_discontinuity": shared.get("color_discontinuity"),
            "unlabeled": shared["oracle"].unlabeled(shared["regions"]),
        }

    def exec(self, params: dict[str, Any]) -> Optional[list[AcquisitionScore]]:
        config: ExperimentConfig = params["config"]
        if config.policy == Policy.RANDOM:
            return None
        ensemble, features, regions = params["ensemble"], params["features"], params["regions"]
        tensor = predict_proba(ensemble, features)
        redal, redal_inputs = None, None
        unlabeled = params["unlabeled"]
        if config.policy == Policy.REDAL:
            redal = dataclasses.replace(config.redal, k_div=min(config.redal.k_div, len(unlabeled)))
            redal_inputs = RedalInputs(
                color_discontinuity=params["color_discontinuity"],
                surface_variation=features.column("surface_variation"),
                region_features=region_means(ensemble.standardizer.transform(features.values), regions),
            )
        return score_regions(
            config.policy,
            tensor,
            regions,
            params["cycle"],
            redal=redal,
            redal_inputs=redal_inputs,
            seed=derive_seed(config.seed, SEED_REDAL, params["cycle"]),
            candidates=unlabeled,
        )

    def post(self, shared: dict[str, Any], prep_res: dict[str, Any], exec_res) -> None:
        shared["scores"] = exec_res
        if exec_res is not None and shared.get("dump_dir"):
            dump_scores(exec_res, shared["dump_dir"], shared["run_name"], shared["cloud"].class_count)


def dump_scores(scores: list[AcquisitionScore], dump_dir: str, run_name: str, class_count: int) -> str:
    """Write `region_id score` lines; entropy scores are shown normalized by ln C."""
    os.makedirs(dump_dir, exist_ok=True)
    cycle = scores[0].cycle
    scale = math.log(class_count) if scores[0].policy == Policy.AVG_ENT else 1.0
    path = os.path.join(dump_dir, f"{run_name}_cycle{cycle}.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{s.region_id} {s.score / scale!r}\n" for s in scores)
    return path


#############################################
# Select Regions Node
#############################################
class SelectRegionsNode(Node):
    def prep(self, shared: dict[str, Any]) -> dict[str, Any]:
        config = shared["config"]
        return {
            "scores": shared["scores"],
            "unlabeled": shared["oracle"].unlabeled(shared["regions"]),
            "budget": config.budget,
            "regions": shared["regions"],
            "cloud": shared["cloud"],
            "seed": derive_seed(config.seed, SEED_SELECTION, shared["cycle"]),
        }

    def exec(self, params: dict[str, Any]) -> list[int]:
        if params["scores"] is None:
            return random_policy(
                params["unlabeled"], params["budget"], params["seed"], params["regions"], params["cloud"]
            )
        return select_regions(
            params["scores"], params["unlabeled"], params["budget"], params["regions"], params["cloud"]
        )

    def post(self, shared: dict[str, Any], prep_res: dict[str, Any], exec_res: list[int]) -> None:
        logger.info(f"SelectRegionsNode: cycle {shared['cycle']} selected {len(exec_res)} regions")
        shared["selected"] = exec_res
        shared["selections"].append(exec_res)


#############################################
# Reveal Labels Node
#############################################
class RevealLabelsNode(Node):
    def prep(self, shared: dict[str, Any]) -> tuple:
        return shared["oracle"], shared["regions"], shared["selected"]

    def exec(self, inputs: tuple) -> int:
        oracle, regions, selected = inputs
        return sum(oracle.reveal(regions[i]) for i in selected)

    def post(self, shared: dict[str, Any], prep_res: tuple, exec_res: int) -> None:
        logger.debug(f"RevealLabelsNode: {exec_res} labels revealed")


#############################################
# Finalize Log Node
#############################################
class FinalizeLogNode(Node):
    def prep(self, shared: dict[str, Any]) -> tuple[ExperimentLog, Optional[str]]:
        return shared["log"], shared.get("out_path")

    def exec(self, inputs: tuple[ExperimentLog, Optional[str]]) -> Optional[str]:
        log, out_path = inputs
        if out_path:
            log.to_csv(out_path)
        return out_path

    def post(self, shared: dict[str, Any], prep_res: Any, exec_res: Optional[str]) -> None:
        if exec_res:
            logger.info(f"FinalizeLogNode: wrote {len(shared['log'].rows)} rows to {exec_res}")


#############################################
# Active Learning Flow
#############################################
def create_al_flow() -> Flow:
    prepare = PrepareRunNode()
    seed = SeedLabelsNode()
    train = TrainEnsembleNode()
    evaluate = EvaluateNode()
    score = ScoreRegionsNode()
    select = SelectRegionsNode()
    reveal = RevealLabelsNode()
    finalize = FinalizeLogNode()

    prepare >> seed
    seed >> train
    train >> evaluate
    evaluate - "score" >> score
    score >> select
    select >> reveal
    reveal >> train
    evaluate - "done" >> finalize

    return Flow(start=prepare)


def run_experiment(
    config: ExperimentConfig,
    cloud: PointCloud,
    eval_cloud: Optional[PointCloud] = None,
    out_path: Optional[str] = None,
    dump_dir: Optional[str] = None,
    run_name: str = "run",
) -> ExperimentLog:
    """
    Seed, train and evaluate, then repeat score -> select -> reveal -> retrain for config.cycles cycles.

    Evaluation uses eval_cloud when given (unless config.eval_on_train), otherwise
    every ground-truth point of the training cloud. The caller's cloud is not modified.
    """
    config.validate()
    present = np.unique(cloud.gt_labels[cloud.has_gt])
    if present.size < 2:
        raise TrainingError(f"the training cloud needs ground truth for at least 2 classes, found {present.tolist()}")

    train_cloud = cloud.copy()
    train_cloud.known_mask[:] = False
    log = ExperimentLog(class_count=cloud.class_count, fingerprint=config.fingerprint(), config_json=config.to_json())
    if eval_cloud is None or config.eval_on_train:
        eval_cloud = None
        log.note("evaluation on the training cloud")
    elif eval_cloud.class_count != cloud.class_count:
        raise TrainingError(f"eval cloud has {eval_cloud.class_count} classes, training cloud {cloud.class_count}")

    shared = {
        "config": config,
        "cloud": train_cloud,
        "eval_cloud": eval_cloud,
        "log": log,
        "out_path": out_path,
        "dump_dir": dump_dir,
        "run_name": run_name,
        "cycle_started": time.perf_counter(),
    }
    logger.info(f"run_experiment: {run_name} ({config.policy.value}, fingerprint {log.fingerprint})")
    create_al_flow().run(shared)
    return log


def supervised_baseline(config: ExperimentConfig, cloud: PointCloud, eval_cloud: Optional[PointCloud] = None) -> float:
    """mIoU of the ensemble trained on every ground-truth label."""
    full = dataclasses.replace(config, initial_budget=SelectionBudget(BudgetMode.POINT_FRACTION, 1.0), cycles=1)
    log = run_experiment(full, cloud, eval_cloud, run_name="supervised_baseline")
    return log.rows[-1].miou


def build_mermaid(start) -> str:
    """Mermaid graph of a flow, following successors from `start`; named actions label the edges."""
    ids: dict[Any, str] = {}
    visited: set = set()
    lines = ["graph LR"]

    def get_id(node) -> str:
        if node not in ids:
            ids[node] = f"N{len(ids) + 1}"
        return ids[node]

    def link(parent: Optional[str], child: str, action: str) -> None:
        if parent:
            label = "" if action == "default" else f"|{action}|"
            lines.append(f"    {parent} -->{label} {child}")

    def walk(node, parent: Optional[str] = None, action: str = "default") -> None:
        if node in visited:
            link(parent, get_id(node), action)
            return
        visited.add(node)
        if isinstance(node, Flow):
            lines.append(f"\n    subgraph sub_flow_{get_id(node)}[{type(node).__name__}]")
            if node.start_node:
                walk(node.start_node, parent, action)
            lines.append("    end\n")
            exit_id = get_id(node.start_node) if node.start_node else parent
            for next_action, nxt in node.successors.items():
                walk(nxt, exit_id, next_action)
            return
        nid = get_id(node)
        lines.append(f"    {nid}['{type(node).__name__}']")
        link(parent, nid, action)
        for next_action, nxt in node.successors.items():
            walk(nxt, nid, next_action)

    walk(start)
    return "\n".join(lines)
