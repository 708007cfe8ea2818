"""Benchmark and ablation execution with structured reporting.

Episodes are independent work items; a failure is recorded on its episode
and never aborts the sweep. Reports carry per-episode scores, aggregates
(arithmetic means of the per-episode scores they cover), the config echo,
runtime stats, an input content hash, and an environment fingerprint, so a
run is auditable and reproducible from its report alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..core import ImageRGB, VICLConfig, config_to_dict, validate_config
from ..errors import VICLError
from ..pipeline import PromptEpisode, run_episode
from ..tasks import decode_prediction, encode_target
from . import metrics
from .datasets import EpisodeSpec


@dataclass
class EpisodeResult:
    spec: EpisodeSpec
    scores: dict | None
    error: str | None = None
    note: str | None = None
    seconds: float = 0.0
    prediction_path: str | None = None


@dataclass
class MetricReport:
    dataset_id: str
    task: str
    split_id: str
    results: list
    aggregates: dict
    config: VICLConfig
    environment: dict
    input_hash: str
    runtime: dict
    empty: bool = False
    notes: dict = field(default_factory=dict)


def environment_fingerprint() -> dict:
    return {
        "package": f"diffvicl {__version__}",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def episodes_hash(episodes) -> str:
    payload = json.dumps([spec.content_key() for spec in episodes], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def score_prediction(task: str, prediction: ImageRGB, gt_ann, num_classes=None, perceptual=None):
    """Decode a prediction and score it against the groundtruth annotation.

    Returns (scores, note); scores is None with a note for undefined cases.
    """
    if task == "foreground_segmentation":
        decoded = decode_prediction(task, prediction)
        return {"iou": metrics.iou(decoded, gt_ann)}, None
    if task == "object_detection":
        decoded = decode_prediction(task, prediction)
        note = "empty detection" if decoded is None else None
        return {"iou": metrics.box_iou(decoded, gt_ann)}, note
    if task == "semantic_segmentation":
        decoded = decode_prediction(task, prediction, num_classes=num_classes)
        miou, acc = metrics.semseg_scores(decoded, gt_ann)
        return {"miou": miou, "accuracy": acc}, None
    if task == "keypoint_detection":
        decoded = decode_prediction(task, prediction)
        hw = prediction.pixels.shape[:2]
        result = metrics.keypoint_scores(decoded, gt_ann, image_hw=hw)
        if result is None:
            return None, "undefined score: groundtruth has no visible keypoints"
        mse, pck = result
        return {"mse": mse, "pck": pck}, None
    if task == "edge_detection":
        decoded = decode_prediction(task, prediction)
        gt_img = encode_target(task, gt_ann)
        scores = {"mse": metrics.pixel_mse(encode_target(task, decoded), gt_img)}
        if perceptual is not None:
            scores["lpips"] = perceptual.pair_distance(prediction, gt_img)
        return scores, None
    if task == "colorization":
        scores = {}
        if perceptual is not None:
            scores["lpips"] = perceptual.pair_distance(prediction, gt_ann)
        note = None if perceptual is not None else "lpips skipped: no perceptual backend"
        return scores, note
    raise VICLError(f"no scoring rule for task {task!r}")


def aggregate_scores(results) -> dict:
    """Mean per score key over episodes that define it."""
    keys = sorted({k for r in results if r.scores for k in r.scores})
    out = {}
    for key in keys:
        values = [r.scores[key] for r in results if r.scores and key in r.scores]
        out[key] = float(np.mean(values)) if values else None
    out["episodes_scored"] = sum(1 for r in results if r.scores)
    out["episodes_failed"] = sum(1 for r in results if r.error)
    return out


def run_benchmark(
    episodes,
    adapter,
    backend,
    out_dir=None,
    perceptual=None,
    inversion_cache=None,
    progress: bool = False,
) -> MetricReport:
    """Run every episode, score it, and assemble the report.

    Colorization additionally gets a set-level Frechet score over the
    successfully predicted episodes; the reference set (the groundtruth
    color images of those same episodes) is recorded in the report notes.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    results: list[EpisodeResult] = []
    pred_set: list[ImageRGB] = []
    ref_set: list[ImageRGB] = []
    started = time.perf_counter()
    for i, spec in enumerate(episodes):
        t0 = time.perf_counter()
        try:
            query_img, gt_ann = adapter.load_query(spec.query_id)
            prompts = tuple(adapter.load_prompt(pid) for pid in spec.prompt_ids)
            cfg = validate_config(dataclasses.replace(spec.config, n_prompts=len(prompts)))
            ep = PromptEpisode(query=query_img, prompts=prompts, task=spec.task, config=cfg)
            prediction, _ = run_episode(ep, backend, inversion_cache=inversion_cache)
            scores, note = score_prediction(
                spec.task, prediction, gt_ann, num_classes=adapter.num_classes, perceptual=perceptual
            )
            pred_path = None
            if out_dir is not None:
                from ..core import save_image

                pred_path = str(out_dir / "predictions" / f"{spec.content_key()}.png")
                save_image(prediction, pred_path)
            results.append(
                EpisodeResult(
                    spec=spec, scores=scores, note=note, seconds=time.perf_counter() - t0, prediction_path=pred_path
                )
            )
            if spec.task == "colorization":
                pred_set.append(prediction)
                ref_set.append(gt_ann)
        except Exception as exc:  # failures are per-episode, never fatal
            results.append(
                EpisodeResult(
                    spec=spec,
                    scores=None,
                    error=f"{type(exc).__name__}: {exc}",
                    seconds=time.perf_counter() - t0,
                )
            )
        if progress:
            print(f"[{i + 1}/{len(episodes)}] {spec.query_id}: {results[-1].error or results[-1].scores}")
    total = time.perf_counter() - started

    aggregates = aggregate_scores(results)
    notes: dict = {}
    if episodes and episodes[0].task == "colorization":
        if pred_set and perceptual is not None:
            aggregates["fid"] = metrics.fid_from_features(
                perceptual.features(pred_set), perceptual.features(ref_set)
            )
            notes["fid_reference_set"] = (
                f"groundtruth color images of the {len(ref_set)} scored episodes, backend {perceptual.backend_id}"
            )
        else:
            aggregates["fid"] = None
            notes["fid_reference_set"] = "skipped: no perceptual backend configured"

    report = MetricReport(
        dataset_id=adapter.dataset_id if episodes else "none",
        task=episodes[0].task if episodes else "none",
        split_id=str(adapter.split_id) if episodes else "none",
        results=results,
        aggregates=aggregates,
        config=episodes[0].config if episodes else VICLConfig(),
        environment=environment_fingerprint(),
        input_hash=episodes_hash(episodes),
        runtime={
            "total_seconds": total,
            "mean_episode_seconds": total / len(episodes) if episodes else 0.0,
        },
        empty=len(episodes) == 0,
    )
    report.notes.update(notes)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def report_to_dict(report: MetricReport) -> dict:
    return {
        "dataset": report.dataset_id,
        "task": report.task,
        "split": report.split_id,
        "empty": report.empty,
        "aggregates": report.aggregates,
        "config": config_to_dict(report.config),
        "environment": report.environment,
        "input_hash": report.input_hash,
        "runtime": report.runtime,
        "notes": report.notes,
        "episodes": [
            {
                "query_id": r.spec.query_id,
                "prompt_ids": list(r.spec.prompt_ids),
                "scores": r.scores,
                "error": r.error,
                "note": r.note,
                "seconds": round(r.seconds, 4),
                "prediction": r.prediction_path,
            }
            for r in report.results
        ],
    }


def format_report_table(report: MetricReport) -> str:
    lines = [
        f"dataset: {report.dataset_id}  task: {report.task}  split: {report.split_id}",
        f"episodes: {len(report.results)}  input_hash: {report.input_hash}",
    ]
    if report.empty:
        lines.append("EMPTY REPORT: no episodes were given")
    for key, value in sorted(report.aggregates.items()):
        shown = "skipped" if value is None else (f"{value:.4f}" if isinstance(value, float) else str(value))
        lines.append(f"  {key:>24}: {shown}")
    for note_key, note in report.notes.items():
        lines.append(f"  note[{note_key}]: {note}")
    lines.append(f"  total_seconds: {report.runtime['total_seconds']:.1f}")
    return "\n".join(lines)


def write_report(report: MetricReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    txt_path = out_dir / "report.txt"
    json_path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    txt_path.write_text(format_report_table(report) + "\n")
    return json_path, txt_path


# ---------------------------------------------------------------------------
# ablation sweeps


ABLATION_AXES = (
    "n_prompts",
    "steps",
    "tau",
    "beta",
    "gamma",
    "resolutions",
    "ensemble",
    "adain",
    "q_source",
    "k_source",
    "share_query_step_noise",
)


def ablation_cells(grid: dict) -> list[dict]:
    """Cartesian product of grid axes, in a stable order."""
    for axis in grid:
        if axis not in ABLATION_AXES:
            raise VICLError(f"unknown ablation axis {axis!r}; valid: {ABLATION_AXES}")
    axes = sorted(grid)
    cells = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        cells.append(dict(zip(axes, combo)))
    return cells


def apply_cell(spec: EpisodeSpec, cell: dict) -> EpisodeSpec:
    """Override one episode's config with a grid cell; trims prompts to fit."""
    cfg = dataclasses.replace(spec.config, **cell)
    prompt_ids = spec.prompt_ids
    if "n_prompts" in cell:
        want = int(cell["n_prompts"])
        if want > len(prompt_ids):
            raise VICLError(
                f"cell needs {want} prompts but episode {spec.query_id} carries {len(prompt_ids)}"
            )
        prompt_ids = prompt_ids[:want]
        cfg = dataclasses.replace(cfg, n_prompts=want)
    else:
        cfg = dataclasses.replace(cfg, n_prompts=len(prompt_ids))
    return dataclasses.replace(spec, config=validate_config(cfg), prompt_ids=prompt_ids)


def run_ablation(
    grid: dict,
    episodes,
    adapter,
    backend,
    out_dir=None,
    perceptual=None,
    inversion_cache=None,
    progress: bool = False,
) -> list[dict]:
    """One benchmark run per grid cell; returns consolidated rows.

    Base episodes should carry the maximum prompt count any cell needs;
    cells with smaller n_prompts reuse a prefix of each episode's prompts.
    """
    rows = []
    for cell in ablation_cells(grid):
        cell_specs = [apply_cell(spec, cell) for spec in episodes]
        t0 = time.perf_counter()
        report = run_benchmark(
            cell_specs,
            adapter,
            backend,
            out_dir=None,
            perceptual=perceptual,
            inversion_cache=inversion_cache,
            progress=progress,
        )
        row = {
            "cell": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cell.items()},
            "aggregates": report.aggregates,
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        if progress:
            print(f"cell {cell}: {report.aggregates}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        lines = []
        for row in rows:
            cell_txt = ", ".join(f"{k}={v}" for k, v in sorted(row["cell"].items()))
            agg_txt = ", ".join(
                f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                for k, v in sorted(row["aggregates"].items())
            )
            lines.append(f"{cell_txt:<60} | {agg_txt} | {row['seconds']:.1f}s")
        (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    return rows
