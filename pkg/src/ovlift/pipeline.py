"""End-to-end orchestration: scene -> superpoint prompts -> masks -> instances -> labels."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import BackendBundle, FixtureBackend, SubprocessBackend, crop_box
from .config import PipelineConfig
from .geometry import PixelPoint, back_project_mask, pixel_lookup, project_points, rank_by_counts, sample_pixel_prompts
from .labeling import CropEmbedding, TagSet, collect_open_tags, load_blocklist, match_labels
from .merging import MergeConfig, merge_coarse_masks
from .overlap import ViewMask, assemble_coarse_masks, build_score_table, write_table_csv
from .scene_io import load_scene, sample_frames
from .superpoints import build_graph, segment_superpoints, select_prompts, superpoint_labels

logger = logging.getLogger(__name__)


@dataclass
class PromptResult:
    prompt_id: int
    back_projections: list = field(default_factory=list)
    view_masks: list = field(default_factory=list)
    skipped: int = 0
    views: list = field(default_factory=list)  # (frame_id, visible_count)


@dataclass
class RunResult:
    instances: list
    summary: dict
    timings: dict
    superpoints: list
    prompts: list
    table: np.ndarray
    coarse_masks: list
    tag_set: TagSet
    background: np.ndarray  # per-point instance id, −1 background


class _Timer:
    def __init__(self):
        self.timings = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        self.timings[name] = round(time.perf_counter() - t0, 6)


def make_backend(config: PipelineConfig):
    if config.backend_fixture:
        return BackendBundle(FixtureBackend(config.backend_fixture))
    if config.backend_subprocess:
        return BackendBundle(SubprocessBackend(config.backend_subprocess))
    raise ValueError("no backend configured (set backend.fixture or backend.subprocess)")


def _process_prompt(n, prompt, points, frames, lookups, backend, config: PipelineConfig) -> PromptResult:
    res = PromptResult(n)
    idx = prompt.point_indices
    counts = [int((lk[idx] >= 0).sum()) for lk in lookups]
    position = {fr.frame_id: i for i, fr in enumerate(frames)}
    for frame, count in rank_by_counts(frames, counts, config.views):
        lookup = lookups[position[frame.frame_id]]
        res.views.append((frame.frame_id, count))
        vis = idx[lookup[idx] >= 0]
        u, v, z, _ = project_points(points[vis], frame)
        pixels = [PixelPoint(a, b, c) for a, b, c in zip(u.tolist(), v.tolist(), z.tolist())]
        chosen = sample_pixel_prompts(pixels, config.k_pixel_prompts)
        mask = backend.segment(frame, n, [(pixels[i].u, pixels[i].v) for i in chosen])
        if mask is None:
            res.skipped += 1
            continue
        bp = back_project_mask(frame, mask, points, config.eps_depth, prompt_id=n, lookup=lookup)
        res.back_projections.append(bp)
        box = crop_box(mask, config.crop_pad)
        if box is not None:
            res.view_masks.append(ViewMask(frame.frame_id, box, int(mask.sum())))
    return res


def run_pipeline(config: PipelineConfig, scene=None, backend=None, write: bool = True) -> RunResult:
    """Run every stage and (optionally) write outputs to ``config.output``."""
    config.validate()
    timer = _Timer()
    workers = config.effective_workers
    own_backend = backend is None

    with timer.stage("load"):
        if scene is None:
            if not config.scene:
                raise ValueError("no scene given")
            scene = load_scene(config.scene)
        frames = sample_frames(scene.frames, config.frame_stride)
    points = scene.points
    if backend is None:
        backend = make_backend(config)
    elif not isinstance(backend, BackendBundle):
        backend = BackendBundle(backend)

    try:
        with timer.stage("superpoints"):
            graph = build_graph(points, config.superpoint_k_nn, scene.mesh_edges)
            superpoints = segment_superpoints(graph, config.superpoint_k_fh, config.superpoint_min_size)
            prompts = select_prompts(superpoints, config.n_prompts)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            with timer.stage("visibility"):
                lookups = list(pool.map(lambda fr: pixel_lookup(points, fr, config.eps_depth), frames))
            with timer.stage("segment_backproject"):
                results = list(pool.map(
                    lambda item: _process_prompt(item[0], item[1], points, frames, lookups, backend, config),
                    enumerate(prompts)))

        with timer.stage("score_table"):
            bps = [bp for r in results for bp in r.back_projections]
            table = build_score_table(superpoints, bps, len(prompts), config.theta, len(points))
            coarse, columns = assemble_coarse_masks(table, superpoints, {r.prompt_id: r.view_masks for r in results})

        with timer.stage("merge"):
            merge_cfg = MergeConfig(config.tau, config.column_norm, config.max_passes or None)
            instances, _, passes = merge_coarse_masks(table, coarse, merge_cfg, columns=columns)

        with timer.stage("tags"):
            per_frame = [backend.tag(fr) for fr in frames]
            tag_set = collect_open_tags(per_frame, load_blocklist(config.blocklist))
            if tag_set.tags:
                tag_set.text_embeddings = backend.embed_texts(tag_set.tags)

        with timer.stage("labels"):
            crops = []
            if tag_set.tags:
                by_id = {fr.frame_id: fr for fr in frames}
                for cm in coarse:
                    for vm in cm.view_masks:
                        vec = backend.embed_image(by_id[vm.view_id], vm.bbox, cm.id)
                        if vec is not None:
                            crops.append(CropEmbedding(cm.id, vm.view_id, vec))
            match_labels(instances, crops, tag_set, config.label_strategy)
    finally:
        if own_backend:
            backend.close()

    ids = np.full(len(points), -1, dtype=np.int64)
    for inst in instances:
        ids[inst.point_indices] = inst.id

    labeled = sum(inst.label is not None for inst in instances)
    summary = {
        "num_points": int(len(points)),
        "num_frames": len(scene.frames),
        "num_sampled_frames": len(frames),
        "num_superpoints": len(superpoints),
        "num_prompts": len(prompts),
        "num_back_projections": len(bps),
        "skipped_segmentations": int(sum(r.skipped for r in results)),
        "prompts_without_views": int(sum(not r.views for r in results)),
        "num_coarse_masks": len(coarse),
        "merge_passes": int(passes),
        "num_instances": len(instances),
        "num_labeled_instances": int(labeled),
        "label_coverage": labeled / len(instances) if instances else 0.0,
        "num_tags": len(tag_set.tags),
        "background_points": int((ids < 0).sum()),
        "hyperparameters": {
            "n_prompts": config.n_prompts, "frame_stride": config.frame_stride, "views": config.views,
            "theta": config.theta, "tau": config.tau, "column_norm": config.column_norm,
            "label_strategy": config.label_strategy, "k_pixel_prompts": config.k_pixel_prompts,
            "eps_depth": config.eps_depth, "superpoint.k_nn": config.superpoint_k_nn,
            "superpoint.k_fh": config.superpoint_k_fh, "superpoint.min_size": config.superpoint_min_size,
            "seed": config.seed,
        },
    }
    if not tag_set.tags:
        summary["warnings"] = ["no open tags survived filtering; instances are unlabeled"]

    result = RunResult(instances, summary, timer.timings, superpoints, prompts, table, coarse, tag_set, ids)
    if write:
        write_outputs(result, config)
    return result


def instances_to_json(instances):
    return [
        {"id": inst.id, "label": inst.label, "confidence": inst.confidence,
         "composition": list(inst.composition), "point_count": int(len(inst.point_indices))}
        for inst in instances
    ]


def write_outputs(result: RunResult, config: PipelineConfig):
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "instances.json").write_text(json.dumps(instances_to_json(result.instances), indent=2))
    np.savetxt(out / "instance_ids.txt", result.background, fmt="%d")
    (out / "run_summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    # Timings vary run to run; kept apart so the files above stay bit-identical.
    (out / "timings.json").write_text(json.dumps(result.timings, indent=2))
    if config.debug:
        n = len(result.background)
        np.savetxt(out / "superpoints.txt", superpoint_labels(result.superpoints, n), fmt="%d")
        write_table_csv(out / "score_table.csv", result.table)
        coarse = [{"id": cm.id, "member_superpoints": cm.member_superpoints,
                   "point_count": int(len(cm.point_indices)),
                   "views": [{"view_id": vm.view_id, "bbox": list(vm.bbox), "pixels": vm.pixel_count}
                             for vm in cm.view_masks]}
                  for cm in result.coarse_masks]
        (out / "coarse_masks.json").write_text(json.dumps(coarse, indent=2))
