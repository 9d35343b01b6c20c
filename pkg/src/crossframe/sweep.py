"""Representation / layer / noise-level sweeps over an evaluation set.

For every video and planned timestep, the latent is noised, one forward
pass captures descriptors and attention at all planned layers, and the
matching and metric reductions run immediately on the captures. Only
scalar per-cell aggregates are retained, so memory stays proportional to
the grid, not to the number of attention maps.
"""

from __future__ import annotations

import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ditcore import (
    AttentionRecord,
    KIND_ATTENTION,
    KIND_FEATURE,
    KIND_KEY,
    KIND_QUERY,
    make_text_tokens,
    noised_latent,
)
from .matching import (
    PointSet,
    argmax_correspondence,
    assemble_track,
    matching_cost,
    pixel_to_latent,
)
from .metrics import (
    KIND_FEATURE_DESC,
    KIND_QUERY_KEY,
    MetricCell,
    PckThresholds,
    REPRESENTATION_KINDS,
    SweepReport,
    attention_decomposition,
    attention_score,
    confidence_score,
    fill_harmonic,
    pck,
    positional_bias,
    rank_cells,
)
from .synthdata import Scene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepPlan:
    """Which (timestep, layer, representation-kind) cells to evaluate."""

    timesteps: tuple[int, ...]
    layers: tuple[int, ...]
    kinds: tuple[str, ...] = REPRESENTATION_KINDS
    thresholds: PckThresholds = PckThresholds()
    accuracy_delta_index: int = 3  # sweep accuracy metric is PCK at this threshold
    text_len: int = 4
    dataset_id: str = ""

    def __post_init__(self):
        if not self.timesteps or not self.layers or not self.kinds:
            raise ValueError("sweep plan axes must be non-empty")
        unknown = set(self.kinds) - set(REPRESENTATION_KINDS)
        if unknown:
            raise ValueError(f"unknown representation kinds {sorted(unknown)}")
        if not (0 <= self.accuracy_delta_index < len(self.thresholds.deltas)):
            raise ValueError("accuracy_delta_index out of range")

    def to_dict(self) -> dict:
        return {
            "timesteps": list(self.timesteps), "layers": list(self.layers),
            "kinds": list(self.kinds), "deltas": list(self.thresholds.deltas),
            "accuracy_delta_index": self.accuracy_delta_index,
            "text_len": self.text_len, "dataset_id": self.dataset_id,
        }


def _capture_kinds(plan: SweepPlan) -> tuple[str, ...]:
    kinds = [KIND_ATTENTION]
    if KIND_QUERY_KEY in plan.kinds:
        kinds += [KIND_QUERY, KIND_KEY]
    if KIND_FEATURE_DESC in plan.kinds:
        kinds += [KIND_FEATURE]
    return tuple(kinds)


def descriptor_pair(stacks, layer: int, kind: str, source: int, target: int):
    """(source rows, target rows, scale dim) for one representation kind.

    Query-key matching pairs the source frame's queries with the target
    frame's keys; feature matching uses the post-attention features on both
    sides.
    """
    if kind == KIND_QUERY_KEY:
        src = stacks[(layer, KIND_QUERY)].frame_rows(source)
        tgt = stacks[(layer, KIND_KEY)].frame_rows(target)
    elif kind == KIND_FEATURE_DESC:
        src = stacks[(layer, KIND_FEATURE)].frame_rows(source)
        tgt = stacks[(layer, KIND_FEATURE)].frame_rows(target)
    else:
        raise ValueError(f"unknown representation kind {kind!r}")
    return src, tgt, src.shape[1]


def tracks_from_stacks(stacks, layer: int, kind: str, starts: PointSet,
                       patch: int, gt_height: int, gt_width: int):
    """Argmax tracks for one (layer, kind) from captured descriptors (q = 1)."""
    layout = stacks[(layer, KIND_QUERY if kind == KIND_QUERY_KEY else KIND_FEATURE)].layout
    matches = []
    for j in range(1, layout.frames):
        src, tgt, dim = descriptor_pair(stacks, layer, kind, 0, j)
        cost = matching_cost(src, tgt, dim, source_frame=0, target_frame=j,
                             height=layout.height, width=layout.width)
        matches.append(argmax_correspondence(cost, starts))
    return assemble_track(starts, matches, patch, 1, layout.frames, gt_height, gt_width)


def snap_starts(scene: Scene, patch: int) -> PointSet:
    """Scene start points snapped to integer latent cells."""
    gt = scene.ground_truth
    latent = pixel_to_latent(scene.starts, patch, gt.height // patch, gt.width // patch)
    return PointSet(latent, frame=0)


@dataclass
class _CellPartial:
    accuracy: list = field(default_factory=list)
    confidence: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    bias: list = field(default_factory=list)
    decomposition: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def _scene_task(plan: SweepPlan, model, scene: Scene, t: int,
                dump_dir=None) -> dict:
    """Metrics for one (scene, timestep); returns {(layer): partial payload}."""
    z0 = model.encode(scene.frames)
    z_t = noised_latent(z0, t, model.schedule)
    text = make_text_tokens(plan.text_len, model.channels, scene.text_seed)
    starts = snap_starts(scene, model.patch)
    gt = scene.ground_truth
    stacks, records = model.capture_run(z_t, text, t, plan.layers, _capture_kinds(plan))
    if dump_dir is not None:
        _dump_captures(dump_dir, scene.scene_id, t, stacks, records)

    out: dict[int, dict] = {}
    for layer in plan.layers:
        payload: dict = {"error": None}
        try:
            record = records[layer]
            payload["confidence"] = confidence_score(record, starts, gt.visibility)
            payload["attention"] = attention_score(record, starts, gt.visibility)
            payload["bias"] = positional_bias(record, starts)
            payload["decomposition"] = attention_decomposition(record, starts)
            payload["accuracy"] = {}
            for kind in plan.kinds:
                est = tracks_from_stacks(stacks, layer, kind, starts, model.patch,
                                         gt.height, gt.width)
                result = pck(est, gt, plan.thresholds)
                payload["accuracy"][kind] = (
                    None if result is None
                    else float(result.per_delta[plan.accuracy_delta_index])
                )
        except Exception as exc:  # per-cell failure must not abort the sweep
            log.warning("sweep cell (t=%d, l=%d) failed on %s: %s",
                        t, layer, scene.scene_id, exc)
            payload = {"error": f"{scene.scene_id}: {exc}", "trace": traceback.format_exc()}
        out[layer] = payload
    return out


def _dump_captures(dump_dir, scene_id: str, t: int, stacks, records) -> None:
    """Spill captures to the binary cache format, one file per matrix."""
    from . import cachefile

    root = Path(dump_dir)
    root.mkdir(parents=True, exist_ok=True)
    for (layer, kind), stack in sorted(stacks.items()):
        cachefile.write_matrix(root / f"{scene_id}_t{t:03d}_l{layer:02d}_{kind}.dtrk",
                               stack.data, t, layer, kind)
    for layer, record in sorted(records.items()):
        cachefile.write_matrix(root / f"{scene_id}_t{t:03d}_l{layer:02d}_attention.dtrk",
                               record.data.astype(np.float32), t, layer, "attention")


def run_sweep(plan: SweepPlan, model, scenes: Sequence[Scene],
              workers: int = 1, meta: Mapping | None = None,
              dump_dir=None) -> SweepReport:
    """Evaluate the full plan grid over an evaluation set.

    Tasks fan out over (video, timestep); partial aggregates are merged in a
    fixed key order so the report is byte-identical for any worker count.
    A failing cell records its error and leaves NaN metrics; it never aborts
    the rest of the grid. With dump_dir set, every captured descriptor stack
    and attention record is also spilled to the binary cache format.
    """
    if not scenes:
        raise ValueError("no scenes to sweep")
    tasks = [(si, t) for si in range(len(scenes)) for t in plan.timesteps]
    results: dict[tuple[int, int], dict] = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                (si, t): pool.submit(_scene_task, plan, model, scenes[si], t, dump_dir)
                for si, t in tasks
            }
            results = {key: fut.result() for key, fut in futures.items()}
    else:
        results = {(si, t): _scene_task(plan, model, scenes[si], t, dump_dir)
                   for si, t in tasks}

    partials: dict[tuple[int, int], _CellPartial] = {
        (t, layer): _CellPartial() for t in plan.timesteps for layer in plan.layers
    }
    for si in range(len(scenes)):
        for t in plan.timesteps:
            for layer in plan.layers:
                payload = results[(si, t)][layer]
                part = partials[(t, layer)]
                if payload["error"] is not None:
                    part.errors.append(payload["error"])
                    continue
                if payload["confidence"] is not None:
                    part.confidence.append(payload["confidence"])
                if payload["attention"] is not None:
                    part.attention.append(payload["attention"])
                part.bias.append(payload["bias"])
                part.decomposition.append(payload["decomposition"])
                part.accuracy.append(payload["accuracy"])

    cells: list[MetricCell] = []
    bias_table = []
    curve_acc: dict[int, list] = {t: [] for t in plan.timesteps}
    for t in plan.timesteps:
        for layer in plan.layers:
            part = partials[(t, layer)]
            error = "; ".join(part.errors) if part.errors else None
            conf = float(np.mean(part.confidence)) if part.confidence else float("nan")
            attn = float(np.mean(part.attention)) if part.attention else float("nan")
            for kind in plan.kinds:
                values = [a[kind] for a in part.accuracy if a[kind] is not None]
                acc = float(np.mean(values)) if values else float("nan")
                cells.append(MetricCell(t, layer, kind, acc, conf, attn, error=error))
            if part.bias:
                bias_table.append({"t": t, "l": layer,
                                   "value": float(np.mean(part.bias))})
            curve_acc[t].extend(part.decomposition)

    curve = []
    for t in plan.timesteps:
        if curve_acc[t]:
            means = np.mean(np.array(curve_acc[t]), axis=0)
            curve.append({"t": t, "self_frame": float(means[0]),
                          "cross_frame": float(means[1]), "text": float(means[2])})

    report_meta = dict(meta or {})
    report_meta.setdefault("dataset_id", plan.dataset_id)
    report_meta["plan"] = plan.to_dict()
    report_meta["n_videos"] = len(scenes)
    report = SweepReport(report_meta, cells,
                         {"positional_bias": bias_table, "attention_curve": curve})
    fill_harmonic(report)
    return report


def top_cells(report: SweepReport, k: int, kind: str = KIND_QUERY_KEY) -> list[tuple[int, int]]:
    """Best (timestep, layer) cells by harmonic mean, deterministic tie-break."""
    ranked = rank_cells(report, kind)
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds grid size {len(ranked)}")
    return [(c.timestep, c.layer) for c in ranked[:k]]


def diagnostics(records: Mapping[tuple[int, int], AttentionRecord],
                starts: PointSet) -> dict:
    """Positional-bias fractions per cell and the attention-mass curve per t.

    `records` maps (timestep, layer) to retained attention records; the
    curve averages the (self, cross, text) decomposition over the layers
    present at each timestep.
    """
    if not records:
        raise ValueError("no attention records supplied")
    bias_table = []
    by_t: dict[int, list] = {}
    for (t, layer) in sorted(records):
        record = records[(t, layer)]
        bias_table.append({"t": t, "l": layer,
                           "value": positional_bias(record, starts)})
        by_t.setdefault(t, []).append(attention_decomposition(record, starts))
    curve = []
    for t in sorted(by_t):
        means = np.mean(np.array(by_t[t]), axis=0)
        curve.append({"t": t, "self_frame": float(means[0]),
                      "cross_frame": float(means[1]), "text": float(means[2])})
    return {"positional_bias": bias_table, "attention_curve": curve}
