"""Matching accuracy, attention-based scores, and their joint ranking.

Three complementary quantities are computed per (timestep, layer) cell:
keypoint accuracy of the recovered tracks (PCK at fixed pixel thresholds on
a 256x256 normalization), the confidence with which first-frame points
attend to their best cross-frame match, and the total cross-frame attention
mass at those points. Cells are ranked by the harmonic mean of the three
after grid-wise min-max normalization.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .ditcore import AttentionRecord
from .matching import PointSet, TrackSet

EVAL_RESOLUTION = 256
HARMONIC_EPS = 1e-6
REPORT_SCHEMA_VERSION = 1

KIND_QUERY_KEY = "query-key"
KIND_FEATURE_DESC = "feature"
REPRESENTATION_KINDS = (KIND_QUERY_KEY, KIND_FEATURE_DESC)


@dataclass(frozen=True)
class PckThresholds:
    """Pixel-distance thresholds evaluated at a fixed square resolution."""

    deltas: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    resolution: int = EVAL_RESOLUTION

    def __post_init__(self):
        if len(self.deltas) < 1 or any(d <= 0 for d in self.deltas):
            raise ValueError("thresholds must be positive")
        if any(b <= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ValueError("thresholds must be strictly increasing")

    def labels(self) -> list[str]:
        return [f"delta{i}" for i in range(len(self.deltas))]


@dataclass
class PckResult:
    per_delta: np.ndarray  # (len(deltas),) fraction correct
    average: float
    n_points: int          # visible (frame, point) pairs counted


def pck(est: TrackSet, gt: TrackSet,
        thresholds: PckThresholds = PckThresholds()) -> PckResult | None:
    """Percentage of correct keypoints against visible ground truth.

    Coordinates are rescaled to resolution x resolution before distances are
    taken; only ground-truth-visible points on frames after the first count
    (the first frame is pinned to the starts on both sides). Returns None
    when no visible point exists, so callers can distinguish "no evidence"
    from an accuracy of zero.
    """
    if est.tracks.shape != gt.tracks.shape:
        raise ValueError(f"track shapes differ: {est.tracks.shape} vs {gt.tracks.shape}")
    if (est.height, est.width) != (gt.height, gt.width):
        raise ValueError("estimated and ground-truth resolutions differ")
    scale = np.array([thresholds.resolution / gt.width, thresholds.resolution / gt.height])
    vis = gt.visibility[1:]
    if not vis.any():
        return None
    diff = (est.tracks[1:] - gt.tracks[1:]) * scale
    dist = np.sqrt((diff ** 2).sum(axis=2))[vis]
    per_delta = np.array([(dist < d).mean() for d in thresholds.deltas])
    return PckResult(per_delta, float(per_delta.mean()), int(vis.sum()))


def aggregate_pck(results: Iterable[PckResult | None],
                  thresholds: PckThresholds = PckThresholds()) -> PckResult | None:
    """Macro average of per-video PCK results, skipping empty videos."""
    kept = [r for r in results if r is not None]
    if not kept:
        return None
    per_delta = np.mean([r.per_delta for r in kept], axis=0)
    return PckResult(per_delta, float(per_delta.mean()), sum(r.n_points for r in kept))


def _start_rows(record: AttentionRecord, starts: PointSet) -> np.ndarray:
    pts = starts.points
    if not np.allclose(pts, np.round(pts)):
        raise ValueError("starts must be integer latent coordinates")
    layout = record.layout
    return np.array([
        layout.flat_index(0, int(y), int(x)) for x, y in pts
    ])


def _visible_mask(starts_count: int, frames: int,
                  visibility: np.ndarray | None) -> np.ndarray:
    """(frames-1, N) mask of start visibility at each cross frame."""
    if visibility is None:
        return np.ones((frames - 1, starts_count), dtype=bool)
    visibility = np.asarray(visibility, dtype=bool)
    if visibility.shape != (frames, starts_count):
        raise ValueError(f"visibility shape {visibility.shape} != ({frames}, {starts_count})")
    return visibility[1:]


def confidence_score(record: AttentionRecord, starts: PointSet,
                     visibility: np.ndarray | None = None) -> float | None:
    """Mean over cross frames and visible starts of the max cross-frame attention."""
    layout = record.layout
    if layout.frames < 2:
        raise ValueError("record has no cross frames")
    rows = _start_rows(record, starts)
    vis = _visible_mask(len(starts), layout.frames, visibility)
    values = []
    for jdx, j in enumerate(range(1, layout.frames)):
        block = record.data[np.ix_(rows, np.arange(layout.spatial) + j * layout.spatial)]
        values.append(block.max(axis=1)[vis[jdx]])
    collected = np.concatenate(values)
    if len(collected) == 0:
        return None
    return float(collected.mean())


def attention_score(record: AttentionRecord, starts: PointSet,
                    visibility: np.ndarray | None = None) -> float | None:
    """Mean over visible starts of total attention mass on all cross frames."""
    layout = record.layout
    if layout.frames < 2:
        raise ValueError("record has no cross frames")
    rows = _start_rows(record, starts)
    vis = _visible_mask(len(starts), layout.frames, visibility)
    # Sum over all cross-frame columns per start, then mask per frame j and
    # average; with per-frame visibility the paper's sum is taken over the
    # frames where the point is visible.
    per_frame = np.stack([
        record.data[np.ix_(rows, np.arange(layout.spatial) + j * layout.spatial)].sum(axis=1)
        for j in range(1, layout.frames)
    ])  # (frames-1, N)
    totals = np.where(vis.all(axis=0), per_frame.sum(axis=0), np.nan)
    kept = totals[~np.isnan(totals)]
    if len(kept) == 0:
        return None
    return float(kept.mean())


def attention_decomposition(record: AttentionRecord,
                            starts: PointSet) -> tuple[float, float, float]:
    """(self_frame, cross_frame, text) attention masses averaged over starts.

    The three column blocks partition each first-frame query row, so for a
    row-stochastic record the masses sum to 1.
    """
    layout = record.layout
    rows = _start_rows(record, starts)
    data = record.data[rows]
    self_mass = data[:, layout.frame_slice(0)].sum(axis=1)
    cross_mass = data[:, layout.spatial:layout.frame_tokens].sum(axis=1)
    text_mass = data[:, layout.text_slice].sum(axis=1)
    return float(self_mass.mean()), float(cross_mass.mean()), float(text_mass.mean())


def positional_bias(record: AttentionRecord, starts: PointSet) -> float:
    """Fraction of (start, cross frame) pairs whose argmax is the start's own cell."""
    layout = record.layout
    rows = _start_rows(record, starts)
    own = rows  # spatial index within a frame equals the frame-0 flat index
    hits = 0
    total = 0
    for j in range(1, layout.frames):
        block = record.data[np.ix_(rows, np.arange(layout.spatial) + j * layout.spatial)]
        hits += int((np.argmax(block, axis=1) == own).sum())
        total += len(rows)
    return hits / total


# ---------------------------------------------------------------------------
# Grid normalization and harmonic ranking
# ---------------------------------------------------------------------------


def normalize_grid(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max normalize a metric grid to [0, 1], NaN-aware.

    A constant (degenerate) grid normalizes to all ones and is flagged so the
    report can record that the metric carried no ranking information.
    """
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    if not finite.any():
        return np.full_like(values, np.nan), True
    lo = values[finite].min()
    hi = values[finite].max()
    if hi - lo == 0:
        out = np.where(finite, 1.0, np.nan)
        return out, True
    out = np.where(finite, (values - lo) / (hi - lo), np.nan)
    return out, False


def harmonic_mean(acc: float, conf: float, attn: float,
                  eps: float = HARMONIC_EPS) -> float:
    """Harmonic mean of three normalized metrics, each floored at eps."""
    a = max(acc, eps)
    c = max(conf, eps)
    s = max(attn, eps)
    return 3.0 / (1.0 / a + 1.0 / c + 1.0 / s)


def harmonic_grid(acc: np.ndarray, conf: np.ndarray, attn: np.ndarray,
                  eps: float = HARMONIC_EPS) -> np.ndarray:
    a = np.maximum(np.asarray(acc, dtype=np.float64), eps)
    c = np.maximum(np.asarray(conf, dtype=np.float64), eps)
    s = np.maximum(np.asarray(attn, dtype=np.float64), eps)
    return 3.0 / (1.0 / a + 1.0 / c + 1.0 / s)


# ---------------------------------------------------------------------------
# Sweep report
# ---------------------------------------------------------------------------


@dataclass
class MetricCell:
    timestep: int
    layer: int
    kind: str
    accuracy: float
    confidence: float
    attention: float
    harmonic: float = float("nan")
    error: str | None = None

    def to_dict(self) -> dict:
        out = {
            "t": self.timestep, "l": self.layer, "kind": self.kind,
            "acc": self.accuracy, "conf": self.confidence,
            "attn": self.attention, "harmonic": self.harmonic,
        }
        if self.error:
            out["error"] = self.error
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricCell":
        return cls(d["t"], d["l"], d["kind"], d["acc"], d["conf"], d["attn"],
                   d.get("harmonic", float("nan")), d.get("error"))


@dataclass
class SweepReport:
    """Complete (timestep x layer) metric grid per representation kind."""

    meta: dict
    cells: list[MetricCell] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def kinds(self) -> list[str]:
        return sorted({c.kind for c in self.cells})

    def cell(self, t: int, layer: int, kind: str) -> MetricCell:
        for c in self.cells:
            if c.timestep == t and c.layer == layer and c.kind == kind:
                return c
        raise KeyError(f"no cell ({t}, {layer}, {kind})")

    def grid(self, kind: str, metric: str) -> tuple[np.ndarray, list[int], list[int]]:
        """Dense (timesteps x layers) array for one metric, plus axis labels."""
        cells = [c for c in self.cells if c.kind == kind]
        ts = sorted({c.timestep for c in cells})
        ls = sorted({c.layer for c in cells})
        out = np.full((len(ts), len(ls)), np.nan)
        for c in cells:
            out[ts.index(c.timestep), ls.index(c.layer)] = getattr(c, metric)
        return out, ts, ls

    # -- serialization ---------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "meta": dict(self.meta, schema_version=REPORT_SCHEMA_VERSION),
            "grid": [c.to_dict() for c in self.cells],
            "diagnostics": self.diagnostics,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        payload = json.loads(text)
        meta = payload["meta"]
        if meta.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {meta.get('schema_version')}")
        cells = [MetricCell.from_dict(d) for d in payload["grid"]]
        return cls(meta, cells, payload.get("diagnostics", {}))

    CSV_COLUMNS = ("t", "l", "kind", "acc", "conf", "attn", "harmonic")

    def to_csv(self) -> str:
        buf = io.StringIO()
        meta = dict(self.meta, schema_version=REPORT_SCHEMA_VERSION)
        buf.write(f"# config_hash={meta.get('config_hash', '')} "
                  f"seed={meta.get('seed', '')} schema_version={REPORT_SCHEMA_VERSION}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for c in self.cells:
            writer.writerow([c.timestep, c.layer, c.kind,
                             repr(c.accuracy), repr(c.confidence),
                             repr(c.attention), repr(c.harmonic)])
        return buf.getvalue()

    @classmethod
    def cells_from_csv(cls, text: str) -> list[MetricCell]:
        rows = [line for line in text.splitlines() if not line.startswith("#")]
        reader = csv.DictReader(rows)
        cells = []
        for row in reader:
            cells.append(MetricCell(
                int(row["t"]), int(row["l"]), row["kind"],
                float(row["acc"]), float(row["conf"]), float(row["attn"]),
                float(row["harmonic"]),
            ))
        return cells


def rank_cells(report: SweepReport, kind: str) -> list[MetricCell]:
    """Cells of one kind ordered by harmonic mean.

    Ties break by accuracy (descending), then lower layer, then lower
    timestep, so rankings are fully deterministic.
    """
    cells = [c for c in report.cells if c.kind == kind and c.error is None]
    return sorted(
        cells,
        key=lambda c: (-c.harmonic, -c.accuracy, c.layer, c.timestep),
    )


def fill_harmonic(report: SweepReport) -> None:
    """Normalize each metric over its kind's full grid and fill harmonic means.

    Normalization is global over the (timestep, layer) grid, recorded in the
    report metadata together with any degenerate (constant) metrics.
    """
    degenerate: dict[str, list[str]] = {}
    for kind in report.kinds():
        cells = [c for c in report.cells if c.kind == kind]
        acc = np.array([c.accuracy for c in cells])
        conf = np.array([c.confidence for c in cells])
        attn = np.array([c.attention for c in cells])
        normed = {}
        flagged = []
        for name, grid in (("acc", acc), ("conf", conf), ("attn", attn)):
            normed[name], is_degenerate = normalize_grid(grid)
            if is_degenerate:
                flagged.append(name)
        if flagged:
            degenerate[kind] = flagged
        harm = harmonic_grid(normed["acc"], normed["conf"], normed["attn"])
        for c, h in zip(cells, harm):
            c.harmonic = float(h) if np.isfinite(h) else float("nan")
    report.meta.setdefault("normalization", "global-minmax")
    report.meta["degenerate_metrics"] = degenerate
