"""Command-line surface tying the library into reproducible runs.

Subcommands: generate-dataset, analyze, track, eval-tracks, sample.
Configuration comes from a JSON file with flag overrides (flags win);
every run writes its resolved config, a manifest with file hashes, and
artifacts that embed {config hash, seed, schema version}. Re-running a
command with the same config and seed reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cachefile
from .ditcore import (
    CapturePipeline,
    DiTConfig,
    NoiseSchedule,
    NonFiniteError,
    PatchEncoder,
    TrainingDiverged,
    VideoDiT,
    make_text_tokens,
    train_toy,
)
from .guidance import GuidanceConfig, SamplingDiverged, sample_baseline, sample_with_cag
from .metrics import PckThresholds, SweepReport
from .sweep import SweepPlan, run_sweep, top_cells
from .synthdata import (
    AnnotationError,
    Scene,
    SceneConstructionError,
    SceneSpec,
    StartGrid,
    generate_scene,
    read_annotation,
    read_video,
    write_annotation,
    write_video,
)
from .tracker import TrackerConfig, evaluate_tracking, evaluation_csv, track_video

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/out",
    "workers": 0,  # 0: use the available parallelism
    "format": "both",
    "figures": True,
    "model": {
        "layers": 4, "heads": 2, "head_dim": 16, "model_dim": 32,
        "patch": 8, "gain": 4.0, "total_steps": 20, "schedule": "cosine",
        "text_len": 4, "init_seed": 0, "checkpoint": None,
        "train": None,
    },
    "train_defaults": {
        "steps": 2000, "batch_size": 8, "lr": 3e-3, "save": "model.dtrk",
        "dataset": None,
    },
    "dataset": {
        "dir": None,
        "count": 6, "motion": "translate", "frames": 5,
        "height": 64, "width": 64, "sprites": 1, "sprite_radius": 14.0,
        "velocities": [[8, 0], [-8, 0], [0, 8], [0, -8],
                       [8, 8], [-8, -8], [8, -8], [-8, 8]],
        "angle": 0.15, "rate": 1.04,
        "start_grid": {"mode": "object-grid", "snap_patch": 8},
        "seed_offset": 0,
    },
    "sweep": {
        "timesteps": list(range(1, 21)), "layers": [0, 1, 2, 3],
        "kinds": ["query-key", "feature"], "deltas": [1, 2, 4, 8, 16],
        "accuracy_delta_index": 3, "top_k": 5, "dump_captures": False,
    },
    "tracker": {
        "timestep": 1, "layer": 3, "bidirectional": True, "temporal_ratio": 1,
        "capacity": 13, "stride": 1, "kind": "query-key",
        "coverage_mode": "minimal", "renormalize_merged": True,
        "video": None, "annotation": None, "scene_index": 0,
    },
    "guidance": {
        "layers": [3], "scale": 2.0, "mode": "post-softmax-zero",
        "timesteps": None, "frames": 5, "height": 8, "width": 8,
    },
    "eval": {"estimate": None, "ground_truth": None},
}


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _deep_merge(cfg, user)
    cfg = _deep_merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    if cfg["format"] not in ("json", "csv", "both"):
        raise ConfigError(f"format must be json, csv, or both, not {cfg['format']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 0:
        raise ConfigError("workers must be a non-negative integer (0 = auto)")
    return cfg


def _resolve_workers(cfg: dict) -> int:
    # resolved at use time so the hashed config stays machine-independent;
    # results are worker-count invariant either way
    if cfg["workers"] > 0:
        return cfg["workers"]
    import os

    return max(1, os.cpu_count() or 1)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _artifact_comment(cfg_hash: str, seed: int) -> str:
    return f"config_hash={cfg_hash} seed={seed} schema_version={SCHEMA_VERSION}"


def _write_manifest(outdir: Path, command: str, cfg_hash: str, seed: int,
                    files: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": cfg_hash,
        "seed": seed,
        "files": {p.name: _sha256(p) for p in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _prepare_out(cfg: dict) -> tuple[Path, str]:
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    # hash the computation, not its location: the output path never changes
    # results, so it stays out of the hash and the recorded config
    recorded = {k: v for k, v in cfg.items() if k != "out"}
    cfg_hash = config_hash(recorded)
    (outdir / "config.json").write_text(json.dumps(recorded, indent=2, sort_keys=True))
    return outdir, cfg_hash


# ---------------------------------------------------------------------------
# Model and dataset assembly
# ---------------------------------------------------------------------------


def build_model(cfg: dict) -> CapturePipeline:
    mc = cfg["model"]
    patch = mc["patch"]
    dit = DiTConfig(layers=mc["layers"], heads=mc["heads"], head_dim=mc["head_dim"],
                    model_dim=mc["model_dim"], latent_channels=patch * patch)
    model = VideoDiT(dit, seed=mc["init_seed"])
    if mc["checkpoint"]:
        path = Path(mc["checkpoint"])
        if not path.exists():
            raise FileNotFoundError(f"model checkpoint not found: {path}")
        model.load_state_dict(cachefile.load_checkpoint(path))
    if mc["schedule"] == "cosine":
        schedule = NoiseSchedule.cosine(mc["total_steps"], seed=cfg["seed"])
    elif mc["schedule"] == "linear":
        schedule = NoiseSchedule.linear(mc["total_steps"], seed=cfg["seed"])
    else:
        raise ConfigError(f"unknown schedule {mc['schedule']!r}")
    encoder = PatchEncoder(patch, gain=mc["gain"])
    return CapturePipeline(model, encoder, schedule)


def build_dataset(ds: dict, base_seed: int) -> list[Scene]:
    grid = StartGrid(**ds["start_grid"])
    scenes = []
    velocities = ds["velocities"]
    for i in range(ds["count"]):
        seed = base_seed + ds["seed_offset"] + i
        try:
            spec = SceneSpec(
                motion=ds["motion"], frames=ds["frames"], height=ds["height"],
                width=ds["width"], sprites=ds["sprites"],
                velocity=tuple(velocities[i % len(velocities)]),
                angle=ds["angle"], rate=ds["rate"],
                sprite_radius=ds["sprite_radius"], texture_seed=seed,
            )
            scenes.append(generate_scene(spec, seed=seed, grid=grid,
                                         scene_id=f"scene_{i:03d}"))
        except (SceneConstructionError, ValueError) as exc:
            raise ConfigError(f"scene {i}: {exc}") from exc
    return scenes


def load_dataset(dirpath: str) -> tuple[list[Scene], dict]:
    """Load a generated dataset, failing fast on any missing file."""
    root = Path(dirpath)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for entry in manifest["scenes"]:
        video_path = root / entry["video"]
        ann_path = root / entry["annotation"]
        for path in (video_path, ann_path):
            if not path.exists():
                raise FileNotFoundError(
                    f"dataset file listed in manifest is missing: {path}")
        frames = read_video(video_path)
        gt, _ = read_annotation(ann_path)
        spec = SceneSpec.from_dict(entry["spec"])
        scenes.append(Scene(entry["id"], spec, frames, gt,
                            text_seed=entry["text_seed"]))
    return scenes, manifest


def _maybe_train(cfg: dict, cfg_hash: str, pipe: CapturePipeline, outdir: Path,
                 written: list[Path]) -> None:
    train_cfg = cfg["model"]["train"]
    if not train_cfg:
        return
    params = _deep_merge(cfg["train_defaults"], train_cfg)
    base_ds = _deep_merge(cfg["dataset"], {"count": 256, "dir": None})
    ds = _deep_merge(base_ds, params["dataset"] or {})
    scenes = build_dataset(ds, cfg["seed"] + 1000)
    data = [(pipe.encode(s.frames),
             make_text_tokens(cfg["model"]["text_len"], pipe.channels, s.text_seed))
            for s in scenes]
    log.info("training for %d steps on %d scenes", params["steps"], len(scenes))
    result = train_toy(pipe.model, data, params["steps"], seed=cfg["seed"],
                       schedule=pipe.schedule, batch_size=params["batch_size"],
                       lr=params["lr"])
    loss_path = outdir / "train_loss.csv"
    buf = io.StringIO()
    buf.write(f"# {_artifact_comment(cfg_hash, cfg['seed'])}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for i, value in enumerate(result.losses):
        writer.writerow([i, repr(float(value))])
    loss_path.write_text(buf.getvalue())
    written.append(loss_path)
    if params["save"]:
        ckpt = outdir / params["save"]
        cachefile.save_checkpoint(ckpt, pipe.model)
        written.append(ckpt)


def _eval_scenes(cfg: dict) -> tuple[list[Scene], str]:
    ds = cfg["dataset"]
    if ds["dir"]:
        scenes, manifest = load_dataset(ds["dir"])
        return scenes, manifest.get("config_hash", "external")
    return build_dataset(ds, cfg["seed"] + 5000), "inline"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate_dataset(cfg: dict) -> int:
    outdir, cfg_hash = _prepare_out(cfg)
    scenes = build_dataset(cfg["dataset"], cfg["seed"])
    entries = []
    files = [outdir / "config.json"]
    for scene in scenes:
        video_name = f"{scene.scene_id}.vid"
        ann_name = f"{scene.scene_id}.json"
        write_video(outdir / video_name, scene.frames)
        write_annotation(outdir / ann_name, scene.ground_truth, scene.scene_id)
        entries.append({
            "id": scene.scene_id,
            "spec": scene.spec.to_dict(),
            "text_seed": scene.text_seed,
            "video": video_name,
            "annotation": ann_name,
            "sha256_video": _sha256(outdir / video_name),
            "sha256_annotation": _sha256(outdir / ann_name),
        })
        files += [outdir / video_name, outdir / ann_name]
    _write_manifest(outdir, "generate-dataset", cfg_hash, cfg["seed"], files,
                    extra={"scenes": entries})
    print(f"wrote {len(scenes)} scenes to {outdir} (config {cfg_hash})")
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    outdir, cfg_hash = _prepare_out(cfg)
    pipe = build_model(cfg)
    written = [outdir / "config.json"]
    _maybe_train(cfg, cfg_hash, pipe, outdir, written)
    scenes, dataset_id = _eval_scenes(cfg)

    sw = cfg["sweep"]
    plan = SweepPlan(
        timesteps=tuple(sw["timesteps"]), layers=tuple(sw["layers"]),
        kinds=tuple(sw["kinds"]),
        thresholds=PckThresholds(tuple(float(d) for d in sw["deltas"])),
        accuracy_delta_index=sw["accuracy_delta_index"],
        text_len=cfg["model"]["text_len"], dataset_id=dataset_id,
    )
    dump_dir = (outdir / "captures") if sw["dump_captures"] else None
    report = run_sweep(plan, pipe, scenes, workers=_resolve_workers(cfg),
                       meta={"config_hash": cfg_hash, "seed": cfg["seed"]},
                       dump_dir=dump_dir)
    k = min(sw["top_k"], len(sw["timesteps"]) * len(sw["layers"]))
    best = top_cells(report, k, kind=sw["kinds"][0])
    report.meta["top_cells"] = [list(cell) for cell in best]

    if cfg["format"] in ("json", "both"):
        path = outdir / "report.json"
        path.write_text(report.to_json())
        written.append(path)
    if cfg["format"] in ("csv", "both"):
        path = outdir / "report.csv"
        path.write_text(report.to_csv())
        written.append(path)
        written.append(_write_diagnostics_csv(report, outdir, cfg_hash, cfg["seed"]))
        written.append(_write_curve_csv(report, outdir, cfg_hash, cfg["seed"]))
    if cfg["figures"]:
        from . import report as report_figures

        written += report_figures.render_sweep_figures(report, outdir)
    _write_manifest(outdir, "analyze", cfg_hash, cfg["seed"], written,
                    extra={"top_cells": report.meta["top_cells"]})
    for (t, layer) in best:
        cell = report.cell(t, layer, sw["kinds"][0])
        print(f"top cell t={t} l={layer} acc={cell.accuracy:.4f} "
              f"conf={cell.confidence:.4f} attn={cell.attention:.4f} "
              f"harmonic={cell.harmonic:.4f}")
    return EXIT_OK


def _write_diagnostics_csv(report: SweepReport, outdir: Path, cfg_hash: str,
                           seed: int) -> Path:
    buf = io.StringIO()
    buf.write(f"# {_artifact_comment(cfg_hash, seed)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "l", "positional_bias"])
    for row in report.diagnostics.get("positional_bias", []):
        writer.writerow([row["t"], row["l"], repr(row["value"])])
    path = outdir / "positional_bias.csv"
    path.write_text(buf.getvalue())
    return path


def _write_curve_csv(report: SweepReport, outdir: Path, cfg_hash: str,
                     seed: int) -> Path:
    buf = io.StringIO()
    buf.write(f"# {_artifact_comment(cfg_hash, seed)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "self_frame", "cross_frame", "text"])
    for row in report.diagnostics.get("attention_curve", []):
        writer.writerow([row["t"], repr(row["self_frame"]),
                         repr(row["cross_frame"]), repr(row["text"])])
    path = outdir / "attention_curve.csv"
    path.write_text(buf.getvalue())
    return path


def cmd_track(cfg: dict) -> int:
    outdir, cfg_hash = _prepare_out(cfg)
    pipe = build_model(cfg)
    tc = cfg["tracker"]
    if tc["video"]:
        frames = read_video(tc["video"])
        if not tc["annotation"]:
            raise ConfigError("tracker.annotation is required with tracker.video")
        gt, video_id = read_annotation(tc["annotation"])
    else:
        scenes, _ = _eval_scenes(cfg)
        index = tc["scene_index"]
        if not (0 <= index < len(scenes)):
            raise ConfigError(f"scene_index {index} out of range ({len(scenes)} scenes)")
        scene = scenes[index]
        frames, gt, video_id = scene.frames, scene.ground_truth, scene.scene_id

    config = TrackerConfig(
        timestep=tc["timestep"], layer=tc["layer"],
        bidirectional=tc["bidirectional"], temporal_ratio=tc["temporal_ratio"],
        capacity=tc["capacity"], stride=tc["stride"], kind=tc["kind"],
        coverage_mode=tc["coverage_mode"],
        renormalize_merged=tc["renormalize_merged"],
        text_len=cfg["model"]["text_len"], text_seed=cfg["seed"],
    )
    from .matching import PointSet, pixel_to_latent

    latent_starts = PointSet(pixel_to_latent(
        gt.tracks[0], pipe.patch, gt.height // pipe.patch, gt.width // pipe.patch))
    tracks, meta = track_video(frames, latent_starts, pipe, config)

    est_path = outdir / "estimated_tracks.json"
    write_annotation(est_path, tracks, video_id,
                     meta={"config_hash": cfg_hash, "seed": cfg["seed"],
                           "schema_version": SCHEMA_VERSION, **meta})
    table = evaluate_tracking(tracks, gt)
    eval_path = outdir / "tracking_eval.csv"
    eval_path.write_text(evaluation_csv(table, _artifact_comment(cfg_hash, cfg["seed"])))
    written = [outdir / "config.json", est_path, eval_path]
    if cfg["figures"]:
        from . import report as report_figures

        written.append(report_figures.render_eval_figure(table, outdir))
    _write_manifest(outdir, "track", cfg_hash, cfg["seed"], written,
                    extra={"video_id": video_id, "evaluation": table})
    print(f"tracked {tracks.count} points over {tracks.frames} frames: "
          + " ".join(f"{k}={v:.4f}" for k, v in table.items()))
    return EXIT_OK


def cmd_eval_tracks(cfg: dict) -> int:
    outdir, cfg_hash = _prepare_out(cfg)
    ev = cfg["eval"]
    if not ev["estimate"] or not ev["ground_truth"]:
        raise ConfigError("eval.estimate and eval.ground_truth paths are required")
    est, _ = read_annotation(ev["estimate"])
    gt, _ = read_annotation(ev["ground_truth"])
    table = evaluate_tracking(est, gt)
    eval_path = outdir / "tracking_eval.csv"
    eval_path.write_text(evaluation_csv(table, _artifact_comment(cfg_hash, cfg["seed"])))
    written = [outdir / "config.json", eval_path]
    if cfg["figures"]:
        from . import report as report_figures

        written.append(report_figures.render_eval_figure(table, outdir))
    _write_manifest(outdir, "eval-tracks", cfg_hash, cfg["seed"], written,
                    extra={"evaluation": table})
    print(" ".join(f"{k}={v:.4f}" for k, v in table.items()))
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    outdir, cfg_hash = _prepare_out(cfg)
    pipe = build_model(cfg)
    written = [outdir / "config.json"]
    _maybe_train(cfg, cfg_hash, pipe, outdir, written)
    gc = cfg["guidance"]
    config = GuidanceConfig(
        layers=frozenset(gc["layers"]), scale=gc["scale"], mode=gc["mode"],
        timesteps=None if gc["timesteps"] is None else frozenset(gc["timesteps"]),
    )
    shape = (gc["frames"], gc["height"], gc["width"], pipe.channels)
    text = make_text_tokens(cfg["model"]["text_len"], pipe.channels, cfg["seed"])

    baseline = sample_baseline(pipe.model, text, pipe.schedule, shape, cfg["seed"])
    guided, trace = sample_with_cag(pipe.model, text, pipe.schedule, config,
                                    shape, cfg["seed"])
    for name, latent in (("baseline_latent.vid", baseline), ("guided_latent.vid", guided)):
        write_video(outdir / name, latent.data)
        written.append(outdir / name)
    for name, latent in (("baseline_decoded.vid", baseline), ("guided_decoded.vid", guided)):
        write_video(outdir / name, pipe.encoder.decode(latent))
        written.append(outdir / name)

    trace_path = outdir / "guidance_activity.csv"
    buf = io.StringIO()
    buf.write(f"# {_artifact_comment(cfg_hash, cfg['seed'])}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "timestep", "activity"])
    for i, value in enumerate(trace):
        writer.writerow([i, pipe.schedule.total_steps - i, repr(float(value))])
    trace_path.write_text(buf.getvalue())
    written.append(trace_path)

    meta_path = outdir / "run_meta.json"
    meta_path.write_text(json.dumps({
        "schema_version": SCHEMA_VERSION, "config_hash": cfg_hash,
        "seed": cfg["seed"], "guidance": config.to_dict(),
        "trace_total": float(np.sum(trace)),
    }, indent=2, sort_keys=True))
    written.append(meta_path)
    if cfg["figures"]:
        from . import report as report_figures

        written.append(report_figures.render_trace_figure(
            trace, pipe.schedule.total_steps, outdir))
    _write_manifest(outdir, "sample", cfg_hash, cfg["seed"], written)
    print(f"sampled baseline and guided latents (scale={gc['scale']}, "
          f"layers={sorted(config.layers)}, total activity {np.sum(trace):.4f})")
    return EXIT_OK


COMMANDS = {
    "generate-dataset": cmd_generate_dataset,
    "analyze": cmd_analyze,
    "track": cmd_track,
    "eval-tracks": cmd_eval_tracks,
    "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossframe",
        description="Temporal-correspondence analysis, tracking, and guided "
                    "sampling for a toy video diffusion transformer.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate-dataset", "render synthetic scenes with ground-truth tracks"),
        ("analyze", "sweep (timestep, layer, kind) cells and rank them"),
        ("track", "zero-shot point tracking at a selected cell"),
        ("eval-tracks", "score an estimated annotation against ground truth"),
        ("sample", "sample latents with and without cross-frame guidance"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel workers for sweeps")
        p.add_argument("--format", choices=["json", "csv", "both"],
                       help="report formats to write")
        p.add_argument("--figures", action=argparse.BooleanOptionalAction,
                       default=None, help="render figures alongside reports")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "workers": args.workers,
                 "format": args.format, "figures": args.figures}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, AnnotationError, cachefile.CacheFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, TrainingDiverged, SamplingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
