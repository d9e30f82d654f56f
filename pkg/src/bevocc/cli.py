"""Command-line interface: ``bevocc <command> [<subcommand>] [options]``.

Every command takes one ``--seed``; stochastic stages draw child seeds as
``SeedSequence([seed, STAGE]).generate_state(1)[0]`` with the stage ids in
``SEED_STAGES``. Config files are JSON; unknown keys are rejected and seed keys
are refused because seeds come only from ``--seed``.

Each run writes a JSON manifest next to its primary output (``<out>.manifest.json``,
or ``manifest.json`` inside an output directory), also when the run fails.
Relative output paths resolve against ``$BEVOCC_OUT_DIR`` when it is set.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager, nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import BevOccError, ConfigError, ContractError
from .diffcore import no_grad
from .evaluation import (
    MetricReport,
    RankTable,
    camera_sectors,
    eval_occupancy,
    eval_pointmap,
    ground_truth_grid,
    lidar_rays,
    load_rank_table,
    occupancy_scores,
)
from .geometry import load_lpcd, load_voxg, save_lpcd, save_voxg
from .model import ModelConfig, OccupancyNet, argmax_camera_map, freeze, load_checkpoint
from .rendering import (
    RayRenderConfig,
    VoxelRenderConfig,
    dump_ray_samples,
    oracle_field,
    render_point_cloud,
    render_voxel_grid,
)
from .simulator import (
    default_rig,
    drop_cameras,
    generate_scene,
    load_scene,
    render_views,
    save_scene,
    simulate_lidar,
)
from .supervision import SamplingConfig, save_lqry, scene_queries, validate_against_oracle
from .training import TrainConfig, train

OUT_DIR_ENV = "BEVOCC_OUT_DIR"
SEED_STAGES = {"model": 0, "train": 1, "labels": 2, "voxels": 3}

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def child_seed(seed: int, stage: str) -> int:
    """Seed for one stochastic stage of a command."""
    return int(np.random.SeedSequence([seed, SEED_STAGES[stage]]).generate_state(1)[0])


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON encoding."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    version: str = __version__
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["config_hash"] = self.config_hash
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - start


# -- helpers -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _out_path(value) -> Path:
    p = Path(value)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _read_config(path: Optional[str], allowed: Dict[str, object], where: str) -> dict:
    """Load a JSON object, check its keys against ``allowed`` and fill defaults."""
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{where} config {path}: invalid JSON ({err})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{where} config must be a JSON object")
    _no_seed(doc, where)
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where} config: unknown keys {sorted(unknown)}")
    out = dict(allowed)
    out.update(doc)
    return out


def _no_seed(doc: dict, where: str):
    if "seed" in doc:
        raise ConfigError(f"{where} config: 'seed' is set by --seed, not the config file")


def _parse_indices(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--drop-cameras: expected comma-separated indices, got {text!r}") from None


def _parse_seeds(text: str) -> List[int]:
    """``"3"``, ``"0:50"`` (half-open range) or ``"1,4,9"``."""
    try:
        if ":" in text:
            a, b = text.split(":")
            return list(range(int(a), int(b)))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"invalid seed list {text!r}") from None


SCENE_DEFAULTS = {"box_count": [4, 8], "sphere_count": [0, 2], "float_prob": 0.15,
                  "clearance": 3.0, "facades": True, "image_size": 32, "num_cameras": 4}


def _make_scene(seed: int, scene_cfg: dict):
    rig = default_rig(image_size=int(scene_cfg["image_size"]),
                      num_cameras=int(scene_cfg["num_cameras"]))
    return generate_scene(seed, cameras=rig, box_count=tuple(scene_cfg["box_count"]),
                          sphere_count=tuple(scene_cfg["sphere_count"]),
                          float_prob=float(scene_cfg["float_prob"]),
                          clearance=float(scene_cfg["clearance"]),
                          facades=bool(scene_cfg["facades"]))


def _model_config(doc: dict, seed: int) -> ModelConfig:
    _no_seed(doc, "model")
    return ModelConfig.from_dict({**doc, "seed": child_seed(seed, "model")})


def _train_config(doc: dict, seed: int) -> TrainConfig:
    _no_seed(doc, "train")
    if "sampling" in doc:
        _no_seed(doc["sampling"], "train.sampling")
    return TrainConfig.from_dict({**doc, "seed": child_seed(seed, "train")})


def _check_rig(scene, cfg: ModelConfig):
    cams = scene.cameras
    if len(cams) != cfg.num_cameras:
        raise ConfigError(f"model.num_cameras={cfg.num_cameras} but the scene rig has "
                          f"{len(cams)} cameras")
    if cams[0].width != cfg.image_size or cams[0].height != cfg.image_size:
        raise ConfigError(f"model.image_size={cfg.image_size} but the scene renders "
                          f"{cams[0].width}x{cams[0].height} images")


def _field(args, scene, man: RunManifest):
    """Oracle indicator or a frozen checkpoint on the (optionally reduced) views."""
    if args.oracle == bool(args.checkpoint):
        raise ConfigError("exactly one of --oracle or --checkpoint is required")
    if args.oracle:
        return oracle_field(scene)
    man.inputs["checkpoint"] = str(args.checkpoint)
    net, _ = load_checkpoint(args.checkpoint)
    _check_rig(scene, net.config)
    views = render_views(scene)
    dropped = _parse_indices(args.drop_cameras) if getattr(args, "drop_cameras", None) else []
    bad = [i for i in dropped if not 0 <= i < views.num_cameras]
    if bad:
        raise ConfigError(f"--drop-cameras: indices {bad} outside [0, {views.num_cameras})")
    if dropped:
        keep = [i for i in range(views.num_cameras) if i not in set(dropped)]
        views = drop_cameras(views, keep)
    return freeze(net, views)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# -- commands ----------------------------------------------------------------

def cmd_scene_gen(args, man: RunManifest):
    cfg = _read_config(args.config, SCENE_DEFAULTS, "scene")
    man.config = {"scene": cfg}
    with man.stage("generate"):
        scene = _make_scene(args.seed, cfg)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(out, scene)
    man.outputs["scene"] = str(out)
    return out


def cmd_lidar_sim(args, man: RunManifest):
    scene = load_scene(args.scene)
    man.inputs["scene"] = args.scene
    man.config = {"lidar": scene.lidar.to_dict()}
    with man.stage("simulate"):
        cloud = simulate_lidar(scene)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lpcd(out, cloud)
    man.outputs["cloud"] = str(out)
    print(f"{len(cloud)} returns")
    return out


def cmd_labels_make(args, man: RunManifest):
    defaults = {k: v for k, v in SamplingConfig().to_dict().items() if k != "seed"}
    cfg = _read_config(args.config, defaults, "sampling")
    man.config = {"sampling": cfg}
    sampling = SamplingConfig.from_dict({**cfg, "seed": child_seed(args.seed, "labels")})
    scene = load_scene(args.scene)
    man.inputs["scene"] = args.scene
    with man.stage("sample"):
        qs = scene_queries(scene, sampling)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lqry(out, qs)
    man.outputs["queries"] = str(out)
    agree = validate_against_oracle(qs, scene)
    print(f"{len(qs.labels)} queries ({qs.num_positive} positive); oracle agreement "
          f"overall {agree.overall:.4f} negative {agree.negative:.4f} "
          f"positive {agree.positive:.4f}")
    return out


TRAIN_SECTIONS = {"model": {}, "train": {}, "scene": {}}


def _train_inputs(args, man: RunManifest):
    doc = _read_config(args.config, TRAIN_SECTIONS, "train")
    for name in TRAIN_SECTIONS:
        if not isinstance(doc[name], dict):
            raise ConfigError(f"train config: section {name!r} must be an object")
    unknown = set(doc["scene"]) - set(SCENE_DEFAULTS)
    if unknown:
        raise ConfigError(f"scene config: unknown keys {sorted(unknown)}")
    model_cfg = _model_config(doc["model"], args.seed)
    train_cfg = _train_config(doc["train"], args.seed)
    # the rig follows the model unless the config pins it
    scene_cfg = {**SCENE_DEFAULTS, "image_size": model_cfg.image_size,
                 "num_cameras": model_cfg.num_cameras, **doc["scene"]}
    train_doc = {k: v for k, v in train_cfg.to_dict().items() if k != "seed"}
    train_doc["sampling"] = {k: v for k, v in train_doc["sampling"].items() if k != "seed"}
    man.config = {"model": {k: v for k, v in model_cfg.to_dict().items() if k != "seed"},
                  "train": train_doc, "scene": scene_cfg}
    if args.scenes:
        scenes = [load_scene(p) for p in args.scenes]
        man.inputs["scenes"] = ",".join(args.scenes)
    else:
        seeds = _parse_seeds(args.scene_seeds)
        man.inputs["scene_seeds"] = args.scene_seeds
        scenes = [_make_scene(s, scene_cfg) for s in seeds]
    if not scenes:
        raise ConfigError("train needs at least one scene (--scenes or --scene-seeds)")
    for s in scenes:
        _check_rig(s, model_cfg)
    return scenes, model_cfg, train_cfg, scene_cfg


def cmd_train(args, man: RunManifest):
    scenes, model_cfg, train_cfg, _ = _train_inputs(args, man)
    out = _out_path(args.out_dir)
    man.outputs["dir"] = str(out)
    every = max(1, train_cfg.iterations // 20)

    def report(rec):
        if rec.step % every == 0 or rec.step == train_cfg.iterations - 1:
            print(f"step {rec.step} loss {rec.loss:.4f} lr {rec.lr:.2e} "
                  f"grad_norm {rec.grad_norm:.3f}", flush=True)

    with man.stage("train"):
        res = train(scenes, train_cfg, model_cfg, out_dir=out, on_step=report)
    man.outputs["checkpoint"] = str(out / "final.vgtc")
    man.outputs["history"] = str(out / "history.csv")
    print(f"final loss {res.final_loss():.4f} ({res.seconds:.1f} s)")
    return out / "manifest.json"


def cmd_render_rays(args, man: RunManifest):
    cfg = _read_config(args.config, asdict(RayRenderConfig()), "render")
    rcfg = RayRenderConfig(**cfg)
    scene = load_scene(args.scene)
    man.inputs["scene"] = args.scene
    man.config = {"render": cfg, "oracle": bool(args.oracle),
                  "drop_cameras": _parse_indices(args.drop_cameras or "")}
    field_ = _field(args, scene, man)
    rays = lidar_rays(scene)
    with man.stage("render"):
        res = render_point_cloud(field_, rays, rcfg, scene.roi)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lpcd(out, res.cloud)
    man.outputs["cloud"] = str(out)
    depth_csv = out.with_suffix(".depths.csv")
    sector = camera_sectors(rays.directions, scene.cameras)
    rows = [(i, _fmt(d), _fmt(w), int(k), _fmt(g), int(s)) for i, (d, w, k, g, s) in enumerate(
        zip(res.depths.depth, res.depths.weight, res.kept, rays.hit_distance, sector))]
    _write_csv(depth_csv, ["ray", "depth", "weight", "kept", "gt_depth", "camera_sector"], rows)
    man.outputs["depths"] = str(depth_csv)
    if args.dump_ray is not None:
        if not 0 <= args.dump_ray < len(rays):
            raise ConfigError(f"--dump-ray {args.dump_ray} outside [0, {len(rays)})")
        samples = out.with_suffix(f".ray{args.dump_ray}.csv")
        dump_ray_samples(samples, field_, rays[args.dump_ray], rcfg, scene.roi)
        man.outputs["ray_samples"] = str(samples)
    print(f"{len(res.cloud)} points, {res.dropped} rays below the weight floor")
    return out


VOXEL_DEFAULTS = {"voxel_size": 0.4, "samples": 8, "threshold": 0.5, "visible_only": True}


def _voxel_cfg(args):
    cfg = _read_config(args.config, VOXEL_DEFAULTS, "voxels")
    vcfg = VoxelRenderConfig(samples=int(cfg["samples"]), threshold=float(cfg["threshold"]),
                             seed=child_seed(args.seed, "voxels"))
    return cfg, vcfg


def cmd_render_voxels(args, man: RunManifest):
    cfg, vcfg = _voxel_cfg(args)
    scene = load_scene(args.scene)
    man.inputs["scene"] = args.scene
    man.config = {"voxels": cfg, "oracle": bool(args.oracle)}
    field_ = _field(args, scene, man)
    with man.stage("render"):
        mask = None
        if cfg["visible_only"]:
            mask = ground_truth_grid(scene, cfg["voxel_size"]).visibility
        grid = render_voxel_grid(field_, scene.roi, cfg["voxel_size"], vcfg, mask)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_voxg(out, grid)
    man.outputs["grid"] = str(out)
    print(f"{int(grid.occupancy.sum())} occupied voxels of {grid.occupancy.size}")
    return out


def _write_report(args, man: RunManifest, report) -> Path:
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    man.outputs["report"] = str(out)
    print(report.to_json())
    return out


def cmd_eval_pointmap(args, man: RunManifest):
    cfg = _read_config(args.config, asdict(RayRenderConfig()), "render")
    scene = load_scene(args.scene)
    man.inputs["scene"] = args.scene
    man.config = {"render": cfg, "oracle": bool(args.oracle),
                  "drop_cameras": _parse_indices(args.drop_cameras or "")}
    if args.pred:
        if args.oracle or args.checkpoint:
            raise ConfigError("--pred excludes --oracle and --checkpoint")
        source = load_lpcd(args.pred)
        man.inputs["pred"] = args.pred
    else:
        source = _field(args, scene, man)
    with man.stage("evaluate"):
        report = eval_pointmap(source, scene, cfg=RayRenderConfig(**cfg))
    return _write_report(args, man, report)


def cmd_eval_occupancy(args, man: RunManifest):
    cfg, vcfg = _voxel_cfg(args)
    scene = load_scene(args.scene)
    man.inputs["scene"] = args.scene
    man.config = {"voxels": cfg, "oracle": bool(args.oracle)}
    with man.stage("ground_truth"):
        gt = ground_truth_grid(scene, cfg["voxel_size"])
    with man.stage("evaluate"):
        if args.pred:
            if args.oracle or args.checkpoint:
                raise ConfigError("--pred excludes --oracle and --checkpoint")
            man.inputs["pred"] = args.pred
            sc = occupancy_scores(load_voxg(args.pred), gt)
            report = MetricReport({"f1": sc.f1, "iou": sc.iou},
                                  {"tp": sc.tp, "fp": sc.fp, "fn": sc.fn, "visible": sc.visible},
                                  {"voxel_size": cfg["voxel_size"]})
        else:
            report = eval_occupancy(_field(args, scene, man), scene, cfg["voxel_size"], vcfg, gt)
    return _write_report(args, man, report)


def format_ranks(table: RankTable) -> List[tuple]:
    avg = table.average_rank()
    return [(m, f"{avg[m]:.1f}") for m in table.methods]


def cmd_rank(args, man: RunManifest):
    table = load_rank_table(args.table)
    man.inputs["table"] = args.table
    man.config = {"columns": [f"{d}:{m}" for d, m in table.columns],
                  "orientation": table.orientation}
    rows = format_ranks(table)
    for m, r in rows:
        print(f"{m},{r}")
    if args.out:
        out = _out_path(args.out)
        _write_csv(out, ["method", "average_rank"], rows)
        man.outputs["ranks"] = str(out)
        return out
    return None


def cmd_attn_dump(args, man: RunManifest):
    scene = load_scene(args.scene)
    net, _ = load_checkpoint(args.checkpoint)
    _check_rig(scene, net.config)
    man.inputs.update(scene=args.scene, checkpoint=args.checkpoint)
    man.config = {"bev_side": net.config.bev_side, "projector": net.config.projector}
    records: list = []
    with man.stage("forward"), no_grad():
        net.bev_grid(render_views(scene), records)
    out = _out_path(args.out_dir)
    side = net.config.bev_side
    ncam = net.config.num_cameras
    rows = []
    for rec in records:
        mass = rec.camera_mass()[0]
        for q in range(mass.shape[0]):
            rows.append([rec.layer, rec.block, q, q // side, q % side]
                        + [_fmt(v) for v in mass[q]])
        raw = out / f"attention_layer{rec.layer}_block{rec.block}.csv"
        tokens = rec.weights.shape[-1]
        _write_csv(raw, ["query"] + [f"token{k}" for k in range(tokens)],
                   ([q] + [_fmt(v) for v in rec.weights[0, q]] for q in range(rec.weights.shape[1])))
        man.outputs[raw.stem] = str(raw)
    mass_csv = out / "attention_camera_mass.csv"
    _write_csv(mass_csv, ["layer", "block", "query", "row", "col"]
               + [f"cam{i}" for i in range(ncam)], rows)
    amap = argmax_camera_map(records, side)
    map_csv = out / "argmax_camera.csv"
    _write_csv(map_csv, [f"col{j}" for j in range(side)], amap.tolist())
    man.outputs.update(camera_mass=str(mass_csv), argmax_map=str(map_csv))
    print("\n".join("".join(str(v) for v in row) for row in amap))
    return out / "manifest.json"


ABLATION_STRATEGIES = ("random", "stratified", "stratified_symmetric")
ABLATION_HEADER = ["strategy", "absrel", "chamfer", "f1", "iou", "final_loss", "seconds"]


def cmd_ablate_sampling(args, man: RunManifest):
    scenes, model_cfg, train_cfg, scene_cfg = _train_inputs(args, man)
    eval_seeds = _parse_seeds(args.eval_seeds)
    if not eval_seeds:
        raise ConfigError("--eval-seeds must name at least one scene")
    man.inputs["eval_seeds"] = args.eval_seeds
    eval_scenes = [_make_scene(s, scene_cfg) for s in eval_seeds]
    gts = [ground_truth_grid(s) for s in eval_scenes]
    out = _out_path(args.out)
    rows = []
    for strategy in ABLATION_STRATEGIES:
        sampling = SamplingConfig.from_dict({**train_cfg.sampling.to_dict(), "strategy": strategy})
        cfg = train_cfg.replace(sampling=sampling)
        with man.stage(f"train_{strategy}"):
            res = train(scenes, cfg, model_cfg)
        metrics = {"absrel": [], "chamfer": [], "f1": [], "iou": []}
        vcfg = VoxelRenderConfig(seed=child_seed(args.seed, "voxels"))
        with man.stage(f"eval_{strategy}"):
            for scene, gt in zip(eval_scenes, gts):
                handle = freeze(res.net, render_views(scene))
                pm = eval_pointmap(handle, scene)
                oc = eval_occupancy(handle, scene, cfg=vcfg, gt=gt)
                metrics["absrel"].append(pm.values["absrel"])
                metrics["chamfer"].append(pm.values.get("chamfer", np.nan))
                metrics["f1"].append(oc.values["f1"])
                metrics["iou"].append(oc.values["iou"])
        row = [strategy] + [_fmt(np.mean(metrics[k])) for k in ("absrel", "chamfer", "f1", "iou")]
        row += [_fmt(res.final_loss()), _fmt(res.seconds)]
        rows.append(row)
        print(",".join(row), flush=True)
    _write_csv(out, ABLATION_HEADER, rows)
    man.outputs["table"] = str(out)
    return out


# -- parser ------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="root seed for every random stage")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("--manifest", default=None, help="manifest path (default: beside the output)")


def _add_field_source(p, pred=False, drop=False):
    p.add_argument("--scene", required=True)
    p.add_argument("--oracle", action="store_true", help="use the analytic scene indicator")
    p.add_argument("--checkpoint", default=None)
    if pred:
        p.add_argument("--pred", default=None, help="precomputed prediction to score")
    if drop:
        p.add_argument("--drop-cameras", default=None,
                       help="comma-separated camera indices zeroed before inference")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevocc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    top = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def group(name, help_):
        g = top.add_parser(name, help=help_)
        return g.add_subparsers(dest="sub", required=True, parser_class=_Parser)

    scene = group("scene", "procedural scenes")
    p = scene.add_parser("gen", help="generate a scene JSON from --seed")
    _add_common(p)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene_gen)

    lidar = group("lidar", "LiDAR simulation")
    p = lidar.add_parser("sim", help="simulate a sweep into an LPCD file")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lidar_sim)

    labels = group("labels", "labeled query sets")
    p = labels.add_parser("make", help="sample labeled queries into an LQRY file")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_labels_make)

    p = top.add_parser("train", help="train an occupancy network")
    _add_common(p)
    p.add_argument("--config", default=None)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenes", nargs="+")
    src.add_argument("--scene-seeds", help="'0:50', '3' or '1,4,9'")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    render = group("render", "render a field")
    p = render.add_parser("rays", help="render depths along the scene's LiDAR rays")
    _add_common(p)
    _add_field_source(p, drop=True)
    p.add_argument("--config", default=None)
    p.add_argument("--dump-ray", type=int, default=None, help="write one ray's samples as CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_rays)
    p = render.add_parser("voxels", help="render a binary voxel grid")
    _add_common(p)
    _add_field_source(p)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_voxels)

    ev = group("eval", "metrics")
    p = ev.add_parser("pointmap", help="AbsRel and Chamfer distance along LiDAR rays")
    _add_common(p)
    _add_field_source(p, pred=True, drop=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_pointmap)
    p = ev.add_parser("occupancy", help="voxel F1/IoU in the visible region")
    _add_common(p)
    _add_field_source(p, pred=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_occupancy)

    p = top.add_parser("rank", help="average rank over a results table")
    _add_common(p)
    p.add_argument("--table", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rank)

    attn = group("attn", "attention inspection")
    p = attn.add_parser("dump", help="attention CSVs and the argmax-camera BEV map")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_attn_dump)

    ablate = group("ablate", "ablations")
    p = ablate.add_parser("sampling", help="train and score the three sampling strategies")
    _add_common(p)
    p.add_argument("--config", default=None)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenes", nargs="+")
    src.add_argument("--scene-seeds")
    p.add_argument("--eval-seeds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_sampling)
    return parser


def _manifest_path(args) -> Optional[Path]:
    if getattr(args, "manifest", None):
        return _out_path(args.manifest)
    for name in ("out_dir",):
        if getattr(args, name, None):
            return _out_path(getattr(args, name)) / "manifest.json"
    if getattr(args, "out", None):
        out = _out_path(args.out)
        return out.with_name(out.name + ".manifest.json")
    return None


def _threads(n: Optional[int]):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    name = args.command if not getattr(args, "sub", None) else f"{args.command} {args.sub}"
    man = RunManifest(name, args.seed, {})
    code = EXIT_OK
    start = time.perf_counter()
    try:
        with _threads(args.threads):
            args.func(args, man)
    except ContractError as err:
        man.status, man.error, code = "invalid", str(err), EXIT_INVALID
    except (BevOccError, OSError) as err:
        man.status, man.error, code = "failed", f"{type(err).__name__}: {err}", EXIT_RUNTIME
    man.timings["total"] = time.perf_counter() - start
    path = _manifest_path(args)
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(man.to_json())
        except OSError as err:
            print(f"error: could not write manifest {path}: {err}", file=sys.stderr)
            code = code or EXIT_RUNTIME
    if man.error:
        print(f"error: {man.error}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
