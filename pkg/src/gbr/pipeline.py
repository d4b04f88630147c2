"""Stage orchestration: every stage reads its inputs from, and writes its outputs to, the run directory.

Layout of a run directory::

    scene/     synthetic scene (synth stage only; otherwise --scene is used in place)
    gt/        ground truth written by synth: cameras.txt, mesh.ply, depth_###.raw
    align/     cameras_init.txt, cloud_init.ply, align_report.json
    match/     tracks.ply, match_report.json
    ba/        cameras_opt.txt, cloud_opt.ply, ba_report.json
    refine/    depth_###.raw, normal_###.raw, depth_init_###.raw, refine_report.json
    render/    color_###.png, depth_###.raw, normal_###.raw, render_report.json
    losses/    losses_report.json
    fuse/      mesh.ply, volume_meta.json
    eval/      eval_report.json, eval_summary.csv, figures/*.png
    manifest.json, config.ini, events.jsonl
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ba import extract_matches, pairwise_align, run_neural_ba, scene_pair_maps
from .ba.align import estimate_focal
from .config import STAGES, PipelineConfig
from .depth import AggregationConfig, ScaleCorrectionConfig, refine_view
from .errors import ConfigError, EmptyResultError, GBRError, LoadError, NumericalError
from .fusion import TsdfVolume, extract_mesh, fuse_depths
from .geometry import CameraIntrinsics, DepthMap, NormalMap, normals_from_depth
from .io import (
    load_cameras,
    load_depth,
    load_mesh,
    load_scene,
    read_image,
    read_ply,
    read_raw,
    save_cameras,
    save_depth,
    save_mesh,
    save_point_cloud,
    save_scene,
    write_image,
    write_raw,
)
from .losses import (
    LossComponents,
    cycle_loss,
    cycle_partner,
    depth_loss,
    ndc_loss,
    normal_loss,
    photometric_loss,
    synthesize_pseudo_views,
    total_loss,
)
from .metrics import EvalReport, ate_alignment, chamfer, evaluate, ground_truth_samples, nearest_distances, psnr
from .render import render, splats_from_cloud
from .synthetic import PRESETS, RefinedDepthProvider, generate_synthetic

logger = logging.getLogger("gbr")


class StageError(GBRError):
    """A stage failure carrying the stage name and the exit code of the underlying error."""

    def __init__(self, stage: str, cause: GBRError):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        self.hint = cause.hint


class JsonEventHandler(logging.Handler):
    """Appends one JSON object per log record; ``extra={'event': {...}}`` fields are merged in."""

    def __init__(self, path: Path):
        super().__init__()
        self.path = path

    def emit(self, record: logging.LogRecord) -> None:
        entry = {
            "time": record.created,
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        entry.update(getattr(record, "event", {}) or {})
        with open(self.path, "a") as f:
            f.write(json.dumps(entry, default=_json_default, sort_keys=True) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats so reports stay strict JSON."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        f = float(o)
        if math.isnan(f):
            return None
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return o


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(json.loads(json.dumps(data, default=_json_default))), indent=2, sort_keys=True)
    path.write_text(text + "\n")
    return path


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import matplotlib
    import PIL
    import scipy
    import skimage
    import sklearn

    return {
        "gbr": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-image": skimage.__version__,
        "scikit-learn": sklearn.__version__,
        "matplotlib": matplotlib.__version__,
        "Pillow": PIL.__version__,
    }


def load_normals(path) -> NormalMap:
    N = read_raw(path)
    valid = np.linalg.norm(N, axis=-1) > 0.5
    N = np.where(valid[..., None], N / np.where(valid, np.linalg.norm(N, axis=-1), 1.0)[..., None], 0.0)
    return NormalMap(N, valid)


@dataclass
class RunContext:
    cfg: PipelineConfig
    out: Path
    scene_dir: Path | None = None
    gt_dir: Path | None = None
    _bundle: object = field(default=None, repr=False)

    @property
    def seed(self) -> int:
        return self.cfg.pipeline.seed

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def bundle(self):
        if self._bundle is None:
            if self.scene_dir is None:
                raise ConfigError("no scene: pass --scene DIR or include the synth stage")
            self._bundle = load_scene(self.scene_dir)
        return self._bundle

    def require(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        if not p.exists():
            raise LoadError(f"missing {p}; run the stage that produces it first")
        return p

    def cameras(self):
        return load_cameras(self.require("ba", "cameras_opt.txt"))

    def cloud(self):
        ply = read_ply(self.require("ba", "cloud_opt.ply"))
        colors = None if ply.colors is None else ply.colors.astype(np.float64) / 255.0
        return ply.vertices, colors, ply.normals

    def ground_truth(self):
        gt = self.gt_dir
        if gt is None or not (gt / "cameras.txt").exists():
            return None
        cams = load_cameras(gt / "cameras.txt")
        depths = [load_depth(gt / f"depth_{i:03d}.raw") for i in range(len(cams))]
        V, F = load_mesh(gt / "mesh.ply")
        return cams, depths, V, F


# --- stages -------------------------------------------------------------------


def stage_synth(ctx: RunContext) -> dict:
    s = ctx.cfg.synthetic
    if s.preset not in PRESETS:
        raise ConfigError(f"unknown synthetic preset {s.preset!r}; choose from {', '.join(PRESETS)}")
    overrides = {k: v for k, v in dataclasses.asdict(s).items() if k != "preset" and v is not None}
    try:
        spec = dataclasses.replace(PRESETS[s.preset], seed=ctx.seed, texture_seed=ctx.seed, **overrides)
    except TypeError as exc:
        raise ConfigError(f"[synthetic]: {exc}") from exc
    bundle, gt = generate_synthetic(spec)
    scene = save_scene(bundle, ctx.out / "scene")
    ctx.scene_dir, ctx._bundle = scene, None
    gdir = ctx.out / "gt"
    gdir.mkdir(parents=True, exist_ok=True)
    save_cameras(gdir / "cameras.txt", gt.cameras)
    save_mesh(gdir / "mesh.ply", gt.mesh_vertices, gt.mesh_faces)
    for i, d in enumerate(gt.depths):
        save_depth(gdir / f"depth_{i:03d}.raw", d)
    info = {
        "preset": s.preset,
        "spec": dataclasses.asdict(spec),
        "surface": type(gt.surface).__name__,
        "view_scales": gt.view_scales,
        "region_center": gt.region_center,
        "region_radius": gt.region_radius,
    }
    write_json(gdir / "synthetic.json", info)
    ctx.gt_dir = gdir
    files = sorted(p for p in scene.rglob("*") if p.is_file()) + sorted(p for p in gdir.iterdir() if p.is_file())
    return {"outputs": files, "summary": {"views": len(bundle.views), "pairs": len(bundle.pairs)}}


def _intrinsics(bundle, cfg) -> list[CameraIntrinsics]:
    if bundle.cameras is not None:
        return [K for K, _ in bundle.cameras]
    out = []
    for v in bundle.views:
        H, W = v.shape
        est = estimate_focal(v.pointmap, min_confidence=cfg.ba.conf_primary)
        out.append(CameraIntrinsics.centered(est.focal, W, H))
    return out


def stage_align(ctx: RunContext) -> dict:
    bundle = ctx.bundle()
    own, cross = scene_pair_maps(bundle)
    al = pairwise_align(own, cross, bundle.pairs)
    frames = al.unified(own)
    intr = _intrinsics(bundle, ctx.cfg)
    cams = list(zip(intr, al.poses()))
    save_cameras(ctx.path("align", "cameras_init.txt"), cams)
    pts = []
    cols = []
    for f, v in zip(frames, bundle.views):
        keep = (f.confidence >= ctx.cfg.ba.conf_primary) & np.all(np.isfinite(f.points), axis=-1)
        pts.append(f.points[keep])
        cols.append(v.image[keep])
    P = np.concatenate(pts)
    save_point_cloud(ctx.path("align", "cloud_init.ply"), P, np.concatenate(cols))
    report = {
        "initial_cost": al.initial_cost,
        "final_cost": al.final_cost,
        "iterations": al.iterations,
        "dropped_pairs": [list(p) for p in al.dropped_pairs],
        "focals": [K.fx for K in intr],
        "points": int(len(P)),
    }
    write_json(ctx.path("align", "align_report.json"), report)
    return {"outputs": [ctx.out / "align" / n for n in ("cameras_init.txt", "cloud_init.ply", "align_report.json")], "summary": report}


def stage_match(ctx: RunContext) -> dict:
    bundle = ctx.bundle()
    own, cross = scene_pair_maps(bundle)
    frames = pairwise_align(own, cross, bundle.pairs).unified(own)
    secondary = [v.secondary_confidence for v in bundle.views]
    c = ctx.cfg.ba
    m = extract_matches(frames, bundle.pairs, secondary, c.conf_primary, c.conf_secondary, c.cap_per_view)
    save_point_cloud(ctx.path("match", "tracks.ply"), m.points)
    hist = np.bincount(m.views_per_track())
    report = {
        "tracks": m.num_tracks,
        "observations": m.num_observations,
        "views_per_track": {str(k): int(n) for k, n in enumerate(hist) if n},
        "stats": m.stats,
    }
    write_json(ctx.path("match", "match_report.json"), report)
    return {"outputs": [ctx.out / "match" / "tracks.ply", ctx.out / "match" / "match_report.json"], "summary": {"tracks": m.num_tracks}}


def stage_ba(ctx: RunContext) -> dict:
    res = run_neural_ba(ctx.bundle(), ctx.cfg.ba)
    save_cameras(ctx.path("ba", "cameras_opt.txt"), res.rig.cameras())
    save_point_cloud(ctx.path("ba", "cloud_opt.ply"), res.cloud, res.colors, res.normals)
    summary = res.summary()
    write_json(ctx.path("ba", "ba_report.json"), summary)
    rep = res.report
    return {
        "outputs": [ctx.out / "ba" / n for n in ("cameras_opt.txt", "cloud_opt.ply", "ba_report.json")],
        "summary": {"initial_rmse": rep.initial_rmse, "final_rmse": rep.final_rmse, "points": int(len(res.cloud))},
    }


def _provider(ctx: RunContext) -> RefinedDepthProvider:
    r = ctx.cfg.refine
    if r.provider == "directory":
        return RefinedDepthProvider(source=r.provider_dir, samples_per_view=r.samples)
    prov = RefinedDepthProvider(
        samples_per_view=r.samples, drift_a=r.drift_a, drift_b=r.drift_b, drift_jitter=r.drift_jitter,
        detail_gain=r.detail_gain, noise=r.noise, seed=ctx.seed,
    )
    gt = ctx.ground_truth()
    if gt is not None:
        # ground-truth depths live in the ground-truth frame; bring them to the reconstruction's scale
        _, T = ate_alignment([P for _, P in ctx.cameras()], [P for _, P in gt[0]])
        refs = {i: DepthMap(d.depth / T.scale, d.valid_mask) for i, d in enumerate(gt[1])}
        prov = prov.with_references(refs)
    return prov


def stage_refine(ctx: RunContext) -> dict:
    r = ctx.cfg.refine
    cams = ctx.cameras()
    cloud, _, normals = ctx.cloud()
    prov = _provider(ctx)
    scfg = ScaleCorrectionConfig(r.window, r.stride, r.eps_edge, r.eps_smooth, r.tau_e)
    acfg = AggregationConfig(r.tau_D)
    outputs, reports = [], []
    for i, (K, P) in enumerate(cams):
        res = refine_view(i, cloud, K, P, prov, r.rounds, scfg, acfg, r.fill_holes, normals=normals)
        for name, arr in ((f"depth_{i:03d}.raw", res.depth.depth), (f"depth_init_{i:03d}.raw", res.initial.depth),
                          (f"normal_{i:03d}.raw", res.normals.normals)):
            write_raw(ctx.path("refine", name), arr)
            outputs.append(ctx.out / "refine" / name)
        reports.append(res.report)
    write_json(ctx.path("refine", "refine_report.json"), {"provider": r.provider, "views": reports})
    outputs.append(ctx.out / "refine" / "refine_report.json")
    drift = [abs(v["final_mean"] / v["initial_mean"] - 1.0) for v in reports]
    return {"outputs": outputs, "summary": {"max_mean_drift": max(drift), "fallbacks": sum(v["fallback"] for v in reports)}}


def _splats(ctx: RunContext):
    cloud, colors, normals = ctx.cloud()
    rs = ctx.cfg.render
    scene = splats_from_cloud(cloud, colors, rs.neighbours, rs.flatness, rs.opacity, rs.scale_factor, normals=normals)
    skies = [v.image[v.sky] for v in ctx.bundle().views if v.sky is not None and v.sky.any()]
    if skies:
        # uncovered pixels show the median sky colour instead of black
        scene.background = np.median(np.concatenate(skies), axis=0)
    return scene


def _render(ctx: RunContext, scene, K, P):
    rs = ctx.cfg.render
    return render(scene, K, P, cov_floor=rs.cov_floor, alpha_min=rs.alpha_min, cull_backface=rs.cull_backface)


def stage_render(ctx: RunContext) -> dict:
    cams = ctx.cameras()
    bundle = ctx.bundle()
    scene = _splats(ctx)
    outputs, views = [], []
    for i, (K, P) in enumerate(cams):
        out = _render(ctx, scene, K, P)
        write_image(ctx.path("render", f"color_{i:03d}.png"), np.clip(out.color, 0, 1))
        write_raw(ctx.path("render", f"depth_{i:03d}.raw"), out.depth.depth)
        write_raw(ctx.path("render", f"normal_{i:03d}.raw"), out.normal.normals)
        outputs += [ctx.out / "render" / f"{k}_{i:03d}.{e}" for k, e in (("color", "png"), ("depth", "raw"), ("normal", "raw"))]
        views.append({"view": i, "coverage": float(out.depth.valid_mask.mean()), "psnr": psnr(np.clip(out.color, 0, 1), bundle.views[i].image)})
    write_json(ctx.path("render", "render_report.json"), {"primitives": len(scene), "views": views})
    outputs.append(ctx.out / "render" / "render_report.json")
    return {"outputs": outputs, "summary": {"primitives": len(scene), "mean_coverage": float(np.mean([v["coverage"] for v in views]))}}


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw), None
    except EmptyResultError as exc:
        return None, str(exc)


def stage_losses(ctx: RunContext) -> dict:
    sup, ls = ctx.cfg.supervision, ctx.cfg.losses
    cams = ctx.cameras()
    bundle = ctx.bundle()
    cloud, _, normals = ctx.cloud()
    scene = _splats(ctx)
    n = len(cams)
    Dstar = [load_depth(ctx.require("refine", f"depth_{i:03d}.raw")) for i in range(n)]
    D0 = [load_depth(ctx.require("refine", f"depth_init_{i:03d}.raw")) for i in range(n)]
    Rdep = [load_depth(ctx.require("render", f"depth_{i:03d}.raw")) for i in range(n)]
    Rnor = [load_normals(ctx.require("render", f"normal_{i:03d}.raw")) for i in range(n)]
    Rcol = [read_image(ctx.require("render", f"color_{i:03d}.png")) for i in range(n)]
    rng = np.random.default_rng([ctx.seed, 23])

    def cycle(Da, Ka, Pa, kind, j, pose_b):
        if kind == "real":
            Kb, Pb, Db = cams[j][0], cams[j][1], Rdep[j]
        else:
            Kb, Pb = Ka, pose_b
            Db = _render(ctx, scene, Kb, Pb).depth
        return _safe(cycle_loss, Da, Db, Ka, Pa, Kb, Pb, occlusion_tol=ls.occlusion_tol)

    entries = []
    for i, (K, P) in enumerate(cams):
        sky = bundle.views[i].sky
        notes = {}
        dep, notes["depth"] = _safe(depth_loss, Dstar[i], D0[i], Rdep[i], sky, sup.beta)
        nor, notes["normal"] = _safe(normal_loss, Rnor[i], normals_from_depth(Dstar[i], K), sup.normal_window, sky)
        dist = ls.jitter_distance or (Rdep[i].mean() if Rdep[i].valid_mask.any() else 1.0)
        kind, j, pose_b = cycle_partner(i, cams, rng, sup, target_distance=dist)
        mv, notes["cycle"] = cycle(Rdep[i], K, P, kind, j, pose_b)
        comp = LossComponents(
            normal=nor or 0.0, depth=dep or 0.0, ndc=ndc_loss(Rdep[i], Rnor[i], K), cycle=mv or 0.0,
            photometric=photometric_loss(Rcol[i], bundle.views[i].image, sup.lambda_pho),
        )
        total, breakdown = total_loss(comp, sup, is_pseudo=False)
        breakdown.update({"name": f"view_{i:03d}", "partner": {"kind": kind, "view": j}, "notes": {k: v for k, v in notes.items() if v}})
        entries.append(breakdown)

    pseudo = synthesize_pseudo_views(
        cams, Dstar, cloud, render_fn=lambda K, P: _render(ctx, scene, K, P).color, cfg=sup, closed=ls.pseudo_closed, normals=normals,
    )
    for k, pv in enumerate(pseudo):
        out = _render(ctx, scene, pv.intrinsics, pv.pose)
        notes = {}
        dep, notes["depth"] = _safe(depth_loss, pv.depth, pv.depth, out.depth, None, sup.beta)
        nor, notes["normal"] = _safe(normal_loss, out.normal, pv.normals, sup.normal_window)
        _, j, _ = cycle_partner(None, cams, rng, sup, pose=pv.pose)
        mv, notes["cycle"] = cycle(out.depth, pv.intrinsics, pv.pose, "real", j, None)
        comp = LossComponents(
            normal=nor or 0.0, depth=dep or 0.0, ndc=ndc_loss(out.depth, out.normal, pv.intrinsics), cycle=mv or 0.0,
            photometric=photometric_loss(out.color, pv.rgb, sup.lambda_pho),
        )
        total, breakdown = total_loss(comp, sup, is_pseudo=True)
        breakdown.update({
            "name": f"pseudo_{pv.neighbors[0]}_{pv.neighbors[1]}_{k}", "partner": {"kind": "real", "view": j},
            "sources": pv.sources, "notes": {k2: v for k2, v in notes.items() if v},
        })
        entries.append(breakdown)

    real = [e["total"] for e in entries if e["scale"] == 1.0 and e["name"].startswith("view")]
    pse = [e["total"] for e in entries if e["name"].startswith("pseudo")]
    aggregate = {
        "real_views": len(real),
        "pseudo_views": len(pse),
        "mean_real": float(np.mean(real)) if real else None,
        "mean_pseudo": float(np.mean(pse)) if pse else None,
        "sum": math.fsum(real + pse),
    }
    write_json(ctx.path("losses", "losses_report.json"), {"views": entries, "aggregate": aggregate, "config": dataclasses.asdict(sup)})
    return {"outputs": [ctx.out / "losses" / "losses_report.json"], "summary": aggregate}


def stage_fuse(ctx: RunContext) -> dict:
    fs = ctx.cfg.fusion
    cams = ctx.cameras()
    cloud, _, _ = ctx.cloud()
    bundle = ctx.bundle()
    sub = "render" if fs.depth_source == "rendered" else "refine"
    depths = [load_depth(ctx.require(sub, f"depth_{i:03d}.raw")) for i in range(len(cams))]
    vol = TsdfVolume.from_bounds(cloud.min(axis=0), cloud.max(axis=0), fs.voxel_size, fs.truncation)
    fuse_depths(depths, cams, vol, [v.sky for v in bundle.views])
    mesh = extract_mesh(vol)
    if not len(mesh):
        raise EmptyResultError("fusion produced an empty mesh; check the depth maps and the voxel size")
    save_mesh(ctx.path("fuse", "mesh.ply"), mesh.vertices, mesh.faces, mesh.normals)
    meta = vol.meta()
    meta.update({"depth_source": fs.depth_source, "vertices": int(len(mesh.vertices)), "faces": int(len(mesh.faces)), "area": mesh.area()})
    write_json(ctx.path("fuse", "volume_meta.json"), meta)
    return {"outputs": [ctx.out / "fuse" / "mesh.ply", ctx.out / "fuse" / "volume_meta.json"], "summary": {"faces": int(len(mesh.faces)), "voxel_size": vol.voxel_size}}


def stage_eval(ctx: RunContext) -> dict:
    es = ctx.cfg.eval
    gt = ctx.ground_truth()
    if gt is None:
        raise ConfigError("evaluation needs ground truth; run synth or provide a gt/ directory in the run directory")
    gcams, gdepths, gV, gF = gt
    cams = ctx.cameras()
    rmse, T = ate_alignment([P for _, P in cams], [P for _, P in gcams])
    extras = {"alignment_scale": T.scale}
    pred = gtpts = None
    mesh_path = ctx.out / "fuse" / "mesh.ply"
    if mesh_path.exists():
        V, _ = load_mesh(mesh_path)
        pred = T.apply(V)
        gtpts = ground_truth_samples(
            gV, gF, es.gt_samples, ctx.seed,
            cameras=gcams if es.visibility_filter else None, depths=gdepths if es.visibility_filter else None, min_views=es.min_views,
        )
    images = refs = None
    if (ctx.out / "render" / "color_000.png").exists():
        bundle = ctx.bundle()
        images = [read_image(ctx.out / "render" / f"color_{i:03d}.png") for i in range(len(cams))]
        refs = [v.image for v in bundle.views]
    rep: EvalReport = evaluate(pred, gtpts, es.f1_tau, [P for _, P in cams], [P for _, P in gcams], images, refs)
    rep.ate_rmse = rmse
    meta_path = ctx.out / "fuse" / "volume_meta.json"
    if pred is not None and meta_path.exists():
        voxel = json.loads(meta_path.read_text())["voxel_size"] * T.scale
        extras["voxel_size_gt_units"] = voxel
        extras["chamfer_in_voxels"] = rep.chamfer / voxel
    cloud, _, _ = ctx.cloud()
    if gtpts is not None:
        extras["cloud_chamfer"] = chamfer(T.apply(cloud), gtpts)
    report = rep.to_dict()
    report["extras"] = extras
    write_json(ctx.path("eval", "eval_report.json"), report)
    rows = [(k, v) for k, v in report.items() if k != "extras"] + [(k, v) for k, v in extras.items()]
    with open(ctx.path("eval", "eval_summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, "" if v is None else (repr(v) if isinstance(v, float) else v)])
    outputs = [ctx.out / "eval" / "eval_report.json", ctx.out / "eval" / "eval_summary.csv"]
    if es.figures:
        outputs += write_figures(ctx, T, pred, gtpts)
    return {"outputs": outputs, "summary": {k: report[k] for k in ("chamfer", "f1", "ate_rmse", "psnr")} | extras}


def write_figures(ctx: RunContext, T=None, pred=None, gtpts=None) -> list[Path]:
    """Render every figure the run directory has data for."""
    from . import plotting

    figs = []
    fdir = ctx.out / "eval" / "figures"
    ba_report = ctx.out / "ba" / "ba_report.json"
    if ba_report.exists():
        hist = json.loads(ba_report.read_text())["ba"].get("cost_history") or []
        if hist:
            figs.append(plotting.cost_history(hist, fdir / "ba_cost.png"))
    gt = ctx.ground_truth()
    if gt is not None and (ctx.out / "refine" / "depth_000.raw").exists():
        if T is None:
            _, T = ate_alignment([P for _, P in ctx.cameras()], [P for _, P in gt[0]])
        G = gt[1][0]
        Ds = load_depth(ctx.out / "refine" / "depth_000.raw")
        D0 = load_depth(ctx.out / "refine" / "depth_init_000.raw")
        maps = {"ground truth": G.depth, "|D0 - GT|": np.abs(D0.depth * T.scale - G.depth), "|D* - GT|": np.abs(Ds.depth * T.scale - G.depth)}
        masks = {"ground truth": G.valid_mask, "|D0 - GT|": G.valid_mask & D0.valid_mask, "|D* - GT|": G.valid_mask & Ds.valid_mask}
        figs.append(plotting.depth_panels(maps, fdir / "depth_view000.png", masks))
    if pred is None and gt is not None and (ctx.out / "fuse" / "mesh.ply").exists():
        if T is None:
            _, T = ate_alignment([P for _, P in ctx.cameras()], [P for _, P in gt[0]])
        V, _ = load_mesh(ctx.out / "fuse" / "mesh.ply")
        pred = T.apply(V)
        gtpts = ground_truth_samples(gt[2], gt[3], ctx.cfg.eval.gt_samples, ctx.seed, cameras=gt[0], depths=gt[1])
    if pred is not None and gtpts is not None:
        meta = ctx.out / "fuse" / "volume_meta.json"
        voxel = json.loads(meta.read_text())["voxel_size"] * T.scale if meta.exists() and T is not None else None
        figs.append(plotting.error_histogram(nearest_distances(pred, gtpts), fdir / "mesh_error.png", voxel))
    lr = ctx.out / "losses" / "losses_report.json"
    if lr.exists():
        figs.append(plotting.loss_breakdown(json.loads(lr.read_text())["views"], fdir / "loss_breakdown.png"))
    return figs


STAGE_FUNCS = {
    "synth": stage_synth,
    "align": stage_align,
    "match": stage_match,
    "ba": stage_ba,
    "refine-depth": stage_refine,
    "render": stage_render,
    "losses": stage_losses,
    "fuse": stage_fuse,
    "eval": stage_eval,
}
assert tuple(STAGE_FUNCS) == STAGES


def _scene_hashes(scene_dir: Path | None) -> dict:
    if scene_dir is None or not scene_dir.is_dir():
        return {}
    return {str(p.relative_to(scene_dir)): sha256(p) for p in sorted(scene_dir.rglob("*")) if p.is_file()}


def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(Path(path).resolve())


class Pipeline:
    """Runs stages in order, keeping ``manifest.json`` current after each one.

    The manifest holds hashes of inputs and outputs, the resolved config and
    library versions, and no timestamps; timings go to ``events.jsonl``.
    """

    def __init__(self, cfg: PipelineConfig, out, scene=None, gt=None):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        scene_dir = Path(scene) if scene is not None else (self.out / "scene" if (self.out / "scene").is_dir() else None)
        gt_dir = Path(gt) if gt is not None else self.out / "gt"
        self.ctx = RunContext(cfg, self.out, scene_dir, gt_dir)
        self.external_scene = scene is not None
        self.manifest_path = self.out / "manifest.json"

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            try:
                return json.loads(self.manifest_path.read_text())
            except json.JSONDecodeError:
                logger.warning("existing manifest is unreadable; starting a new one")
        return {"stages": {}}

    def _write_manifest(self, manifest: dict) -> None:
        manifest["tool"] = "gbr"
        manifest["versions"] = _versions()
        manifest["seed"] = self.cfg.pipeline.seed
        manifest["config"] = self.cfg.to_dict()
        scene = self.ctx.scene_dir
        manifest["scene"] = None if scene is None else _rel(scene, self.out)
        manifest["inputs"] = _scene_hashes(scene)
        write_json(self.manifest_path, manifest)

    def run(self, stages: list[str] | None = None) -> dict:
        stages = stages if stages is not None else self.cfg.pipeline.stage_list()
        unknown = [s for s in stages if s not in STAGE_FUNCS]
        if unknown:
            raise ConfigError(f"unknown stage(s): {', '.join(unknown)}")
        handler = JsonEventHandler(self.out / "events.jsonl")
        logger.addHandler(handler)
        (self.out / "config.ini").write_text(self.cfg.to_ini())
        manifest = self._load_manifest()
        try:
            with _thread_limit(self.cfg.pipeline.threads):
                for name in stages:
                    self._run_stage(name, manifest)
        finally:
            logger.removeHandler(handler)
        return manifest

    def _run_stage(self, name: str, manifest: dict) -> None:
        if name == "synth" and self.external_scene:
            logger.info("skipping synth: using the scene given with --scene", extra={"event": {"stage": name, "status": "skipped"}})
            manifest["stages"][name] = {"status": "skipped"}
            self._write_manifest(manifest)
            return
        logger.info("stage %s: start", name, extra={"event": {"stage": name, "status": "start"}})
        t0 = time.perf_counter()
        try:
            result = STAGE_FUNCS[name](self.ctx)
        except GBRError as exc:
            self._fail(name, manifest, exc)
            raise StageError(name, exc) from exc
        except np.linalg.LinAlgError as exc:
            err = NumericalError(str(exc))
            self._fail(name, manifest, err)
            raise StageError(name, err) from exc
        except OSError as exc:
            err = LoadError(str(exc))
            self._fail(name, manifest, err)
            raise StageError(name, err) from exc
        dt = time.perf_counter() - t0
        outputs = {_rel(p, self.out): sha256(Path(p)) for p in result["outputs"]}
        manifest["stages"][name] = {"status": "ok", "outputs": dict(sorted(outputs.items())), "summary": result.get("summary", {})}
        self._write_manifest(manifest)
        logger.info(
            "stage %s: done in %.1f s", name, dt,
            extra={"event": {"stage": name, "status": "ok", "seconds": dt, "summary": _clean(json.loads(json.dumps(result.get("summary", {}), default=_json_default)))}},
        )

    def _fail(self, name: str, manifest: dict, exc: GBRError) -> None:
        manifest["stages"][name] = {"status": "failed", "error": str(exc), "error_type": type(exc).__name__, "hint": exc.hint}
        self._write_manifest(manifest)
        logger.error("stage %s failed: %s", name, exc, extra={"event": {"stage": name, "status": "failed", "error": str(exc)}})


@contextlib.contextmanager
def _thread_limit(threads: int):
    if not threads:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(threads)):
        yield


def run_pipeline(cfg: PipelineConfig, out, scene=None, stages=None, gt=None) -> dict:
    return Pipeline(cfg, out, scene, gt).run(stages)
