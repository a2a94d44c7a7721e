"""Command-line front end: ``stagedik <command> ...``.

Every command writes its outputs plus ``manifest.json`` into ``--out``. All
outputs except the manifest are byte-identical across runs with the same
inputs and seed.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import copy
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import formats as fmt
from .cameras import DegenerateConsensusError, InsufficientViewsError, UndefinedMetricError, gc_at_threshold, robust_triangulate
from .fixtures import make_fixture
from .frames import MarkerFrame
from .mapping import Correspondence, CorrespondenceTable, refine_sites_em
from .metrics import angle_coords, evaluate_frame, joint_angle_errors, mean_std, region_columns
from .pipeline import solve_monocular, solve_multiview
from .plotting import bar_chart
from .skeleton import forward_kinematics
from .solver import ConfigError, SolveConfig, default_monocular_config, default_multiview_config
from .synth import SceneSpec, generate_scene, inject_outliers

log = logging.getLogger("stagedik")

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(args, out, inputs, extra=None):
    man = {
        "command": args.command,
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in inputs.items() if v},
        "config_overrides": list(getattr(args, "set", None) or []),
        "output_dir": str(out),
        "seed": args.seed,
        "tool_version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    man.update(extra or {})
    fmt.write_atomic(out / "manifest.json", fmt.dump_json(man))


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d, overrides):
    """Apply ``key.path=value`` overrides to a config dict (list indices are integers)."""
    d = copy.deepcopy(d)
    for item in overrides or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = d
        try:
            for p in parts[:-1]:
                node = node[int(p)] if isinstance(node, list) else node[p]
            last = parts[-1]
            if isinstance(node, list):
                node[int(last)] = parse_value(value)
            else:
                if last not in node:
                    raise KeyError(last)
                node[last] = parse_value(value)
        except (KeyError, IndexError, ValueError):
            raise InputError(f"--set: unknown config key {key!r}") from None
    return d


def resolve_config(args, default_fn, skel):
    if args.config:
        base = json.loads(Path(args.config).read_text())
        fmt.load_config(args.config)  # validates and reports file-level errors
    else:
        base = default_fn(skel).to_dict()
    try:
        cfg = SolveConfig.from_dict(apply_overrides(base, args.set))
        cfg.validate(skel)
    except ConfigError as exc:
        raise InputError(f"invalid config: {exc}") from None
    return cfg


def check_sites(skel, names, label):
    unknown = sorted(set(names) - set(skel.site_index))
    if unknown:
        raise InputError(f"{label}: sites not in skeleton: {unknown}")


def run_frames(fn, items, jobs):
    """Map ``fn`` over ``items`` in order; yields ``(item, result or exception)``."""
    if jobs <= 1:
        for it in items:
            try:
                yield it, fn(it)
            except Exception as exc:  # noqa: BLE001 - reported per frame
                yield it, exc
        return
    with cf.ProcessPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(fn, it) for it in items]
        for it, fut in zip(items, futures):
            try:
                yield it, fut.result()
            except Exception as exc:  # noqa: BLE001
                yield it, exc


# ---------------------------------------------------------------- solve-mono / solve-multiview

def _mono_task(task):
    skel, frame, cfg = task
    rep = solve_monocular(skel, frame, copy.deepcopy(cfg))
    d = {"frame": frame.frame_id, **rep.to_dict(skel)}
    return rep.final_pose, rep.converged, rep.final_loss, rep.stages, d


def _mv_task(task):
    skel, frame, rig, cfg = task
    res = solve_multiview(skel, frame, rig, copy.deepcopy(cfg))
    d = {"frame": frame.frame_id, **res.report.to_dict(skel), "gc10_pct": 100.0 * res.gc10,
         "zeroed": res.prep.zeroed, "camera_weights": res.prep.camera_weights,
         "untriangulated": res.prep.untriangulated}
    return res.report.final_pose, res.report.converged, res.report.final_loss, res.report.stages, d


def _finish_solve(args, out, skel, frames, results, extra_cols, inputs, manifest_extra):
    poses, ids, rows, failures = [], [], [], []
    for fr, res in results:
        if isinstance(res, Exception):
            msg = f"frame {fr.frame_id}: {type(res).__name__}: {res}"
            log.error(msg)
            failures.append(msg)
            rows.append([fr.frame_id, "failed", "", ""] + [""] * len(extra_cols))
            if not args.continue_on_error:
                break
            continue
        pose, converged, loss, stages, d = res[:5]
        fmt.write_atomic(out / "frames" / f"{fr.frame_id}.json", fmt.dump_json(d))
        poses.append(pose)
        ids.append(fr.frame_id)
        iters = sum(len(s.iterations) for s in stages)
        rows.append([fr.frame_id, "converged" if converged else "not_converged", loss, iters]
                    + [d[c] for c in extra_cols])
    fmt.save_poses(out / "poses.csv", skel, poses, ids)
    fmt.write_table(out / "summary.csv", ["frame", "status", "final_loss", "iterations"] + extra_cols, rows)
    manifest_extra["failed_frames"] = failures
    write_manifest(args, out, inputs, manifest_extra)
    if failures:
        return EXIT_OK if args.continue_on_error else EXIT_FAILED
    return EXIT_OK


def cmd_solve_mono(args):
    out = Path(args.out)
    skel = fmt.load_skeleton(args.skeleton)
    frames = fmt.load_markers(args.markers)
    if not frames:
        raise InputError(f"{args.markers}: no frames")
    for fr in frames:
        check_sites(skel, fr.targets, f"{args.markers} frame {fr.frame_id}")
    cfg = resolve_config(args, default_monocular_config, skel)
    results = run_frames(_mono_task, [(skel, fr, cfg) for fr in frames], args.jobs)
    return _finish_solve(args, out, skel, frames, zip(frames, (r for _, r in results)), [],
                         {"skeleton": args.skeleton, "markers": args.markers, "config": args.config},
                         {"defaults_applied": args.config is None, "config": cfg.to_dict()})


def cmd_solve_multiview(args):
    out = Path(args.out)
    skel = fmt.load_skeleton(args.skeleton)
    rig = fmt.load_rig(args.rig)
    frames = fmt.load_detections(args.detections)
    if not frames:
        raise InputError(f"{args.detections}: no frames")
    for fr in frames:
        check_sites(skel, fr.sites, f"{args.detections} frame {fr.frame_id}")
        missing = [c for c in fr.cameras if c not in rig]
        if missing:
            raise InputError(f"{args.detections} frame {fr.frame_id}: cameras not in rig: {missing}")
        if len(fr.cameras) < 2:
            raise InputError(f"frame {fr.frame_id}: multiview solve needs at least two cameras")
    cfg = resolve_config(args, default_multiview_config, skel)
    results = list(run_frames(_mv_task, [(skel, fr, rig, cfg) for fr in frames], args.jobs))
    zeroed = {fr.frame_id: res[4]["zeroed"] for fr, (_, res) in zip(frames, results)
              if not isinstance(res, Exception)}
    code = _finish_solve(args, out, skel, frames, ((fr, res) for fr, (_, res) in zip(frames, results)),
                         ["gc10_pct"], {"skeleton": args.skeleton, "detections": args.detections,
                                    "rig": args.rig, "config": args.config},
                         {"defaults_applied": args.config is None, "config": cfg.to_dict(),
                          "confidence_cutoff": cfg.confidence_cutoff,
                          "zeroed_detections": zeroed,
                          "zeroed_total": int(sum(zeroed.values()))})
    log.info("zeroed %d low-confidence or out-of-image detections", sum(zeroed.values()))
    return code


# ---------------------------------------------------------------- triangulate

def cmd_triangulate(args):
    out = Path(args.out)
    rig = fmt.load_rig(args.rig)
    frames = fmt.load_detections(args.detections)
    if not frames:
        raise InputError(f"{args.detections}: no frames")
    pts, wrows, per_cam = [], [], {c: [] for c in rig.ids}
    skipped = []
    for fr in frames:
        for site in fr.sites:
            obs = fr.for_site(site)
            try:
                tri = robust_triangulate(rig, obs, sigma=args.sigma)
            except (InsufficientViewsError, DegenerateConsensusError) as exc:
                skipped.append(f"frame {fr.frame_id} site {site}: {exc}")
                continue
            pts.append([fr.frame_id, site, *[float(v) for v in tri.point], tri.iterations])
            for cam, (_, conf) in obs.items():
                if conf <= 0:
                    continue
                w = tri.weights[cam]
                wrows.append([fr.frame_id, site, cam, w, tri.errors[cam]])
                per_cam[cam].append(w / conf)
    fmt.write_table(out / "points.csv", ["frame", "site", "x_m", "y_m", "z_m", "iterations"], pts)
    fmt.write_table(out / "weights.csv", ["frame", "site", "camera", "weight", "error_px"], wrows)
    cam_rows = [[c, float(np.mean(v)) if v else float("nan"), len(v)] for c, v in per_cam.items()]
    fmt.write_table(out / "camera_weights.csv", ["camera", "mean_weight", "pairs"], cam_rows)
    write_manifest(args, out, {"detections": args.detections, "rig": args.rig},
                   {"kernel_sigma_px": args.sigma, "skipped": skipped})
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def evaluate_poses(skel, pred, ref, regions, angle_sets, rig=None, detections=None):
    """Per-frame metric rows; ``pred``/``ref``/``detections`` map frame id to objects.

    Site positions come from forward kinematics without per-frame offsets, so
    the metrics compare joint-centre placement. GC@10px uses the full pose.
    """
    pa_cols = region_columns(regions)
    if not angle_sets:
        angle_sets = {"angle_mae_deg": [skel.coord_names[i] for i in angle_coords(skel)]}
    ang_cols = list(angle_sets)
    gc = detections is not None
    header = ["frame"] + pa_cols + ang_cols + (["gc10_pct"] if gc else [])
    rows, dropped = [], {}
    for fid in pred:
        p, r = pred[fid], ref[fid]
        fp = forward_kinematics(skel, p.replace(offsets=np.zeros_like(p.offsets)))
        fr = forward_kinematics(skel, r.replace(offsets=np.zeros_like(r.offsets)))
        vals, drop = evaluate_frame(fp, fr, regions)
        if drop:
            dropped[fid] = drop
        row = [fid] + [vals.get(c, float("nan")) for c in pa_cols]
        for c in ang_cols:
            _, diff = joint_angle_errors(skel, p, r, angle_sets[c])
            row.append(float(diff.mean()))
        if gc:
            try:
                row.append(100.0 * gc_at_threshold(rig, forward_kinematics(skel, p), detections[fid], 10.0))
            except (UndefinedMetricError, KeyError):
                row.append(float("nan"))
        rows.append(row)
    return header, rows, dropped


def cmd_evaluate(args):
    out = Path(args.out)
    skel = fmt.load_skeleton(args.skeleton)
    pid, pposes = fmt.load_poses(args.pred, skel)
    rid, rposes = fmt.load_poses(args.ref, skel)
    regions, angle_sets = fmt.load_regions(args.regions)
    for r in regions:
        check_sites(skel, list(r.sites) + list(r.reported), f"{args.regions} region {r.name}")
    for name, joints in angle_sets.items():
        try:
            angle_coords(skel, joints)
        except ValueError as exc:
            raise InputError(f"{args.regions} angle set {name}: {exc}") from None
    pred, ref = dict(zip(pid, pposes)), dict(zip(rid, rposes))
    common = [f for f in pid if f in ref]
    mismatched = sorted(set(pid) ^ set(rid))
    if mismatched:
        log.warning("frame ids present in only one pose file are skipped: %s", mismatched)
    if not common:
        raise InputError("prediction and reference share no frame ids")
    rig = dets = None
    if args.detections:
        if not args.rig:
            raise InputError("--detections requires --rig")
        rig = fmt.load_rig(args.rig)
        dets = {fr.frame_id: fr for fr in fmt.load_detections(args.detections)}
    header, rows, dropped = evaluate_poses(skel, {f: pred[f] for f in common}, ref, regions,
                                           angle_sets, rig, dets)
    stats = [mean_std([r[j] for r in rows]) for j in range(1, len(header))]
    table = rows + [["mean"] + [m for m, _ in stats], ["std"] + [s for _, s in stats]]
    fmt.write_table(out / "metrics.csv", header, table)

    coords = [skel.coord_names[i] for i in angle_coords(
        skel, sorted({j for js in angle_sets.values() for j in js}) or None)]
    _, diff = joint_angle_errors(skel, [pred[f] for f in common], [ref[f] for f in common], coords)
    joint_rows = [[c, float(diff[:, k].mean()), float(diff[:, k].std(ddof=0))] for k, c in enumerate(coords)]
    fmt.write_table(out / "per_joint.csv", ["coordinate", "mae_deg", "std_deg"], joint_rows)

    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    n_pa = len(region_columns(regions))
    n_ang = len(header) - 1 - n_pa - (dets is not None)
    if n_pa:
        bar_chart(figs / "pa_mpjpe.svg", header[1:1 + n_pa], [s[0] for s in stats[:n_pa]],
                  [s[1] for s in stats[:n_pa]], ylabel="PA-MPJPE (mm)")
    ang = slice(n_pa, n_pa + n_ang)
    bar_chart(figs / "angle_mae.svg", header[1:][ang], [s[0] for s in stats[ang]],
              [s[1] for s in stats[ang]], ylabel="angle MAE (deg)")
    bar_chart(figs / "per_joint.svg", coords, [r[1] for r in joint_rows], [r[2] for r in joint_rows],
              ylabel="angle MAE (deg)")
    if dets is not None:
        bar_chart(figs / "gc10.svg", ["GC@10px"], [stats[-1][0]], [stats[-1][1]], ylabel="%")
    write_manifest(args, out, {"pred": args.pred, "ref": args.ref, "skeleton": args.skeleton,
                               "regions": args.regions, "detections": args.detections, "rig": args.rig},
                   {"frames": len(common), "skipped_frames": mismatched, "dropped_regions": dropped})
    return EXIT_OK


# ---------------------------------------------------------------- synth

def _parse_assign(items, label, conv):
    out = {}
    for it in items or []:
        if "=" not in it:
            raise InputError(f"{label} expects name=value, got {it!r}")
        k, v = it.split("=", 1)
        try:
            out[k] = conv(v)
        except ValueError:
            raise InputError(f"{label}: bad value {v!r}") from None
    return out


def _vec3(text):
    v = [float(x) for x in text.split(",")]
    if len(v) != 3:
        raise ValueError(text)
    return tuple(v)


def cmd_synth(args):
    out = Path(args.out)
    try:
        skel = make_fixture(args.fixture, args.seed)
    except KeyError as exc:
        raise InputError(str(exc)) from None
    displace = _parse_assign(args.displace, "--displace", _vec3)
    check_sites(skel, displace, "--displace")
    spec = SceneSpec(
        skel, range_fraction=args.range_fraction, scale_range=args.scale_range,
        marker_sigma_mm=args.marker_noise_mm, pixel_sigma=args.pixel_noise, dropout=args.dropout,
        camera_dropout=_parse_assign(args.camera_dropout, "--camera-dropout", float),
        low_confidence_rate=args.low_confidence_rate, n_cameras=args.cameras,
        static=args.static, site_displacements=displace, seed=args.seed)
    try:
        scene = generate_scene(spec, args.frames, multiview=not args.no_multiview)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    fmt.save_skeleton(out / "skeleton.json", skel)
    ids = [m.frame_id for m in scene.markers]
    fmt.save_poses(out / "truth_poses.csv", skel, scene.truth, ids)
    fmt.save_markers(out / "markers.csv", scene.markers)
    if scene.rig is not None:
        views = scene.multiview
        if args.outlier_camera:
            if args.outlier_camera not in scene.rig:
                raise InputError(f"--outlier-camera {args.outlier_camera!r} not in rig")
            views = inject_outliers(views, args.outlier_camera, args.outlier_px, seed=args.seed)
        fmt.save_rig(out / "rig.json", scene.rig)
        fmt.save_detections(out / "detections.csv", views)
    if args.correspondences:
        ext = {s: str(i) for i, s in enumerate(skel.site_names)}
        refine = set(displace) | set(args.refine_site or [])
        table = CorrespondenceTable([Correspondence(ext[s], s, "vertex" if s in refine else "regressedKeypoint")
                                     for s in skel.site_names])
        fmt.save_correspondences(out / "correspondences.csv", table)
        fmt.save_markers(out / "markers_external.csv",
                         [MarkerFrame({ext[s]: y for s, y in m.targets.items()},
                                      {ext[s]: c for s, c in m.confidences.items()}, m.frame_id)
                          for m in scene.markers])
    write_manifest(args, out, {}, {"fixture": args.fixture, "frames": args.frames,
                                   "scene": {k: v for k, v in vars(spec).items() if k != "skeleton"}})
    return EXIT_OK


# ---------------------------------------------------------------- map-refine

def cmd_map_refine(args):
    out = Path(args.out)
    skel = fmt.load_skeleton(args.skeleton)
    frames = fmt.load_markers(args.markers)
    table = fmt.load_correspondences(args.correspondences)
    if not frames:
        raise InputError(f"{args.markers}: no frames")
    try:
        table.check_sites(skel)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    res = refine_sites_em(skel, frames, table, rounds=args.rounds, tau=args.tau)
    fmt.save_skeleton(out / "skeleton.json", res.skeleton)
    fmt.save_correspondences(out / "correspondences.csv", res.table)
    fmt.write_table(out / "history.csv", ["round", "objective"],
                    [[i, v] for i, v in enumerate(res.history)])
    w = res.table.by_site()
    rows = [[e.site, e.kind, res.moved.get(e.site, 0.0), res.mean_residuals.get(e.site, float("nan")),
             w[e.site].weight] for e in table]
    fmt.write_table(out / "sites.csv", ["site", "kind", "moved_m", "mean_residual_m", "weight"], rows)
    write_manifest(args, out, {"skeleton": args.skeleton, "markers": args.markers,
                               "correspondences": args.correspondences},
                   {"rounds": args.rounds, "tau_m": args.tau, "unobserved_sites": res.unobserved})
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="stagedik", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, jobs=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        if config:
            sp.add_argument("--config", help="solver config JSON (defaults when omitted)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config entry, e.g. stages.0.iterations=50")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="frames solved in parallel")
            sp.add_argument("--continue-on-error", action="store_true",
                            help="keep going after a failed frame and exit 0")

    sp = sub.add_parser("solve-mono", help="fit poses to 3D marker frames")
    sp.add_argument("--skeleton", required=True)
    sp.add_argument("--markers", required=True)
    common(sp, config=True, jobs=True)
    sp.set_defaults(func=cmd_solve_mono)

    sp = sub.add_parser("solve-multiview", help="fit poses to multi-camera 2D detections")
    sp.add_argument("--skeleton", required=True)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--rig", required=True)
    common(sp, config=True, jobs=True)
    sp.set_defaults(func=cmd_solve_multiview)

    sp = sub.add_parser("triangulate", help="robustly triangulate detections")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--sigma", type=float, default=10.0, help="consensus kernel width (px)")
    common(sp)
    sp.set_defaults(func=cmd_triangulate)

    sp = sub.add_parser("evaluate", help="PA-MPJPE, joint-angle MAE and GC@10px reports")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--skeleton", required=True)
    sp.add_argument("--regions", required=True)
    sp.add_argument("--detections")
    sp.add_argument("--rig")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--fixture", default="two_hand", help="two_hand, chain<N> or tree<N>")
    sp.add_argument("--frames", type=int, default=10)
    sp.add_argument("--marker-noise-mm", type=float, default=0.0)
    sp.add_argument("--pixel-noise", type=float, default=0.0)
    sp.add_argument("--dropout", type=float, default=0.0)
    sp.add_argument("--camera-dropout", action="append", metavar="CAM=P")
    sp.add_argument("--low-confidence-rate", type=float, default=0.0)
    sp.add_argument("--cameras", type=int, default=8)
    sp.add_argument("--range-fraction", type=float, default=0.9)
    sp.add_argument("--scale-range", type=float, default=0.0)
    sp.add_argument("--static", action="store_true", help="same pose in every frame")
    sp.add_argument("--no-multiview", action="store_true")
    sp.add_argument("--outlier-camera")
    sp.add_argument("--outlier-px", type=float, default=80.0)
    sp.add_argument("--displace", action="append", metavar="SITE=DX,DY,DZ",
                    help="move a site in its body frame (m) when generating targets")
    sp.add_argument("--correspondences", action="store_true",
                    help="also write markers keyed by external ids and a correspondence table")
    sp.add_argument("--refine-site", action="append", metavar="SITE")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("map-refine", help="EM refinement of site positions")
    sp.add_argument("--skeleton", required=True)
    sp.add_argument("--markers", required=True, help="marker CSV keyed by external id")
    sp.add_argument("--correspondences", required=True)
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--tau", type=float, default=0.02, help="weight kernel width (m)")
    common(sp)
    sp.set_defaults(func=cmd_map_refine)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, fmt.FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
