"""Text file formats: JSON for skeletons, rigs, configs and regions; CSV for per-frame data.

Floats are written with ``repr`` so every format round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .cameras import Camera, CameraRig
from .frames import MarkerFrame, MultiviewFrame
from .mapping import Correspondence, CorrespondenceTable
from .metrics import AlignmentRegion
from .skeleton import Body, Joint, JointKind, PoseState, ScaleGroup, Site, Skeleton
from .solver import SolveConfig

POSE_UNITS = "# units: translations and slides in m, rotations in rad (exponential map), scales unitless"
MARKER_HEADER = ["frame", "site", "x_m", "y_m", "z_m", "confidence"]
DETECTION_HEADER = ["frame", "camera", "site", "u_px", "v_px", "confidence"]
CORRESPONDENCE_HEADER = ["external_id", "kind", "site", "weight"]
RIG_CONVENTION = ("world-to-camera: x_cam = R @ x_world + t; right-handed; +z forward, +x right, "
                  "+y down; pixel origin at the top-left corner")


class FormatError(ValueError):
    """Malformed input file; the message names the file and, for CSV, the line."""


def fnum(x):
    return repr(float(x))


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _bad(path, what):
    return FormatError(f"{path}: {what}")


# ---------------------------------------------------------------- skeleton

def _lim(v):
    return None if v is None or not math.isfinite(v) else float(v)


def skeleton_to_dict(skel):
    return {
        "name": skel.name,
        "bodies": [{
            "name": b.name, "parent": b.parent, "translation": list(b.translation),
            "joint": {"kind": b.joint.kind.value,
                      "axis": None if b.joint.axis is None else list(b.joint.axis),
                      "lower": None if b.joint.lower is None else [_lim(v) for v in b.joint.lower],
                      "upper": None if b.joint.upper is None else [_lim(v) for v in b.joint.upper]},
        } for b in skel.bodies],
        "sites": [{"name": s.name, "body": s.body, "offset": list(s.offset)} for s in skel.sites],
        "scale_groups": [{"name": g.name, "bodies": list(g.bodies)} for g in skel.scale_groups],
        "core_sites": list(skel.core_sites),
    }


def _tup(v):
    return None if v is None else tuple(v)


def skeleton_from_dict(d, path="<skeleton>"):
    try:
        bodies = []
        for b in d["bodies"]:
            j = b["joint"]
            joint = Joint(JointKind(j["kind"]), _tup(j.get("axis")), _tup(j.get("lower")), _tup(j.get("upper")))
            bodies.append(Body(b["name"], b.get("parent"), tuple(b.get("translation", (0.0, 0.0, 0.0))), joint))
        sites = [Site(s["name"], s["body"], tuple(s["offset"])) for s in d["sites"]]
        groups = [ScaleGroup(g["name"], tuple(g["bodies"])) for g in d.get("scale_groups", [])]
        return Skeleton(tuple(bodies), tuple(sites), tuple(groups), tuple(d.get("core_sites", ())),
                        name=d.get("name", "skeleton"))
    except (KeyError, TypeError, ValueError) as exc:
        raise _bad(path, f"invalid skeleton definition: {exc}") from None


def save_skeleton(path, skel):
    write_atomic(path, dump_json(skeleton_to_dict(skel)))


def load_skeleton(path):
    return skeleton_from_dict(_read_json(path), path)


# ---------------------------------------------------------------- cameras

def rig_to_dict(rig):
    return {
        "units": rig.units, "source": rig.source, "convention": RIG_CONVENTION,
        "cameras": [{
            "id": c.id, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "R": np.asarray(c.R).tolist(), "t": np.asarray(c.t).tolist(),
            "width": c.width, "height": c.height,
        } for c in rig.cameras],
    }


def rig_from_dict(d, path="<rig>"):
    try:
        cams = tuple(Camera(c["id"], c["fx"], c["fy"], c["cx"], c["cy"], np.array(c["R"], float),
                            np.array(c["t"], float), int(c["width"]), int(c["height"]))
                     for c in d["cameras"])
        return CameraRig(cams, units=d.get("units", "m"), source=d.get("source", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise _bad(path, f"invalid camera rig: {exc}") from None


def save_rig(path, rig):
    write_atomic(path, dump_json(rig_to_dict(rig)))


def load_rig(path):
    return rig_from_dict(_read_json(path), path)


# ---------------------------------------------------------------- configs and regions

def save_config(path, config):
    write_atomic(path, dump_json(config.to_dict()))


def load_config(path):
    d = _read_json(path)
    try:
        return SolveConfig.from_dict(d)
    except (ValueError, AttributeError) as exc:
        raise _bad(path, f"invalid solver config: {exc}") from None


def regions_to_dict(regions, angle_sets=None):
    out = {"regions": []}
    for r in regions:
        e = {"name": r.name, "sites": list(r.sites)}
        if r.report_sites is not None:
            e["report_sites"] = list(r.report_sites)
        if r.column is not None:
            e["column"] = r.column
        out["regions"].append(e)
    out["angle_sets"] = {k: list(v) for k, v in (angle_sets or {}).items()}
    return out


def load_regions(path):
    """Returns ``(regions, angle_sets)``; ``angle_sets`` maps a column name to joint names."""
    d = _read_json(path)
    try:
        regions = [AlignmentRegion(r["name"], tuple(r["sites"]),
                                   _tup(r.get("report_sites")), r.get("column"))
                   for r in d["regions"]]
        angle_sets = {k: list(v) for k, v in d.get("angle_sets", {}).items()}
    except (KeyError, TypeError) as exc:
        raise _bad(path, f"invalid regions file: {exc}") from None
    return regions, angle_sets


def save_regions(path, regions, angle_sets=None):
    write_atomic(path, dump_json(regions_to_dict(regions, angle_sets)))


# ---------------------------------------------------------------- CSV helpers

def _csv_text(header, rows, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(comment + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _csv_rows(path, header):
    """Yield ``(line number, row dict)``, skipping ``#`` comment lines."""
    with open(path, newline="") as f:
        lines = [(i + 1, ln) for i, ln in enumerate(f) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise _bad(path, "file is empty")
    reader = csv.reader([ln for _, ln in lines])
    head = next(reader)
    missing = [h for h in header if h not in head]
    if missing:
        raise FormatError(f"{path}:{lines[0][0]}: missing columns {missing}")
    for (lineno, _), row in zip(lines[1:], reader):
        if len(row) != len(head):
            raise FormatError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
        yield lineno, head, dict(zip(head, row))


def _float(path, lineno, row, key):
    try:
        return float(row[key])
    except ValueError:
        raise FormatError(f"{path}:{lineno}: column {key!r} is not a number: {row[key]!r}") from None


# ---------------------------------------------------------------- poses

def pose_columns(skel, poses):
    off_sites = [s.name for i, s in enumerate(skel.sites) if any(p.offsets[i].any() for p in poses)]
    cols = list(skel.coord_names) + [f"scale:{g.name}" for g in skel.scale_groups]
    cols += [f"offset:{s}:{a}" for s in off_sites for a in "xyz"]
    return cols, off_sites


def poses_to_csv(skel, poses, frame_ids):
    cols, off_sites = pose_columns(skel, poses)
    idx = [skel.site_index[s] for s in off_sites]
    rows = []
    for fid, p in zip(frame_ids, poses):
        vals = list(p.q) + list(p.scales) + [v for k in idx for v in p.offsets[k]]
        rows.append([fid] + [fnum(v) for v in vals])
    return _csv_text(["frame"] + cols, rows, POSE_UNITS)


def save_poses(path, skel, poses, frame_ids):
    write_atomic(path, poses_to_csv(skel, poses, frame_ids))


def load_poses(path, skel):
    """Returns ``(frame ids, poses)``. Missing scale columns default to 1, offsets to 0."""
    ids, poses = [], []
    coord = {n: i for i, n in enumerate(skel.coord_names)}
    for lineno, head, row in _csv_rows(path, ["frame"] + list(skel.coord_names)):
        pose = PoseState.zeros(skel)
        q, sc, off = pose.q.copy(), pose.scales.copy(), pose.offsets.copy()
        for key in head[1:]:
            v = _float(path, lineno, row, key)
            if key in coord:
                q[coord[key]] = v
            elif key.startswith("scale:") and key[6:] in skel.group_index:
                sc[skel.group_index[key[6:]]] = v
            elif key.startswith("offset:"):
                _, site, axis = key.rsplit(":", 2) if key.count(":") >= 2 else (None, None, None)
                if site not in skel.site_index or axis not in ("x", "y", "z"):
                    raise FormatError(f"{path}:1: unknown offset column {key!r}")
                off[skel.site_index[site], "xyz".index(axis)] = v
            else:
                raise FormatError(f"{path}:1: unknown column {key!r}")
        ids.append(row["frame"])
        poses.append(PoseState(q, sc, off))
    if len(set(ids)) != len(ids):
        raise _bad(path, "duplicate frame ids")
    return ids, poses


# ---------------------------------------------------------------- markers and detections

def markers_to_csv(frames):
    rows = []
    for fr in frames:
        for s, y in fr.targets.items():
            rows.append([fr.frame_id, s, fnum(y[0]), fnum(y[1]), fnum(y[2]), fnum(fr.confidences[s])])
    return _csv_text(MARKER_HEADER, rows)


def save_markers(path, frames):
    write_atomic(path, markers_to_csv(frames))


def load_markers(path):
    """Marker frames in order of first appearance of each frame id."""
    data = {}
    for lineno, _, row in _csv_rows(path, MARKER_HEADER):
        fid, site = row["frame"], row["site"]
        xyz = [_float(path, lineno, row, k) for k in ("x_m", "y_m", "z_m")]
        c = _float(path, lineno, row, "confidence")
        if not all(math.isfinite(v) for v in xyz):
            raise FormatError(f"{path}:{lineno}: non-finite coordinate")
        if not math.isfinite(c) or c < 0:
            raise FormatError(f"{path}:{lineno}: confidence must be finite and >= 0")
        t, w = data.setdefault(fid, ({}, {}))
        if site in t:
            raise FormatError(f"{path}:{lineno}: site {site!r} repeated in frame {fid!r}")
        t[site] = np.array(xyz)
        w[site] = c
    return [MarkerFrame(t, w, fid) for fid, (t, w) in data.items()]


def detections_to_csv(frames):
    rows = []
    for fr in frames:
        for cam, det in fr.detections.items():
            for s, uv in det.items():
                rows.append([fr.frame_id, cam, s, fnum(uv[0]), fnum(uv[1]),
                             fnum(fr.confidences[cam][s])])
    return _csv_text(DETECTION_HEADER, rows)


def save_detections(path, frames):
    write_atomic(path, detections_to_csv(frames))


def load_detections(path):
    data = {}
    for lineno, _, row in _csv_rows(path, DETECTION_HEADER):
        fid, cam, site = row["frame"], row["camera"], row["site"]
        uv = [_float(path, lineno, row, "u_px"), _float(path, lineno, row, "v_px")]
        c = _float(path, lineno, row, "confidence")
        if not math.isfinite(c) or c < 0:
            raise FormatError(f"{path}:{lineno}: confidence must be finite and >= 0")
        det, conf = data.setdefault(fid, ({}, {}))
        if site in det.setdefault(cam, {}):
            raise FormatError(f"{path}:{lineno}: ({cam}, {site}) repeated in frame {fid!r}")
        det[cam][site] = np.array(uv)
        conf.setdefault(cam, {})[site] = c
    return [MultiviewFrame(d, c, fid) for fid, (d, c) in data.items()]


# ---------------------------------------------------------------- correspondences

def correspondences_to_csv(table):
    return _csv_text(CORRESPONDENCE_HEADER,
                     [[e.external_id, e.kind, e.site, fnum(e.weight)] for e in table])


def save_correspondences(path, table):
    write_atomic(path, correspondences_to_csv(table))


def load_correspondences(path):
    entries = []
    for lineno, _, row in _csv_rows(path, CORRESPONDENCE_HEADER):
        entries.append(Correspondence(row["external_id"], row["site"], row["kind"],
                                      _float(path, lineno, row, "weight")))
    try:
        return CorrespondenceTable(entries)
    except ValueError as exc:
        raise _bad(path, str(exc)) from None


def write_table(path, header, rows):
    """Generic CSV writer; floats are formatted with ``repr``."""
    text = _csv_text(header, [[fnum(v) if isinstance(v, (float, np.floating)) else v for v in r]
                              for r in rows])
    write_atomic(path, text)
