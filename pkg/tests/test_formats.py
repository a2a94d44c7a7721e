import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from stagedik.fixtures import random_skeleton, two_hand_skeleton
from stagedik.formats import (
    FormatError, load_config, load_correspondences, load_detections, load_markers, load_poses,
    load_regions, load_rig, load_skeleton, save_config, save_correspondences, save_detections,
    save_markers, save_poses, save_regions, save_rig, save_skeleton,
)
from stagedik.frames import MarkerFrame, MultiviewFrame
from stagedik.mapping import Correspondence, CorrespondenceTable
from stagedik.metrics import AlignmentRegion
from stagedik.skeleton import PoseState
from stagedik.solver import default_monocular_config, default_multiview_config
from stagedik.synth import ring_rig

SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
names = st.text("abcdefgXYZ_0123456789", min_size=1, max_size=8)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
nonneg = st.floats(0.0, 1e6, allow_nan=False)


def _same_skeleton(a, b):
    assert a.name == b.name
    assert a.bodies == b.bodies
    assert a.sites == b.sites
    assert a.scale_groups == b.scale_groups
    assert a.core_sites == b.core_sites


@pytest.mark.parametrize("make", [two_hand_skeleton,
                                  lambda: random_skeleton(np.random.default_rng(4), 9, tree=True)])
def test_skeleton_round_trip(tmp_path, make):
    skel = make()
    save_skeleton(tmp_path / "s.json", skel)
    _same_skeleton(load_skeleton(tmp_path / "s.json"), skel)


@SETTINGS
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_poses_round_trip(tmp_path, seed, n):
    skel = random_skeleton(np.random.default_rng(seed), 6)
    rng = np.random.default_rng(seed + 1)
    poses = []
    for _ in range(n):
        off = np.zeros((skel.n_sites, 3))
        off[rng.integers(skel.n_sites)] = rng.normal(size=3)
        poses.append(PoseState(rng.normal(size=skel.nq), rng.uniform(0.5, 2, skel.n_groups), off))
    ids = [f"f{i}" for i in range(n)]
    save_poses(tmp_path / "p.csv", skel, poses, ids)
    got_ids, got = load_poses(tmp_path / "p.csv", skel)
    assert got_ids == ids
    for a, b in zip(got, poses):
        assert np.array_equal(a.vector(), b.vector())


frame_ids = st.lists(names, min_size=1, max_size=3, unique=True)


@SETTINGS
@given(frame_ids, st.lists(names, min_size=1, max_size=4, unique=True), st.data())
def test_markers_round_trip(tmp_path, fids, sites, data):
    frames = [MarkerFrame({s: data.draw(st.lists(finite, min_size=3, max_size=3)) for s in sites},
                          {s: data.draw(nonneg) for s in sites}, f) for f in fids]
    save_markers(tmp_path / "m.csv", frames)
    got = load_markers(tmp_path / "m.csv")
    assert [f.frame_id for f in got] == fids
    for a, b in zip(got, frames):
        assert a.confidences == b.confidences
        assert all(np.array_equal(a.targets[s], b.targets[s]) for s in sites)


@SETTINGS
@given(frame_ids, st.lists(names, min_size=1, max_size=3, unique=True),
       st.lists(names, min_size=1, max_size=3, unique=True), st.data())
def test_detections_round_trip(tmp_path, fids, cams, sites, data):
    frames = []
    for f in fids:
        det = {c: {s: data.draw(st.lists(finite, min_size=2, max_size=2)) for s in sites} for c in cams}
        conf = {c: {s: data.draw(nonneg) for s in sites} for c in cams}
        frames.append(MultiviewFrame(det, conf, f))
    save_detections(tmp_path / "d.csv", frames)
    got = load_detections(tmp_path / "d.csv")
    assert [f.frame_id for f in got] == fids
    for a, b in zip(got, frames):
        assert a.confidences == b.confidences
        for c in cams:
            assert all(np.array_equal(a.detections[c][s], b.detections[c][s]) for s in sites)


@SETTINGS
@given(st.lists(st.tuples(names, names, st.sampled_from(["vertex", "regressedKeypoint"]), nonneg),
                min_size=1, max_size=6, unique_by=(lambda e: e[0], lambda e: e[1])))
def test_correspondences_round_trip(tmp_path, rows):
    table = CorrespondenceTable([Correspondence(*r) for r in rows])
    save_correspondences(tmp_path / "c.csv", table)
    assert load_correspondences(tmp_path / "c.csv").entries == table.entries


def test_rig_round_trip(tmp_path):
    rig = ring_rig(5, 2.5, 1.4, (0.1, 0.0, 1.0), focal=1234.5, image_size=(1280, 720))
    save_rig(tmp_path / "r.json", rig)
    got = load_rig(tmp_path / "r.json")
    assert (got.units, got.source) == (rig.units, rig.source)
    for a, b in zip(got.cameras, rig.cameras):
        assert (a.id, a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.id, b.fx, b.fy, b.cx, b.cy, b.width, b.height)
        assert np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)


def test_config_round_trip(tmp_path):
    skel = two_hand_skeleton()
    for cfg in (default_monocular_config(skel), default_multiview_config(skel)):
        save_config(tmp_path / "c.json", cfg)
        assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_regions_round_trip(tmp_path):
    regions = [AlignmentRegion("a", ("x", "y", "z"), column="pa"),
               AlignmentRegion("b", ("x", "y", "z", "w"), report_sites=("w",))]
    save_regions(tmp_path / "g.json", regions, {"ang": ["j1", "j2"]})
    assert load_regions(tmp_path / "g.json") == (regions, {"ang": ["j1", "j2"]})


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_errors_name_file_and_line(tmp_path):
    p = _write(tmp_path, "m.csv", "frame,site,x_m,y_m,z_m,confidence\n0,a,1,2,3,1\n0,b,1,oops,3,1\n")
    with pytest.raises(FormatError, match=r"m\.csv:3:.*y_m"):
        load_markers(p)
    p = _write(tmp_path, "m2.csv", "# note\nframe,site,x_m,y_m,z_m,confidence\n0,a,1,2,3\n")
    with pytest.raises(FormatError, match=r"m2\.csv:3:"):
        load_markers(p)
    p = _write(tmp_path, "m3.csv", "frame,site,x_m,y_m,z_m,confidence\n0,a,1,2,3,-1\n")
    with pytest.raises(FormatError, match=r"m3\.csv:2:"):
        load_markers(p)
    p = _write(tmp_path, "m4.csv", "frame,site,x_m,y_m,z_m,confidence\n0,a,1,2,3,1\n0,a,1,2,3,1\n")
    with pytest.raises(FormatError, match=r"m4\.csv:3:.*repeated"):
        load_markers(p)
    p = _write(tmp_path, "d.csv", "frame,camera,site,u_px,v_px\n")
    with pytest.raises(FormatError, match=r"d\.csv:1: missing columns"):
        load_detections(p)
    with pytest.raises(FormatError, match="empty"):
        load_markers(_write(tmp_path, "e.csv", ""))


def test_json_errors_name_file(tmp_path):
    with pytest.raises(FormatError, match=r"s\.json:2"):
        load_skeleton(_write(tmp_path, "s.json", "{\n  bad\n}"))
    with pytest.raises(FormatError, match=r"s2\.json"):
        load_skeleton(_write(tmp_path, "s2.json", '{"bodies": []}'))
    with pytest.raises(FormatError, match=r"r\.json"):
        load_rig(_write(tmp_path, "r.json", '{"cameras": [{"id": "c"}]}'))


def test_pose_unknown_column(tmp_path):
    skel = random_skeleton(np.random.default_rng(1), 3)
    save_poses(tmp_path / "p.csv", skel, [skel.zero_pose()], ["0"])
    text = (tmp_path / "p.csv").read_text().splitlines()
    text[1] += ",bogus"
    text[2] += ",1.0"
    (tmp_path / "p.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(FormatError, match="bogus"):
        load_poses(tmp_path / "p.csv", skel)
