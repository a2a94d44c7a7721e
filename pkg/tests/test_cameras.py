import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagedik.cameras import (
    Camera, CameraRig, DegenerateConsensusError, InsufficientViewsError, UndefinedMetricError,
    gc_at_threshold, project, robust_triangulate,
)
from stagedik.frames import MultiviewFrame
from stagedik.synth import ring_rig


def cam0():
    return Camera("c0", 1000.0, 1000.0, 500.0, 500.0, np.eye(3), np.zeros(3), 1000, 1000)


def test_project_examples():
    uv, z, ok = project(cam0(), (0, 0, 2))
    assert np.allclose(uv, [500, 500]) and z == 2 and ok
    uv, _, _ = project(cam0(), (0.1, 0, 2))
    assert np.allclose(uv, [550, 500])
    assert not project(cam0(), (0, 0, -1))[2]


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera("c", 0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        Camera("c", 1.0, 1.0, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        CameraRig((cam0(), cam0()))
    with pytest.raises(ValueError):
        CameraRig(())


def test_projection_jacobian_fd(rng):
    cam = ring_rig(1, 3.0, 1.5, (0, 0, 1)).cameras[0]
    X = rng.normal(scale=0.3, size=(5, 3)) + np.array([0, 0, 1.0])
    D = cam.projection_jacobian(X)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (cam.project_points(X + e)[0] - cam.project_points(X - e)[0]) / (2 * h)
        assert np.allclose(D[:, :, k], fd, rtol=1e-6, atol=1e-4)


def _obs(rig, X, conf=1.0):
    return {c.id: (c.project_points(X)[0][0], conf) for c in rig.cameras}


def test_triangulate_noiseless_four():
    rig = ring_rig(4, 3.0, 1.6, (0, 0, 1))
    X = np.array([0.1, -0.2, 1.1])
    tri = robust_triangulate(rig, _obs(rig, X, 0.8))
    assert np.linalg.norm(tri.point - X) < 1e-9
    assert all(np.isclose(w, 0.8, rtol=1e-9) for w in tri.weights.values())


def test_triangulate_two_views():
    rig = ring_rig(2, 3.0, 1.6, (0, 0, 1))
    X = np.array([0.05, 0.1, 0.9])
    assert np.linalg.norm(robust_triangulate(rig, _obs(rig, X)).point - X) < 1e-9


def test_triangulate_outlier_downweighted():
    rig = ring_rig(8, 3.0, 1.6, (0, 0, 1))
    X = np.array([0.1, 0.0, 1.2])
    obs = _obs(rig, X)
    uv, c = obs["cam5"]
    obs["cam5"] = (uv + 80.0 * np.array([0.6, 0.8]), c)
    tri = robust_triangulate(rig, obs, sigma=10.0)
    assert tri.weights["cam5"] < 1e-3
    assert np.linalg.norm(tri.point - X) < 1e-6


def test_triangulate_errors():
    rig = ring_rig(3, 3.0, 1.6, (0, 0, 1))
    X = np.array([0.0, 0.0, 1.0])
    obs = _obs(rig, X)
    with pytest.raises(InsufficientViewsError):
        robust_triangulate(rig, {"cam0": obs["cam0"], "cam1": (obs["cam1"][0], 0.0)})
    far = {c: (uv + 1000.0 * (i + 1), 1.0) for i, (c, (uv, _)) in enumerate(obs.items())}
    with pytest.raises(DegenerateConsensusError):
        robust_triangulate(rig, far, sigma=1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_project_triangulate_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    cams = []
    for i in range(n):
        d = rng.normal(size=3)
        pos = 3.0 * d / np.linalg.norm(d)
        cams.append(Camera.look_at(f"c{i}", pos, rng.normal(scale=0.1, size=3),
                                   up=(0.0, 0.0, 1.0) if abs(d[2]) < 0.9 * np.linalg.norm(d) else (1.0, 0.0, 0.0)))
    rig = CameraRig(tuple(cams))
    X = rng.normal(scale=0.3, size=3)
    pos = np.array([c.center for c in cams])
    if n == 2 and np.linalg.norm(np.cross(pos[0] - X, pos[1] - X)) < 1e-2:
        return  # nearly collinear baseline
    tri = robust_triangulate(rig, _obs(rig, X))
    assert np.linalg.norm(tri.point - X) < 1e-8


def test_weight_monotone_in_error():
    rig = ring_rig(6, 3.0, 1.6, (0, 0, 1))
    X = np.array([0.0, 0.1, 1.0])
    ws = []
    for d in (0.0, 5.0, 15.0, 40.0, 100.0):
        obs = _obs(rig, X)
        uv, c = obs["cam2"]
        obs["cam2"] = (uv + np.array([d, 0.0]), c)
        ws.append(robust_triangulate(rig, obs).weights["cam2"])
    assert all(b <= a for a, b in zip(ws, ws[1:]))


def _frame(rig, pts, shifts):
    det, i = {}, 0
    for c in rig.cameras:
        det[c.id] = {}
        for s, X in pts.items():
            det[c.id][s] = c.project_points(X)[0][0] + np.array([shifts[i % len(shifts)], 0.0])
            i += 1
    return MultiviewFrame(det)


def test_gc_examples():
    rig = ring_rig(4, 3.0, 1.6, (0, 0, 1))
    pts = {"a": np.array([0, 0, 1.0]), "b": np.array([0.1, 0, 1.0])}
    assert gc_at_threshold(rig, pts, _frame(rig, pts, [0.0])) == 1.0
    assert gc_at_threshold(rig, pts, _frame(rig, pts, [10.0])) == 0.0
    assert gc_at_threshold(rig, pts, _frame(rig, pts, [5.0, 15.0])) == 0.5
    with pytest.raises(ValueError):
        gc_at_threshold(rig, pts, _frame(rig, pts, [0.0]), 0.0)
    empty = MultiviewFrame({"cam0": {"a": (1.0, 1.0)}}, {"cam0": {"a": 0.0}})
    with pytest.raises(UndefinedMetricError):
        gc_at_threshold(rig, pts, empty)


@given(st.floats(0.1, 30), st.floats(0.1, 30))
def test_gc_monotone_in_threshold(t1, t2):
    rig = ring_rig(4, 3.0, 1.6, (0, 0, 1))
    pts = {"a": np.array([0, 0, 1.0]), "b": np.array([0.1, 0, 1.0])}
    fr = _frame(rig, pts, [0.0, 3.0, 8.0, 12.0, 25.0])
    lo, hi = sorted((t1, t2))
    assert gc_at_threshold(rig, pts, fr, lo) <= gc_at_threshold(rig, pts, fr, hi)


def test_behind_camera_counts_as_failure():
    rig = CameraRig((cam0(),))
    fr = MultiviewFrame({"c0": {"a": (500.0, 500.0)}})
    assert gc_at_threshold(rig, {"a": np.array([0, 0, -2.0])}, fr) == 0.0
