"""End-to-end acceptance checks, one test per criterion.

Each test records a short measurement with ``record_property("detail", ...)``
before asserting; the terminal summary prints one PASS/FAIL line per criterion.
"""

import csv
import hashlib
import json
import statistics
import time
from importlib import resources

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from stagedik import formats as fmt
from stagedik.cameras import gc_at_threshold
from stagedik.cli import main
from stagedik.fixtures import hinge_coords, random_skeleton, two_hand_skeleton
from stagedik.frames import MarkerFrame
from stagedik.mapping import Correspondence, CorrespondenceTable, refine_sites_em
from stagedik.metrics import AlignmentRegion, pa_mpjpe
from stagedik.pipeline import preprocess_multiview, solve_monocular, solve_multiview
from stagedik.skeleton import PoseState, forward_kinematics, pose_jacobian
from stagedik.solver import default_monocular_config, default_multiview_config, run_staged
from stagedik.synth import SceneSpec, generate_scene, inject_outliers

from conftest import fd_jacobian, rel_err


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(ln for ln in f if not ln.startswith("#")))


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1)
def test_jacobian_matches_finite_differences(record_property):
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        skel = random_skeleton(rng, int(rng.integers(3, 21)), tree=bool(seed % 2))
        q = skel.zero_pose().q.copy()
        q[:3] = rng.normal(size=3)
        q[3:6] = rng.uniform(-1, 1, 3)
        lo, hi = np.nan_to_num(skel.lower[6:], neginf=-1.5), np.nan_to_num(skel.upper[6:], posinf=1.5)
        q[6:] = rng.uniform(np.maximum(lo, -1.5), np.minimum(hi, 1.5))
        pose = PoseState(q, rng.uniform(0.8, 1.2, skel.n_groups), np.zeros((skel.n_sites, 3)))
        J = pose_jacobian(skel, pose)
        F = fd_jacobian(skel, pose, range(skel.nq + skel.n_groups))
        worst = max(worst, rel_err(J, F))
        n += 1
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{n} skeletons, worst rel err {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-4
    assert elapsed < 30


# ---------------------------------------------------------------- 2

def _marker_pa(skel, pose, frame):
    got = forward_kinematics(skel, pose)
    region = AlignmentRegion("all", list(frame.targets))
    return pa_mpjpe(got, frame.targets, region)[0]


@pytest.mark.slow
@pytest.mark.criterion(2)
def test_noiseless_monocular_round_trip(tmp_path, record_property):
    t0 = time.perf_counter()
    fixtures = [(f"chain{1 + seed % 6}", seed) for seed in range(49)] + [("two_hand", 0)]
    worst_q, worst_pa = 0.0, 0.0
    for k, (name, seed) in enumerate(fixtures):
        d = tmp_path / f"s{k}"
        assert run("synth", "--fixture", name, "--frames", 1, "--seed", seed, "--no-multiview", "--out", d) == 0
        assert run("solve-mono", "--skeleton", d / "skeleton.json", "--markers", d / "markers.csv",
                   "--out", d / "solve") == 0
        skel = fmt.load_skeleton(d / "skeleton.json")
        assert k == len(fixtures) - 1 or skel.nq <= 12
        _, truth = fmt.load_poses(d / "truth_poses.csv", skel)
        _, got = fmt.load_poses(d / "solve" / "poses.csv", skel)
        frame = fmt.load_markers(d / "markers.csv")[0]
        worst_q = max(worst_q, float(np.max(np.abs(got[0].q[6:] - truth[0].q[6:]))))
        worst_pa = max(worst_pa, _marker_pa(skel, got[0], frame))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(fixtures)} scenes, max angle err {worst_q:.2e} rad, "
                              f"max PA {worst_pa:.2e} mm, {elapsed:.1f} s")
    assert two_hand_skeleton().nq >= 40
    assert worst_q < 1e-3
    assert worst_pa < 0.1
    assert elapsed < 120


# ---------------------------------------------------------------- 3

@pytest.fixture(scope="module")
def noisy_hand_solves():
    skel = two_hand_skeleton()
    sc = generate_scene(SceneSpec(skel, marker_sigma_mm=2.0, seed=3), 50, multiview=False)
    poses = [solve_monocular(skel, fr).final_pose for fr in sc.markers]
    return skel, sc, poses


def _hinge_mae(skel, truth, poses):
    idx = [skel.coord_names.index(c) for c in hinge_coords(skel)]
    return float(np.degrees(np.mean([np.abs(p.q[idx] - t.q[idx]) for p, t in zip(poses, truth)])))


@pytest.mark.slow
@pytest.mark.criterion(3)
def test_noisy_monocular_hinge_mae(noisy_hand_solves, record_property):
    skel, sc, poses = noisy_hand_solves
    mae = _hinge_mae(skel, sc.truth, poses)
    record_property("detail", f"hinge MAE {mae:.3f} deg over 50 frames at 2 mm noise (target < 3 deg)")
    assert mae < 3.0


PINNED_HINGE_MAE = 4.358154164437762  # first verified run of the scene above


@pytest.mark.slow
def test_noisy_monocular_regression_pin(noisy_hand_solves):
    skel, sc, poses = noisy_hand_solves
    assert _hinge_mae(skel, sc.truth, poses) == pytest.approx(PINNED_HINGE_MAE, abs=1e-3)


@pytest.mark.slow
def test_noisy_monocular_matches_information_bound(noisy_hand_solves):
    # With Gaussian marker noise the best unbiased estimator has covariance
    # sigma^2 (J^T J)^-1 at the truth; the solver should sit close to it.
    skel, sc, poses = noisy_hand_solves
    idx = [skel.coord_names.index(c) for c in hinge_coords(skel)]
    sigma = 0.002
    pred = []
    for t in sc.truth:
        J = pose_jacobian(skel, t, mask=np.arange(skel.nq + skel.n_groups) < skel.nq)
        cov = sigma ** 2 * np.linalg.pinv(J.T @ J)
        pred.append(np.sqrt(2 / np.pi) * np.sqrt(np.diag(cov)[idx]))
    bound = float(np.degrees(np.mean(pred)))
    mae = _hinge_mae(skel, sc.truth, poses)
    assert mae == pytest.approx(bound, rel=0.15)


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4)
def test_multiview_round_trip_and_outlier(record_property):
    skel = two_hand_skeleton()
    sc = generate_scene(SceneSpec(skel, seed=4), 1)
    fr, truth = sc.multiview[0], sc.truth[0]
    clean = solve_multiview(skel, fr, sc.rig)
    q_err = float(np.max(np.abs(clean.report.final_pose.q[6:] - truth.q[6:])))

    bad = inject_outliers([fr], "cam3", 80.0, seed=1)[0]
    res = solve_multiview(skel, bad, sc.rig)
    w3 = res.prep.camera_weights["cam3"]
    others = [c for c in bad.cameras if c != "cam3"]
    gc7 = gc_at_threshold(sc.rig, forward_kinematics(skel, res.report.final_pose), bad.subset(others))
    record_property("detail", f"clean GC {100 * clean.gc10:.1f}%, angle err {q_err:.1e} rad; "
                              f"outlier cam weight {w3:.1e}, GC over 7 cams {100 * gc7:.1f}%")
    assert clean.gc10 == 1.0
    assert q_err < 1e-3
    assert w3 < 1e-3
    assert gc7 >= 0.99


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5)
def test_stage_semantics(record_property):
    skel = random_skeleton(np.random.default_rng(5), 8, tree=True)
    sc = generate_scene(SceneSpec(skel, seed=5, marker_sigma_mm=3.0, pixel_sigma=1.0, scale_range=0.1,
                                  site_displacements={skel.site_names[2]: (0.01, 0.0, 0.0)}), 1)
    rep = run_staged(skel, sc.markers[0], default_monocular_config(skel))
    start, s1, s2 = rep.initial_pose, rep.stage_poses[0], rep.stage_poses[1]
    assert np.array_equal(start.q[6:], s1.q[6:])
    assert not np.array_equal(start.q[:6], s1.q[:6])
    assert np.array_equal(s1.scales, s2.scales)
    assert not np.array_equal(s1.q[6:], s2.q[6:])

    mv = solve_multiview(skel, sc.multiview[0], sc.rig)
    before, after = mv.report.stage_poses[-2], mv.report.stage_poses[-1]
    assert np.array_equal(before.q, after.q)
    assert np.array_equal(before.scales, after.scales)
    assert not np.array_equal(before.offsets, after.offsets)
    record_property("detail", "stage 1 root only, stage 2 scales fixed, multiview final stage offsets only")


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6)
def test_config_constants(record_property):
    skel = two_hand_skeleton()
    mono = default_monocular_config(skel)
    assert sum(s.iterations for s in mono.stages) == 400
    assert all(s.damping == 3.0 for s in mono.stages)
    assert mono.stages[2].offset_reg == 20.0 and mono.stages[2].offsets
    assert not mono.stages[1].scales
    mv = default_multiview_config(skel)
    assert [s.iterations for s in mv.stages] == [150, 250, 100, 20]
    assert all(s.damping == 1.0 for s in mv.stages)
    last = mv.stages[-1]
    assert last.offset_reg == 1e4 and last.offsets and not last.scales and last.q == "none"
    assert mv.confidence_cutoff == 0.25

    sc = generate_scene(SceneSpec(skel, seed=6, low_confidence_rate=0.2), 1)
    fr = sc.multiview[0]
    low = sum(1 for _, _, _, c in fr.pairs() if 0 < c < 0.25)
    prep = preprocess_multiview(fr, sc.rig, mv.confidence_cutoff)
    assert low > 0 and prep.zeroed == low
    assert all(prep.gated.confidences[c][s] == 0 for c, s, _, w in fr.pairs() if 0 < w < 0.25)
    record_property("detail", f"mono 400 it @ 3.0, reg 20; multiview (150,250,100,20) @ 1.0, reg 1e4, "
                              f"cutoff 0.25 zeroed {prep.zeroed}")


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7)
def test_procrustes_invariance(record_property):
    rng = np.random.default_rng(7)
    ref = {f"s{i}": rng.normal(size=3) for i in range(12)}
    region = AlignmentRegion("all", list(ref))
    worst = 0.0
    for k in range(100):
        R = Rotation.random(random_state=k).as_matrix()
        s, t = rng.uniform(0.2, 5.0), rng.normal(scale=3.0, size=3)
        pred = {n: s * R @ v + t for n, v in ref.items()}
        worst = max(worst, pa_mpjpe(pred, ref, region)[0])
    record_property("detail", f"100 transforms, worst {worst:.1e} mm")
    assert worst < 1e-9


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8)
def test_em_descent_and_recovery(record_property):
    skel = random_skeleton(np.random.default_rng(21), 6)
    site = "b3_a"
    ids = {s: str(i) for i, s in enumerate(skel.site_names)}
    table = CorrespondenceTable([Correspondence(ids[s], s, "vertex" if s == site else "regressedKeypoint")
                                 for s in skel.site_names])

    def refine(noise):
        sc = generate_scene(SceneSpec(skel, seed=8, marker_sigma_mm=noise,
                                      site_displacements={site: (0.01, 0.0, 0.0)}), 6, multiview=False)
        frames = [MarkerFrame({ids[s]: y for s, y in f.targets.items()}, None, f.frame_id)
                  for f in sc.markers]
        return refine_sites_em(skel, frames, table, rounds=5)

    def descending(h):
        # differences below double-precision resolution of the starting objective are roundoff
        eps = 1e-12 * h[0]
        return all(b <= a + eps for a, b in zip(h, h[1:]))

    exact, noisy = refine(0.0), refine(1.0)
    k = skel.site_index[site]
    err = float(np.linalg.norm(np.asarray(exact.skeleton.sites[k].offset)
                               - (np.asarray(skel.sites[k].offset) + [0.01, 0, 0])))
    h, hn = exact.history, noisy.history
    record_property("detail", f"objective {h[0]:.2e} -> {h[-1]:.2e} over {len(h) - 1} rounds "
                              f"(1 mm noise: {hn[0]:.2e} -> {hn[-1]:.2e}), site error {err:.1e} m")
    assert len(h) == len(hn) == 6
    assert descending(h) and descending(hn)
    assert err < 1e-6


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9)
def test_cli_determinism(tmp_path, record_property):
    regions = resources.files("stagedik") / "data" / "two_hand_regions.json"
    hashes = {}
    for rep in ("a", "b"):
        root = tmp_path / rep
        s = root / "synth"
        assert run("synth", "--fixture", "tree5", "--frames", 2, "--seed", 9, "--marker-noise-mm", 1,
                   "--pixel-noise", 1, "--outlier-camera", "cam2", "--displace", "b2_a=0.01,0,0",
                   "--correspondences", "--out", s) == 0
        h = root / "hand"
        assert run("synth", "--fixture", "two_hand", "--frames", 2, "--seed", 9, "--marker-noise-mm", 2,
                   "--no-multiview", "--out", h) == 0
        cmds = {
            "solve-mono": ["--skeleton", s / "skeleton.json", "--markers", s / "markers.csv"],
            "solve-multiview": ["--skeleton", s / "skeleton.json", "--detections", s / "detections.csv",
                                "--rig", s / "rig.json"],
            "triangulate": ["--detections", s / "detections.csv", "--rig", s / "rig.json"],
            "map-refine": ["--skeleton", s / "skeleton.json", "--markers", s / "markers_external.csv",
                           "--correspondences", s / "correspondences.csv", "--rounds", 2],
        }
        for name, args in cmds.items():
            assert run(name, *args, "--seed", 9, "--out", root / name) == 0
        assert run("solve-mono", "--skeleton", h / "skeleton.json", "--markers", h / "markers.csv",
                   "--out", h / "solve") == 0
        assert run("evaluate", "--pred", h / "solve" / "poses.csv", "--ref", h / "truth_poses.csv",
                   "--skeleton", h / "skeleton.json", "--regions", regions, "--out", root / "evaluate") == 0
        hashes[rep] = {p.name: tree_hash(p) for p in sorted(root.iterdir())}
    record_property("detail", f"{len(hashes['a'])} output trees compared")
    assert hashes["a"] == hashes["b"]


# ---------------------------------------------------------------- 10

def _similarity_oracle(X, Y):
    """Independent fit: optimal rotation from scipy, then the least-squares scale."""
    mx, my = X.mean(0), Y.mean(0)
    R, _ = Rotation.align_vectors(Y - my, X - mx)
    A = R.apply(X - mx)
    s = np.sum(A * (Y - my)) / np.sum(A * A)
    return lambda P: s * R.apply(P - mx) + my


@pytest.mark.criterion(10)
def test_metric_cross_check(tmp_path, record_property):
    d = tmp_path / "hand"
    assert run("synth", "--fixture", "two_hand", "--frames", 10, "--seed", 10, "--no-multiview", "--out", d) == 0
    skel = fmt.load_skeleton(d / "skeleton.json")
    ids, truth = fmt.load_poses(d / "truth_poses.csv", skel)
    rng = np.random.default_rng(10)
    pred = [p.replace(q=p.q + np.concatenate([rng.normal(scale=0.02, size=6),
                                                rng.normal(scale=0.05, size=skel.nq - 6)]))
            for p in truth]
    fmt.save_poses(tmp_path / "pred.csv", skel, pred, ids)
    regions_path = resources.files("stagedik") / "data" / "two_hand_regions.json"
    out = tmp_path / "eval"
    assert run("evaluate", "--pred", tmp_path / "pred.csv", "--ref", d / "truth_poses.csv",
               "--skeleton", d / "skeleton.json", "--regions", regions_path, "--out", out) == 0
    rows = read_csv(out / "metrics.csv")

    spec = json.loads(regions_path.read_text())
    columns = {}
    for r in spec["regions"]:
        columns.setdefault(r.get("column", r["name"]), []).append(r)
    per_frame = {c: [] for c in list(columns) + list(spec["angle_sets"])}
    for p, t in zip(pred, truth):
        zp = forward_kinematics(skel, p.replace(offsets=np.zeros_like(p.offsets)))
        zt = forward_kinematics(skel, t.replace(offsets=np.zeros_like(t.offsets)))
        for col, regs in columns.items():
            vals = []
            for r in regs:
                fit = _similarity_oracle(np.array([zp[s] for s in r["sites"]]), np.array([zt[s] for s in r["sites"]]))
                rep = r.get("report_sites", r["sites"])
                errs = [1000 * np.linalg.norm(fit(zp[s]) - zt[s]) for s in rep]
                vals.append(sum(errs) / len(errs))
            per_frame[col].append(sum(vals) / len(vals))
        for col, joints in spec["angle_sets"].items():
            diffs = [abs(p.q[skel.coord_names.index(j)] - t.q[skel.coord_names.index(j)]) * 180 / np.pi
                     for j in joints]
            per_frame[col].append(sum(diffs) / len(diffs))

    worst = 0.0
    mean_row, std_row = rows[-2], rows[-1]
    for col, vals in per_frame.items():
        for r, v in zip(rows[:-2], vals):
            worst = max(worst, abs(float(r[col]) - v))
        worst = max(worst, abs(float(mean_row[col]) - statistics.fmean(vals)))
        worst = max(worst, abs(float(std_row[col]) - statistics.pstdev(vals)))
    record_property("detail", f"{len(per_frame)} columns x 10 frames, worst abs diff {worst:.1e}")
    assert len(rows) == 12
    assert worst < 1e-9
