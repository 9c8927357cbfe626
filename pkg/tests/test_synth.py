import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vascreg.geometry import BIFURCATION, ENDPOINT, arc_length, decompose_branches
from vascreg.synth import (CaseData, DataConfig, MultiFrameSample, TreeConfig, assemble_samples,
                           camera_orbit, case_rng, deform_sequence, frame_poses, generate_tree,
                           load_case, load_manifest, load_samples, ObservationNoise,
                           render_dataset,
                           simulate_case, smooth_branch)

SMALL = DataConfig(n_cases=3, frames_per_case=8, n_test_cases=1)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
@settings(max_examples=20)
def test_tree_segment_count(seed, depth):
    tree = generate_tree(TreeConfig(depth=depth), seed)
    branches, bif = decompose_branches(tree)
    assert len(branches) == 2 ** depth - 1
    assert len(bif) == 2 ** (depth - 1) - 1
    assert abs(tree.nodes.mean(axis=0)).max() < 1e-9


def test_tree_branch_roles():
    branches, _ = decompose_branches(generate_tree(TreeConfig(), 7))
    assert branches[0].roles[0] == ENDPOINT and branches[0].roles[-1] == BIFURCATION
    assert sum(b.roles[-1] == ENDPOINT for b in branches) == 4


def test_tree_is_seed_deterministic():
    a, b = generate_tree(TreeConfig(), 3), generate_tree(TreeConfig(), 3)
    np.testing.assert_array_equal(a.nodes, b.nodes)
    assert not np.array_equal(a.nodes, generate_tree(TreeConfig(), 4).nodes)


def test_zero_magnitude_is_identity():
    tree = generate_tree(TreeConfig(), 0)
    for fr in deform_sequence(tree, 5, 0.0, 1, local_fraction=0.3):
        np.testing.assert_array_equal(fr.nodes, tree.nodes)


@given(st.floats(0.0, 10.0), st.floats(0.0, 0.5))
@settings(max_examples=20)
def test_deformation_is_bounded(mag, local):
    tree = generate_tree(TreeConfig(), 2)
    for fr in deform_sequence(tree, 6, mag, 9, local_fraction=local):
        d = np.linalg.norm(fr.nodes - tree.nodes, axis=1)
        assert d.max() <= (1 + local) * mag + 1e-9


def test_deformation_is_temporally_smooth():
    tree = generate_tree(TreeConfig(), 2)
    frames = deform_sequence(tree, 16, 5.0, 3, local_fraction=0.3)
    steps = [np.abs(b.nodes - a.nodes).max() for a, b in zip(frames, frames[1:])]
    assert max(steps) < 0.2 * 5.0 * 1.3


def test_camera_orbit_looks_at_origin(rng):
    cfg = DataConfig()
    for cam in camera_orbit(cfg, 4, rng):
        np.testing.assert_allclose(cam.project([[0, 0, 0]])[0], [cfg.principal] * 2, atol=1e-9)
        assert abs(np.linalg.norm(-cam.R.T @ cam.t) - cfg.source_distance) < 1e-9


def test_case_rng_streams_are_independent():
    a = case_rng(0, 1).normal(size=4)
    assert np.array_equal(a, case_rng(0, 1).normal(size=4))
    assert not np.array_equal(a, case_rng(0, 2).normal(size=4))


def test_smooth_branch_interpolates_nodes():
    b = decompose_branches(generate_tree(TreeConfig(), 1))[0][0]
    s = smooth_branch(b, b.points, 0.25)
    np.testing.assert_allclose(s.points[[0, -1]], b.points[[0, -1]], atol=1e-12)
    assert s.roles[0] == b.roles[0] and s.roles[-1] == b.roles[-1]
    assert arc_length(s) >= arc_length(b) - 1e-9


def test_case_json_roundtrip():
    case = simulate_case(SMALL, 1, 0)
    back = CaseData.from_json(json.loads(json.dumps(case.to_json())))
    np.testing.assert_array_equal(back.tree.nodes, case.tree.nodes)
    assert back.occlusion == case.occlusion
    np.testing.assert_array_equal(back.deformed[3], case.deformed[3])


def test_samples_have_windows_and_normalisation():
    cfg = DataConfig(n_cases=1, frames_per_case=8, oracle_pose=True)
    case = simulate_case(cfg, 0, 0)
    samples = assemble_samples(case, cfg)
    n_branches = len(decompose_branches(case.tree)[0])
    assert len(samples) == n_branches * 2
    s = samples[0]
    assert s.F == cfg.window and s.P == cfg.points
    proj = s.stacked("proj3d")
    assert abs(np.abs(s.normalize(proj)).max() - 1.0) < 1e-12
    np.testing.assert_allclose(s.denormalize(s.normalize(proj)), proj)


def test_oracle_pose_with_no_motion_gives_exact_projection():
    cfg = DataConfig(n_cases=1, frames_per_case=4, magnitude=0.0, oracle_pose=True)
    for s in assemble_samples(simulate_case(cfg, 0, 0), cfg):
        np.testing.assert_allclose(s.stacked("proj3d"), s.stacked("label2d"), atol=1e-9)


def test_estimated_poses_close_to_truth():
    cfg = DataConfig(n_cases=1, frames_per_case=4)
    case = simulate_case(cfg, 0, 0)
    # the rest-pose tree cannot match a deformed frame exactly; the residual
    # should be of the order of the deformation, not of a wrong pose
    for f, (est, true) in enumerate(zip(frame_poses(case, cfg), case.cams)):
        diff = est.project(case.tree.nodes) - true.project(case.deformed[f])
        assert np.sqrt(np.mean(np.sum(diff ** 2, axis=1))) < 2 * cfg.magnitude


def test_occluded_points_carry_corruption():
    cfg = DataConfig(n_cases=1, frames_per_case=16, occlusion_start=1.0, oracle_pose=True)
    samples = assemble_samples(simulate_case(cfg, 0, 0), cfg)
    occ, clean = [], []
    for s in samples:
        for fr in s.frames:
            err = np.linalg.norm(fr.obs2d - fr.label2d.points, axis=1)
            occ.extend(err[fr.occluded])
            clean.extend(err[~fr.occluded])
    assert occ and np.mean(occ) > 5 * np.mean(clean)


def test_sample_json_roundtrip():
    cfg = DataConfig(n_cases=1, frames_per_case=4, oracle_pose=True)
    s = assemble_samples(simulate_case(cfg, 0, 0), cfg)[2]
    back = MultiFrameSample.from_json(json.loads(json.dumps(s.to_json())))
    np.testing.assert_array_equal(back.stacked("obs2d"), s.stacked("obs2d"))
    assert back.scale == s.scale and back.window == s.window
    assert [len(x.frames) for x in s.single_frames()] == [1] * cfg.window


def test_render_dataset_layout_and_determinism(tmp_path):
    m1 = render_dataset(SMALL, None, 5, tmp_path / "a")
    m2 = render_dataset(SMALL, None, 5, tmp_path / "b")
    assert m1["content_sha256"] == m2["content_sha256"]
    assert m1["counts"]["single_frame"] == m1["counts"]["multi_frame"] * SMALL.window
    assert m1["split"]["test"] == [2]
    assert load_manifest(tmp_path / "a") == m1
    multi = load_samples(tmp_path / "a", "multi", [2])
    assert multi and all(s.case_id == 2 for s in multi)
    assert len(load_samples(tmp_path / "a", "single")) == m1["counts"]["single_frame"]
    assert load_case(tmp_path / "a", 1).case_id == 1
    m3 = render_dataset(SMALL, None, 6, tmp_path / "c")
    assert m3["content_sha256"] != m1["content_sha256"]


def test_config_validation():
    with pytest.raises(ValueError):
        DataConfig(frames_per_case=2, window=4)
    with pytest.raises(ValueError):
        DataConfig(magnitude=-1.0)


def test_observation_noise_masks_are_contiguous_and_persistent(rng):
    model = ObservationNoise()
    masks = model.occlusion_masks(4000, 4, 32, rng)
    for m in masks.reshape(-1, 32)[:2000]:
        on = np.flatnonzero(m)
        if on.size:
            assert np.all(np.diff(on) == 1)
            assert 8 <= on.size <= 13
    rate = masks.any(axis=2).mean()
    assert abs(rate - 1 / 3) < 0.02           # stationary rate of the on/off chain
    both = masks[:, 1:].any(axis=2) & masks[:, :-1].any(axis=2)
    same = (masks[:, 1:] == masks[:, :-1]).all(axis=2)
    assert np.all(same[both])


def test_observation_noise_scales_with_occlusion(rng):
    model = ObservationNoise(noise=0.5, occlusion_noise=4.0)
    label = np.zeros((3000, 2, 16, 2))
    scale = np.full(3000, 2.0)
    obs, occ = model.corrupt(label, scale, rng)
    resid = obs * 2.0
    assert abs(resid[~occ].std() - 0.5) < 0.02
    assert abs(resid[occ].std() - 4.0) < 0.2
