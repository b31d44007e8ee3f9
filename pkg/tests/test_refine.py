"""
Unit tests for track building and windowed refinement
"""

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from camfit.core.errors import GeometryError, InputError, SceneError
from camfit.core.evaluation import align, ate
from camfit.core.geometry import DTYPE, PoseSE3, se3_exp
from camfit.core.refine import (
    TrackSet,
    WindowedRefiner,
    build_tracks,
    frame_matrices,
    interpolate_poses,
    keyframe_indices,
    refine_trajectory,
    reprojection_cost,
    smoothness_cost,
)
from camfit.core.synth import generate_scene
from camfit.models.schemas import RefineConfig

from .conftest import random_poses, scene_spec


def _tensors(seq):
    depths = torch.as_tensor(seq.depths, dtype=DTYPE)
    flows = torch.as_tensor(seq.flows_fwd, dtype=DTYPE)
    return depths, flows


def _scene_or_none(spec):
    try:
        return generate_scene(spec)
    except SceneError:
        return None


def _noisy(seq, seed: int) -> PoseSE3:
    """Ground truth with per-frame noise of 0.5 deg rotation and 1% of the step in translation"""
    rng = np.random.default_rng(seed)
    noisy = seq.poses_c2w.copy()
    for k in range(1, seq.frames):
        noisy[k, :3, :3] = noisy[k, :3, :3] @ Rotation.from_rotvec(rng.normal(scale=np.radians(0.5), size=3)).as_matrix()
        noisy[k, :3, 3] += rng.normal(scale=0.01 * seq.spec.translation_per_frame, size=3)
    return PoseSE3.from_matrix(torch.as_tensor(noisy, dtype=DTYPE))


def _single_track(sigma: float) -> TrackSet:
    """One track anchored at (8.5, 8.5) and seen one pixel to the right in the next frame"""
    return TrackSet(
        keyframes=[0, 1],
        anchors=torch.tensor([0]),
        frame_indices=torch.tensor([[0, 1]]),
        positions=torch.tensor([[[8.5, 8.5], [9.5, 8.5]]], dtype=DTYPE),
        sigmas=torch.tensor([[0.0, sigma]], dtype=DTYPE),
        valid=torch.tensor([[True, True]]),
        inv_depth=torch.tensor([0.5], dtype=DTYPE),
    )


class TestKeyframes:
    """Keyframe selection"""

    def test_stride(self):
        """Every stride-th frame plus the last one"""
        assert keyframe_indices(10, 3) == [0, 3, 6, 9]
        assert keyframe_indices(8, 3) == [0, 3, 6, 7]
        assert keyframe_indices(4, 1) == [0, 1, 2, 3]

    def test_too_short(self):
        """Refinement needs motion"""
        with pytest.raises(InputError):
            keyframe_indices(1, 1)


class TestTracks:
    """Flow chaining"""

    def test_zero_flow(self):
        """Tracks stay on their anchors and accumulate uncertainty step by step"""
        depths = torch.full((4, 16, 16), 2.0, dtype=DTYPE)
        flows = torch.zeros(3, 2, 16, 16, dtype=DTYPE)
        sigmas = torch.full((3, 16, 16), 0.01, dtype=DTYPE)
        tracks = build_tracks(flows, sigmas, depths, RefineConfig(grid=4, track_length=4, stride=1))
        first = tracks.subset(torch.nonzero(tracks.anchors == 0).reshape(-1))
        assert len(first) == 16
        assert torch.allclose(first.positions, first.positions[:, :1].expand_as(first.positions))
        assert torch.allclose(first.sigmas[0], torch.tensor([0.0, 0.01, 0.02, 0.03], dtype=DTYPE))
        assert torch.allclose(tracks.inv_depth, torch.full_like(tracks.inv_depth, 0.5))

    def test_constant_flow(self):
        """Flow (1, 0) advances tracks one pixel per frame"""
        depths = torch.full((4, 16, 16), 2.0, dtype=DTYPE)
        flows = torch.zeros(3, 2, 16, 16, dtype=DTYPE)
        flows[:, 0] = 1.0
        tracks = build_tracks(flows, torch.zeros(3, 16, 16, dtype=DTYPE), depths, RefineConfig(grid=4, track_length=4, stride=1))
        track = tracks.track(0)
        assert track.start_frame == 0
        us = [p[0] for p in track.pixels]
        assert us == pytest.approx([us[0] + k for k in range(len(us))])
        assert len(us) == 4

    def test_tracks_leaving_the_image_are_truncated(self):
        """Points outside the image are marked invalid"""
        depths = torch.full((4, 16, 16), 2.0, dtype=DTYPE)
        flows = torch.zeros(3, 2, 16, 16, dtype=DTYPE)
        flows[:, 0] = 3.0
        tracks = build_tracks(flows, torch.zeros(3, 16, 16, dtype=DTYPE), depths, RefineConfig(grid=4, track_length=4, stride=1))
        outside = tracks.positions[..., 0] > 16
        assert outside.any()
        assert not (tracks.valid & outside).any()

    def test_default_stride_follows_consecutive_frames(self):
        """Anchors are every third frame; their points are recorded in every following frame"""
        depths = torch.full((30, 32, 32), 2.0, dtype=DTYPE)
        flows = torch.zeros(29, 2, 32, 32, dtype=DTYPE)
        sigmas = torch.full((29, 32, 32), 0.01, dtype=DTYPE)
        tracks = build_tracks(flows, sigmas, depths, RefineConfig(grid=4))
        assert sorted(set(tracks.anchors.tolist())) == list(range(0, 28, 3))
        assert tracks.frame_indices[0].tolist() == list(range(8))
        assert torch.allclose(tracks.sigmas[0], 0.01 * torch.arange(8, dtype=DTYPE))
        assert bool((tracks.sigmas[0, :5] < 0.05).all()) and bool((tracks.sigmas[0, 6:] > 0.05).all())

    def test_default_stride_tail(self):
        """Tracks near the end of the sequence stop at the last frame"""
        depths = torch.full((30, 32, 32), 2.0, dtype=DTYPE)
        tracks = build_tracks(torch.zeros(29, 2, 32, 32, dtype=DTYPE), torch.zeros(29, 32, 32, dtype=DTYPE), depths, RefineConfig(grid=4))
        tail = tracks.subset(torch.nonzero(tracks.anchors == 27).reshape(-1))
        assert len(tail) == 16
        assert tail.frame_indices[0, :3].tolist() == [27, 28, 29]
        assert tail.valid[0].tolist() == [True] * 3 + [False] * 5
        assert tail.track(0).start_frame == 27

    def test_default_stride_constant_flow(self):
        """Flow (1, 0) advances tracks one pixel per frame at the default stride"""
        depths = torch.full((30, 32, 32), 2.0, dtype=DTYPE)
        flows = torch.zeros(29, 2, 32, 32, dtype=DTYPE)
        flows[:, 0] = 1.0
        tracks = build_tracks(flows, torch.zeros(29, 32, 32, dtype=DTYPE), depths, RefineConfig(grid=4))
        us = [p[0] for p in tracks.track(0).pixels]
        assert len(us) == 8
        assert us == pytest.approx([us[0] + k for k in range(8)])

    def test_uniform_weighting(self, static_scene):
        """Uniform weighting ignores the given uncertainty"""
        depths, flows = _tensors(static_scene)
        sigmas = torch.full((4, 32, 32), 0.5, dtype=DTYPE)
        tracks = build_tracks(flows, sigmas, depths, RefineConfig(grid=4, weighting="uniform"))
        assert torch.count_nonzero(tracks.sigmas) == 0

    def test_raster_count_mismatch(self, static_scene):
        """Flow and uncertainty counts must be frames - 1"""
        depths, flows = _tensors(static_scene)
        with pytest.raises(GeometryError):
            build_tracks(flows[:2], torch.zeros(2, 32, 32, dtype=DTYPE), depths)


class TestCosts:
    """Reprojection and smoothness terms"""

    def test_oracle_reprojection(self, static_scene):
        """Ground-truth poses, depths and one-step tracks reproject exactly"""
        depths, flows = _tensors(static_scene)
        config = RefineConfig(grid=8, track_length=2, stride=1)
        tracks = build_tracks(flows, torch.zeros(4, 32, 32, dtype=DTYPE), depths, config)
        cost = reprojection_cost(tracks, static_scene.gt_absolute, static_scene.focal, 32, 32)
        assert float(cost) < 1e-6

    def test_gate(self):
        """Points at or above sigma_max contribute nothing"""
        poses = PoseSE3.identity((2,))
        assert float(reprojection_cost(_single_track(0.06), poses, 16.0, 16, 16, sigma_max=0.05)) == 0.0

    def test_weight(self):
        """Weight is sigma_max - sigma"""
        poses = PoseSE3.identity((2,))
        cost = reprojection_cost(_single_track(0.03), poses, 16.0, 16, 16, sigma_max=0.05)
        assert float(cost) == pytest.approx(0.02)

    def test_gated_tracks_have_no_influence(self, static_scene):
        """Changing the depth of fully gated tracks leaves the cost unchanged"""
        depths, flows = _tensors(static_scene)
        sigmas = torch.zeros(4, 32, 32, dtype=DTYPE)
        sigmas[:, :16] = 1.0
        tracks = build_tracks(flows, sigmas, depths, RefineConfig(grid=8, track_length=3, stride=1))
        poses = static_scene.gt_absolute
        gated = (tracks.sigmas[:, 1:] >= 0.05).all(dim=1)
        assert gated.any()
        changed = torch.where(gated, tracks.inv_depth * 3.0, tracks.inv_depth)
        before = float(reprojection_cost(tracks, poses, static_scene.focal, 32, 32))
        after = float(reprojection_cost(tracks, poses, static_scene.focal, 32, 32, inv_depth=changed))
        assert after == pytest.approx(before, abs=1e-12)

        inv_depth = tracks.inv_depth.clone().requires_grad_(True)
        reprojection_cost(tracks, poses, static_scene.focal, 32, 32, inv_depth=inv_depth).backward()
        assert torch.count_nonzero(inv_depth.grad[gated]) == 0

    def test_points_between_keyframes_use_their_own_frame(self):
        """At the default stride, moving a non-keyframe pose changes the cost"""
        seq = generate_scene(scene_spec(frames=8))
        depths, flows = _tensors(seq)
        tracks = build_tracks(flows, torch.zeros(7, 32, 32, dtype=DTYPE), depths, RefineConfig(grid=8))
        assert tracks.keyframes == [0, 3, 6, 7]
        assert {1, 2}.issubset(set(tracks.frame_indices[tracks.valid].tolist()))
        mats = seq.gt_absolute.matrix().clone()
        before = float(reprojection_cost(tracks, mats, seq.focal, 32, 32))
        mats[1, 0, 3] += 0.3
        after = float(reprojection_cost(tracks, mats, seq.focal, 32, 32))
        assert after > before

    def test_matrices_and_poses_agree(self, static_scene):
        """Poses may be given as PoseSE3 or as matrices"""
        depths, flows = _tensors(static_scene)
        tracks = build_tracks(flows, torch.full((4, 32, 32), 0.01, dtype=DTYPE), depths, RefineConfig(grid=8))
        poses = random_poses(5, seed=9, rot_scale=0.02, trans_scale=0.05)
        from_poses = reprojection_cost(tracks, poses, 30.0, 32, 32)
        from_matrices = reprojection_cost(tracks, poses.matrix(), 30.0, 32, 32)
        assert float(from_poses) == pytest.approx(float(from_matrices), rel=1e-12)

    def test_smoothness_constant_velocity(self):
        """Identical consecutive motions cost nothing"""
        step = random_poses(1, seed=3, rot_scale=0.1)[0].matrix()
        mats = [torch.eye(4, dtype=DTYPE)]
        for _ in range(5):
            mats.append(mats[-1] @ step)
        assert float(smoothness_cost(PoseSE3.from_matrix(torch.stack(mats)))) == pytest.approx(0.0, abs=1e-9)
        assert float(smoothness_cost(PoseSE3.identity((4,)))) == 0.0

    def test_smoothness_rigid_invariance(self):
        """A global rigid transform does not change smoothness"""
        poses = random_poses(6, seed=4, rot_scale=0.2)
        moved = PoseSE3.from_matrix(random_poses(1, seed=5)[0].matrix() @ poses.matrix())
        assert float(smoothness_cost(moved)) == pytest.approx(float(smoothness_cost(poses)), abs=1e-9)

    def test_smoothness_needs_three_poses(self):
        """Two poses have no second difference"""
        with pytest.raises(GeometryError):
            smoothness_cost(PoseSE3.identity((2,)))


class TestInterpolation:
    """Filling frames between keyframes"""

    def test_unchanged_keyframes(self):
        """Untouched keyframes reproduce the input exactly"""
        initial = random_poses(7, seed=6, rot_scale=0.1)
        keyframes = [0, 3, 6]
        result = interpolate_poses(initial, keyframes, initial[torch.tensor(keyframes)])
        assert torch.allclose(result.matrix(), initial.matrix(), atol=1e-12)

    def test_keyframes_take_refined_values(self):
        """Keyframes carry the refined poses; frames in between follow"""
        initial = random_poses(7, seed=7, rot_scale=0.1)
        keyframes = [0, 3, 6]
        shift = PoseSE3(torch.zeros(3, dtype=DTYPE), torch.tensor([0.1, 0.0, 0.0], dtype=DTYPE))
        refined = PoseSE3.from_matrix(shift.matrix() @ initial[torch.tensor(keyframes)].matrix())
        result = interpolate_poses(initial, keyframes, refined)
        assert torch.allclose(result.matrix()[torch.tensor(keyframes)], refined.matrix(), atol=1e-10)
        expected = shift.matrix() @ initial.matrix()
        assert torch.allclose(result.matrix(), expected, atol=1e-9)


    def test_frame_matrices(self):
        """Keyframe corrections are blended linearly for the frames in between"""
        initial = random_poses(7, seed=8, rot_scale=0.1).matrix()
        keyframes = [0, 3, 6]
        unchanged = frame_matrices(initial, keyframes, torch.zeros(3, 6, dtype=DTYPE))
        assert torch.allclose(unchanged, initial, atol=1e-15)

        xi = torch.tensor([0.0, 0.0, 0.0, 0.3, 0.0, 0.0], dtype=DTYPE)
        corrections = torch.stack([torch.zeros(6, dtype=DTYPE), xi, xi])
        out = frame_matrices(initial, keyframes, corrections)
        assert torch.allclose(out[0], initial[0], atol=1e-12)
        shift = out[1] @ torch.linalg.inv(initial[1])
        assert torch.allclose(shift[:3, 3], torch.tensor([0.1, 0.0, 0.0], dtype=DTYPE), atol=1e-12)
        assert torch.allclose(out[3], se3_exp(xi).matrix() @ initial[3], atol=1e-12)
        assert torch.allclose(out[4], se3_exp(xi).matrix() @ initial[4], atol=1e-12)


class TestWindows:
    """Sliding-window plan"""

    def test_plan(self):
        """Windows shift by window - overlap; each keyframe is freed once"""
        plan = WindowedRefiner(RefineConfig(window=8, overlap=6)).windows(10)
        assert plan[0] == (list(range(8)), list(range(1, 8)))
        assert plan[-1][0][-1] == 9
        freed = [k for _, free in plan for k in free]
        assert sorted(freed) == list(range(1, 10))
        assert len(freed) == len(set(freed))

    def test_short_sequence(self):
        """A sequence shorter than one window is a single window"""
        plan = WindowedRefiner(RefineConfig(window=8, overlap=6)).windows(3)
        assert plan == [([0, 1, 2], [1, 2])]


class TestRefineTrajectory:
    """End-to-end refinement"""

    def test_perfect_initialization(self, static_scene):
        """Starting at the optimum barely moves the trajectory"""
        depths, flows = _tensors(static_scene)
        config = RefineConfig(grid=8, stride=2, window=3, overlap=1, steps_per_window=10, global_steps=10, step_size=1e-6)
        result = refine_trajectory(
            static_scene.gt_absolute, static_scene.focal, depths, flows, torch.zeros(4, 32, 32, dtype=DTYPE), config
        )
        assert len(result.poses) == 5
        assert result.keyframes == [0, 2, 4]
        assert torch.allclose(result.poses.matrix(), static_scene.gt_absolute.matrix(), atol=1e-4)
        assert result.focal == pytest.approx(static_scene.focal, rel=1e-4)
        assert result.report.refined_focal == result.focal
        assert result.report.global_final_loss is not None

    def test_length_mismatch(self, static_scene):
        """Trajectory and rasters must agree"""
        depths, flows = _tensors(static_scene)
        with pytest.raises(InputError):
            refine_trajectory(PoseSE3.identity((3,)), 30.0, depths, flows, torch.zeros(4, 32, 32, dtype=DTYPE))

    def test_default_stride_perfect_initialization(self):
        """Keyframes every third frame; frames in between follow the unchanged corrections"""
        seq = generate_scene(scene_spec(frames=8))
        depths, flows = _tensors(seq)
        config = RefineConfig(grid=8, window=3, overlap=1, steps_per_window=10, global_steps=10, step_size=1e-6)
        result = refine_trajectory(seq.gt_absolute, seq.focal, depths, flows, torch.zeros(7, 32, 32, dtype=DTYPE), config)
        assert result.keyframes == [0, 3, 6, 7]
        assert torch.allclose(result.poses.matrix(), seq.gt_absolute.matrix(), atol=1e-4)
        assert torch.equal(result.poses[0].vector(), seq.gt_absolute[0].vector())

    @pytest.mark.slow
    def test_noisy_initialization_improves(self):
        """Bundle adjustment reduces the error of perturbed trajectories on most scenes"""
        improved, scenes = 0, 0
        for seed in range(20):
            seq = _scene_or_none(scene_spec(frames=30, camera_path="handheld", seed=100 + seed))
            if seq is None:
                continue
            scenes += 1
            depths, flows = _tensors(seq)
            initial = _noisy(seq, seed)
            config = RefineConfig(grid=12, track_length=4, stride=1, steps_per_window=200, global_steps=300, step_size=1e-4)
            result = refine_trajectory(initial, seq.focal, depths, flows, torch.zeros(29, 32, 32, dtype=DTYPE), config)

            before = ate(align(initial, seq.poses_c2w, "similarity").aligned, seq.poses_c2w)
            after = ate(align(result.poses, seq.poses_c2w, "similarity").aligned, seq.poses_c2w)
            improved += int(after < before)
        assert scenes >= 15
        assert improved >= 0.9 * scenes

    @pytest.mark.slow
    def test_uncertainty_helps_with_movers(self):
        """Gating mover tracks gives an error no larger than uniform weighting on most scenes"""
        wins, scenes = 0, 0
        for seed in range(20):
            seq = _scene_or_none(scene_spec(frames=12, camera_path="handheld", movers=2, mover_coverage=0.3, seed=200 + seed))
            if seq is None:
                continue
            scenes += 1
            depths, flows = _tensors(seq)
            sigmas = torch.as_tensor(seq.masks[:-1].astype(np.float64))
            initial = _noisy(seq, seed)
            errors = {}
            for weighting in ("uncertainty", "uniform"):
                config = RefineConfig(
                    grid=12, track_length=4, stride=1, steps_per_window=150, global_steps=300, step_size=1e-3, weighting=weighting
                )
                result = refine_trajectory(initial, seq.focal, depths, flows, sigmas, config)
                errors[weighting] = ate(align(result.poses, seq.poses_c2w, "similarity").aligned, seq.poses_c2w)
            wins += int(errors["uncertainty"] <= errors["uniform"] + 1e-9)
        assert scenes >= 15
        assert wins >= 0.8 * scenes


if __name__ == "__main__":
    pytest.main([__file__])
