"""
Unit tests for the camera model and pose algebra
"""

import math

import pytest
import torch

from camfit.core.errors import GeometryError
from camfit.core.geometry import (
    DTYPE,
    Pinhole,
    PoseSE3,
    chain_relative_poses,
    compose,
    consecutive_differences,
    geodesic_angle,
    induced_flow,
    invert,
    matrix_to_axis_angle,
    project,
    relative_from_trajectory,
    rotation_from_axis_angle,
    se3_exp,
    se3_log,
    trajectory_from_relative,
    unproject,
)

from .conftest import random_poses


def _t(*values):
    return torch.tensor(values, dtype=DTYPE)


def _translation(x, y, z) -> PoseSE3:
    return PoseSE3(torch.zeros(3, dtype=DTYPE), _t(x, y, z))


CAM = Pinhole(focal=100.0, width=100, height=100)


class TestRotation:
    """Axis-angle conversions"""

    def test_zero_is_identity(self):
        """Zero vector maps to the exact identity"""
        assert torch.equal(rotation_from_axis_angle(torch.zeros(3, dtype=DTYPE)), torch.eye(3, dtype=DTYPE))

    def test_half_turn_about_x(self):
        """(pi, 0, 0) is diag(1, -1, -1)"""
        rot = rotation_from_axis_angle(_t(math.pi, 0.0, 0.0))
        assert torch.allclose(rot, torch.diag(_t(1.0, -1.0, -1.0)), atol=1e-12)

    def test_quarter_turn_about_z(self):
        """(0, 0, pi/2) takes x to y"""
        rot = rotation_from_axis_angle(_t(0.0, 0.0, math.pi / 2))
        assert torch.allclose(rot @ _t(1.0, 0.0, 0.0), _t(0.0, 1.0, 0.0), atol=1e-12)

    def test_result_is_orthonormal(self):
        """R^T R = I and det R = 1 for random inputs"""
        rot = rotation_from_axis_angle(random_poses(50, seed=1, rot_scale=2.0).axis_angle)
        eye = torch.eye(3, dtype=DTYPE).expand(50, 3, 3)
        assert torch.allclose(rot.transpose(-1, -2) @ rot, eye, atol=1e-12)
        assert torch.allclose(torch.linalg.det(rot), torch.ones(50, dtype=DTYPE), atol=1e-12)

    def test_logarithm_round_trip(self):
        """matrix_to_axis_angle inverts Rodrigues inside the canonical range"""
        omega = random_poses(50, seed=2, rot_scale=0.8).axis_angle
        recovered = matrix_to_axis_angle(rotation_from_axis_angle(omega))
        assert torch.allclose(recovered, omega, atol=1e-9)

    def test_geodesic_angle(self):
        """Angle between identity and a 30 degree turn"""
        rot = rotation_from_axis_angle(_t(0.0, math.radians(30), 0.0))
        angle = geodesic_angle(torch.eye(3, dtype=DTYPE), rot)
        assert float(angle) == pytest.approx(math.radians(30), abs=1e-12)

    def test_small_angle_gradient_is_finite(self):
        """Gradients stay finite at the origin"""
        omega = torch.zeros(3, dtype=DTYPE, requires_grad=True)
        rotation_from_axis_angle(omega).sum().backward()
        assert torch.all(torch.isfinite(omega.grad))


class TestProjection:
    """Pinhole projection and unprojection"""

    def test_optical_axis(self):
        """Point on the axis lands on the principal point"""
        assert torch.allclose(project(_t(0.0, 0.0, 2.0), CAM), _t(50.0, 50.0))

    def test_similar_triangles(self):
        """x/z = 0.1 moves 10 px at f = 100"""
        assert torch.allclose(project(_t(0.2, 0.0, 2.0), CAM), _t(60.0, 50.0))

    def test_behind_camera(self):
        """z <= 0 is rejected"""
        with pytest.raises(GeometryError):
            project(_t(0.0, 0.0, -1.0), CAM)

    def test_unproject_examples(self):
        """Inverse of the projection examples"""
        assert torch.allclose(unproject(_t(50.0, 50.0), 2.0, CAM), _t(0.0, 0.0, 2.0))
        assert torch.allclose(unproject(_t(60.0, 50.0), 2.0, CAM), _t(0.2, 0.0, 2.0))

    def test_unproject_rejects_nonpositive_depth(self):
        """Depth must be positive"""
        with pytest.raises(GeometryError):
            unproject(_t(10.0, 10.0), 0.0, CAM)

    def test_round_trip(self):
        """project(unproject(p, d)) = p"""
        generator = torch.Generator().manual_seed(0)
        pixels = torch.rand(200, 2, generator=generator, dtype=DTYPE) * 100
        depth = 0.1 + 10 * torch.rand(200, generator=generator, dtype=DTYPE)
        assert (project(unproject(pixels, depth, CAM), CAM) - pixels).abs().max() <= 1e-9

    def test_invalid_camera(self):
        """Nonpositive focal and empty images are rejected"""
        with pytest.raises(GeometryError):
            Pinhole(focal=0.0, width=10, height=10)
        with pytest.raises(GeometryError):
            Pinhole(focal=10.0, width=0, height=10)


class TestPoseAlgebra:
    """Composition, inversion and chaining"""

    def test_identity_is_neutral(self):
        """compose(identity, a) = a"""
        a = random_poses(1, seed=4)[0]
        result = compose(PoseSE3.identity(), a)
        assert torch.allclose(result.matrix(), a.matrix(), atol=1e-12)

    def test_invert_translation(self):
        """Inverse of a pure translation negates it"""
        inverse = invert(_translation(0.0, 0.0, 1.0))
        assert torch.allclose(inverse.translation, _t(0.0, 0.0, -1.0))

    def test_compose_with_inverse(self):
        """a . a^-1 = I for random poses"""
        a = random_poses(20, seed=5)
        product = compose(a, invert(a)).matrix()
        assert torch.allclose(product, torch.eye(4, dtype=DTYPE).expand(20, 4, 4), atol=1e-9)

    def test_associativity(self):
        """(a . b) . c = a . (b . c)"""
        a, b, c = random_poses(3, seed=6)
        left = compose(compose(a, b), c).matrix()
        right = compose(a, compose(b, c)).matrix()
        assert torch.allclose(left, right, atol=1e-9)

    def test_chain_identities(self):
        """Chaining identities gives identities"""
        chained = chain_relative_poses([PoseSE3.identity(), PoseSE3.identity()])
        assert torch.allclose(chained.matrix(), torch.eye(4, dtype=DTYPE).expand(2, 4, 4))

    def test_chain_translations(self):
        """Two unit steps along z end at z = 2"""
        step = _translation(0.0, 0.0, 1.0)
        chained = chain_relative_poses([step, step])
        assert torch.allclose(chained.translation, _t(0.0, 0.0, 1.0, 0.0, 0.0, 2.0).reshape(2, 3))

    def test_chain_single(self):
        """A single pose chains to itself"""
        a = random_poses(1, seed=7)
        assert torch.allclose(chain_relative_poses(a).matrix(), a.matrix(), atol=1e-12)

    def test_chain_empty(self):
        """Empty input is rejected"""
        with pytest.raises(GeometryError):
            chain_relative_poses([])

    def test_consecutive_differences_inverts_chain(self):
        """Differences of chained poses recover the input"""
        rel = random_poses(6, seed=8, rot_scale=0.3)
        recovered = consecutive_differences(chain_relative_poses(rel))
        assert torch.allclose(recovered.matrix(), rel.matrix(), atol=1e-9)

    def test_trajectory_round_trip(self):
        """relative_from_trajectory inverts trajectory_from_relative"""
        rel = random_poses(5, seed=9, rot_scale=0.2)
        trajectory = trajectory_from_relative(rel)
        assert len(trajectory) == 6
        assert torch.equal(trajectory.matrix()[0], torch.eye(4, dtype=DTYPE))
        assert torch.allclose(relative_from_trajectory(trajectory).matrix(), rel.matrix(), atol=1e-9)

    def test_se3_exp_log(self):
        """se3_log inverts se3_exp"""
        xi = torch.cat([random_poses(10, seed=10, rot_scale=0.5).axis_angle, torch.randn(10, 3, dtype=DTYPE)], -1)
        assert torch.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_batch_shape_mismatch(self):
        """Axis-angle and translation shapes must agree"""
        with pytest.raises(GeometryError):
            PoseSE3(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(3, 3, dtype=DTYPE))


class TestInducedFlow:
    """Rigid flow induced by a pose and a depth map"""

    def test_identity_pose(self):
        """No motion, no flow"""
        depth = torch.full((100, 100), 2.0, dtype=DTYPE)
        flow, valid = induced_flow(PoseSE3.identity(), depth, CAM)
        assert torch.count_nonzero(flow) == 0
        assert bool(valid.all())

    def test_forward_translation(self):
        """Point (0.2, 0, 2) pushed to z = 4 moves 5 px towards the principal point"""
        cam = Pinhole(focal=100.0, width=101, height=101)
        depth = torch.full((101, 101), 2.0, dtype=DTYPE)
        flow, valid = induced_flow(_translation(0.0, 0.0, 2.0), depth, cam)
        # column 60 is centered 10 px right of cx = 50.5, row 50 sits on cy
        assert torch.allclose(flow[:, 50, 60], _t(-5.0, 0.0), atol=1e-9)
        assert bool(valid.all())

    def test_rotation_is_depth_independent(self):
        """Pure rotation induces the same flow at any depth"""
        pose = PoseSE3(_t(0.01, -0.02, 0.005), torch.zeros(3, dtype=DTYPE))
        depth = 1.0 + torch.rand(100, 100, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
        flow_a, _ = induced_flow(pose, depth, CAM)
        flow_b, _ = induced_flow(pose, 2 * depth, CAM)
        assert torch.allclose(flow_a, flow_b, atol=1e-9)

    def test_behind_camera_is_invalid(self):
        """Points pushed behind the camera are masked with zero flow"""
        depth = torch.full((100, 100), 1.0, dtype=DTYPE)
        flow, valid = induced_flow(_translation(0.0, 0.0, -2.0), depth, CAM)
        assert not bool(valid.any())
        assert torch.count_nonzero(flow) == 0

    def test_batched_focal(self):
        """A focal vector broadcasts over leading candidate axes"""
        cam = Pinhole(focal=_t(50.0, 100.0).reshape(2, 1), width=20, height=20)
        depth = torch.full((3, 20, 20), 2.0, dtype=DTYPE)
        pose = PoseSE3.from_vector(torch.full((2, 3, 6), 0.01, dtype=DTYPE))
        flow, valid = induced_flow(pose, depth, cam)
        assert flow.shape == (2, 3, 2, 20, 20)
        assert valid.shape == (2, 3, 20, 20)

    def test_raster_size_mismatch(self):
        """Depth must match the camera size"""
        with pytest.raises(GeometryError):
            induced_flow(PoseSE3.identity(), torch.ones(10, 10, dtype=DTYPE), CAM)


if __name__ == "__main__":
    pytest.main([__file__])
