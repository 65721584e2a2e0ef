"""Tests for scene.py."""

from __future__ import annotations

import pytest
import torch

from geometry import PoseSE3, compose, invert
from scene import (
    PLANE,
    SPHERE_CENTER,
    SPHERE_RADIUS,
    WEDGE,
    SceneSequence,
    generate_scene,
    plane_depth,
    smooth_trajectory,
    texture_atlas,
)
from testing import max_abs
from util import RejectedInputError
from warp import backproject, bilinear_sample, pixel_grid, project, transform_points


F64 = torch.float64


@pytest.fixture(scope="module")
def plane_scene():
    return generate_scene(0, "textured-plane", num_frames=6, height=32, width=32)


def _world_points(scene: SceneSequence, i: int) -> torch.Tensor:
    """(3, H, W) world coordinates of frame i's pixels."""
    points, _ = backproject(scene.depths[i : i + 1], scene.intrinsics)
    return transform_points(points, scene.poses[i])[0]


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(3, "two-plane", num_frames=3, height=16, width=16)
        b = generate_scene(3, "two-plane", num_frames=3, height=16, width=16)
        assert torch.equal(a.frames, b.frames)
        assert torch.equal(a.depths, b.depths)
        assert torch.equal(a.poses.t, b.poses.t)

    def test_seed_changes_scene(self):
        a = generate_scene(1, num_frames=2, height=16, width=16)
        b = generate_scene(2, num_frames=2, height=16, width=16)
        assert not torch.equal(a.frames, b.frames)

    def test_shapes(self, plane_scene):
        assert len(plane_scene) == 6
        assert plane_scene.frames.shape == (6, 3, 32, 32)
        assert plane_scene.depths.shape == (6, 32, 32)
        assert plane_scene.relatives.R.shape == (5, 3, 3)
        assert plane_scene.positions().shape == (6, 3)
        assert (plane_scene.height, plane_scene.width) == (32, 32)

    def test_colors_in_range(self, plane_scene):
        assert float(plane_scene.frames.min()) >= 0.0
        assert float(plane_scene.frames.max()) <= 1.0

    def test_first_pose_is_origin(self, plane_scene):
        assert max_abs(plane_scene.poses.R[0], torch.eye(3, dtype=F64)) < 1e-15
        assert max_abs(plane_scene.poses.t[0], 0.0) < 1e-15

    def test_relatives_chain(self, plane_scene):
        poses, rel = plane_scene.poses, plane_scene.relatives
        chained = compose(poses[:-1], rel)
        assert max_abs(chained.R, poses.R[1:]) < 1e-12
        assert max_abs(chained.t, poses.t[1:]) < 1e-12

    def test_plane_depth_analytic(self, plane_scene):
        normal, offset = PLANE
        n = torch.tensor(normal, dtype=F64)
        for i in range(len(plane_scene)):
            world = _world_points(plane_scene, i)
            residual = torch.einsum("c,chw->hw", n, world) - offset
            assert float(residual.abs().max()) < 1e-9

    def test_depth_consistent_across_frames(self, plane_scene):
        K = plane_scene.intrinsics
        for i in range(len(plane_scene) - 1):
            points, _ = backproject(plane_scene.depths[i : i + 1], K)
            moved = transform_points(points, invert(plane_scene.relatives[i]))
            coords, valid = project(moved, K)
            seen = bilinear_sample(plane_scene.depths[i + 1][None, None], coords)[0, 0]
            err = (seen - moved[0, 2]).abs()[valid[0]]
            assert err.numel() > 0.5 * 32 * 32
            assert float(err.max()) < 1e-2

    def test_sphere_room(self):
        scene = generate_scene(0, "sphere-room", num_frames=3, height=16, width=16)
        center = torch.tensor(SPHERE_CENTER, dtype=F64)[:, None, None]
        for i in range(3):
            radius = (_world_points(scene, i) - center).norm(dim=0)
            assert max_abs(radius, SPHERE_RADIUS) < 1e-9
        assert float(scene.depths.min()) > 0

    def test_two_plane_is_nearest_surface(self):
        scene = generate_scene(0, "two-plane", num_frames=2, height=16, width=16)
        K = scene.intrinsics
        walls = [plane_depth(*p, scene.poses[1], K, 16, 16) for p in WEDGE]
        assert torch.equal(scene.depths[1], torch.minimum(*walls))

    def test_rejects_unknown_kind(self):
        with pytest.raises(RejectedInputError, match="Unknown scene kind"):
            generate_scene(0, "cave")

    def test_rejects_tiny(self):
        with pytest.raises(RejectedInputError):
            generate_scene(0, num_frames=1)


class TestPieces:
    def test_texture_range_and_determinism(self):
        a = texture_atlas(5, size=64)
        assert a.shape == (1, 3, 64, 64)
        assert abs(float(a.min()) - 0.05) < 1e-12 and abs(float(a.max()) - 0.95) < 1e-12
        assert torch.equal(a, texture_atlas(5, size=64))
        assert not torch.equal(a, texture_atlas(6, size=64))

    def test_trajectory_moves_forward(self):
        poses = smooth_trajectory(0, 20)
        assert poses.R.shape == (20, 3, 3)
        step = (poses.t[1:] - poses.t[:-1]).norm(dim=1)
        assert float(step.min()) > 0

    def test_trajectory_prefix_is_stable(self):
        short, long = smooth_trajectory(4, 10), smooth_trajectory(4, 40)
        assert max_abs(short.t, long.t[:10]) < 1e-12
        assert max_abs(short.R, long.R[:10]) < 1e-12

    def test_velocity_is_nearly_constant(self):
        steps = smooth_trajectory(0, 60).t.diff(dim=0)
        mean = steps.mean(dim=0)
        assert float((steps - mean).norm(dim=1).max()) < 0.1 * float(mean.norm())

    def test_image_motion_per_frame(self):
        scene = generate_scene(0, "textured-plane", num_frames=8, height=64, width=64)
        K = scene.intrinsics
        grid = pixel_grid(64, 64, F64)
        for i in range(len(scene) - 1):
            points, _ = backproject(scene.depths[i : i + 1], K)
            coords, _ = project(transform_points(points, invert(scene.relatives[i])), K)
            flow = float((coords[0] - grid).norm(dim=-1).mean())
            assert 0.2 < flow < 0.6

    def test_sequence_length_check(self, plane_scene):
        with pytest.raises(RejectedInputError):
            SceneSequence(
                kind="textured-plane",
                seed=0,
                frames=plane_scene.frames,
                depths=plane_scene.depths[:-1],
                poses=plane_scene.poses,
                relatives=plane_scene.relatives,
                intrinsics=plane_scene.intrinsics,
            )

    def test_relatives_length_check(self, plane_scene):
        with pytest.raises(RejectedInputError):
            SceneSequence(
                kind="textured-plane",
                seed=0,
                frames=plane_scene.frames,
                depths=plane_scene.depths,
                poses=plane_scene.poses,
                relatives=PoseSE3.identity((2,)),
                intrinsics=plane_scene.intrinsics,
            )


if __name__ == "__main__":
    from testing import run_tests

    run_tests(__file__)
