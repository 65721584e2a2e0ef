"""Tests for warp.py."""

from __future__ import annotations

import math

import pytest
import torch
import torch.nn.functional as F

from geometry import PoseSE3, rodrigues
from testing import max_abs
from util import RejectedInputError
from warp import (
    Intrinsics,
    backproject,
    bilinear_sample,
    pixel_grid,
    project,
    synthesize_view,
    transform_points,
)


F64 = torch.float64


def _stripes(height: int, width: int) -> torch.Tensor:
    """(1, 1, H, W) image that varies only along u."""
    cols = 0.5 + 0.4 * torch.sin(0.7 * torch.arange(width, dtype=F64))
    return cols.expand(height, width).reshape(1, 1, height, width).clone()


class TestIntrinsics:
    def test_rejects_non_positive_focal(self):
        with pytest.raises(RejectedInputError):
            Intrinsics(0.0, 1.0, 0.0, 0.0)

    def test_principal_point_bounds(self):
        Intrinsics(10.0, 10.0, 3.5, 3.5).check_bounds(8, 8)
        with pytest.raises(RejectedInputError):
            Intrinsics(10.0, 10.0, 8.5, 3.5).check_bounds(8, 8)

    def test_centered(self):
        K = Intrinsics.centered(6, 10)
        assert K.as_tuple() == (10.0, 10.0, 4.5, 2.5)


class TestBackproject:
    def test_principal_ray(self):
        K = Intrinsics(50.0, 50.0, 2.0, 1.0)
        depth = torch.full((1, 3, 5), 2.0, dtype=F64)
        points, valid = backproject(depth, K)
        assert points[0, :, 1, 2].tolist() == [0.0, 0.0, 2.0]
        assert bool(valid.all())

    def test_plugged_formula(self):
        K = Intrinsics(100.0, 100.0, 0.0, 0.0)
        depth = torch.ones(1, 1, 101, dtype=F64)
        points, _ = backproject(depth, K)
        assert points[0, :, 0, 100].tolist() == [1.0, 0.0, 1.0]

    def test_non_positive_depth_masked(self):
        depth = torch.tensor([[[1.0, 0.0, -1.0]]], dtype=F64)
        _, valid = backproject(depth, Intrinsics(1.0, 1.0, 1.0, 0.0))
        assert valid.tolist() == [[[True, False, False]]]

    def test_rejects_bad_rank(self):
        with pytest.raises(RejectedInputError):
            backproject(torch.ones(4, 4), Intrinsics(1.0, 1.0, 0.0, 0.0))


class TestTransformAndProject:
    def test_identity_pose(self):
        points = torch.randn(2, 3, 4, 5, dtype=F64)
        out = transform_points(points, PoseSE3.identity(dtype=F64))
        assert torch.equal(out, points)

    def test_forward_shift(self):
        points = torch.randn(1, 3, 2, 2, dtype=F64)
        T = PoseSE3(torch.eye(3, dtype=F64), torch.tensor([0.0, 0.0, 1.0], dtype=F64))
        out = transform_points(points, T)
        assert torch.equal(out[:, 2], points[:, 2] + 1.0)
        assert torch.equal(out[:, :2], points[:, :2])

    def test_principal_ray_projects_to_center(self):
        K = Intrinsics(20.0, 20.0, 2.0, 1.0)
        points = torch.zeros(1, 3, 3, 5, dtype=F64)
        points[:, 2] = 2.0
        coords, valid = project(points, K)
        assert coords[0, 0, 0].tolist() == [2.0, 1.0]
        assert bool(valid.all())

    def test_behind_camera_masked(self):
        K = Intrinsics(20.0, 20.0, 2.0, 1.0)
        points = torch.zeros(1, 3, 3, 5, dtype=F64)
        coords, valid = project(points, K)
        assert not bool(valid.any())
        assert bool(torch.isfinite(coords).all())

    def test_round_trip_grid(self):
        K = Intrinsics(30.0, 25.0, 7.5, 5.0)
        depth = 1.0 + torch.rand(2, 11, 16, dtype=F64)
        points, _ = backproject(depth, K)
        coords, _ = project(points, K)
        assert max_abs(coords, pixel_grid(11, 16).expand(2, 11, 16, 2)) < 1e-12


class TestBilinearSample:
    def test_identity_grid_exact(self):
        image = torch.rand(2, 3, 6, 7, dtype=F64)
        coords = pixel_grid(6, 7).expand(2, 6, 7, 2)
        assert torch.equal(bilinear_sample(image, coords), image)

    def test_midpoint(self):
        image = torch.tensor([[[[0.0, 1.0]]]], dtype=F64)
        coords = torch.tensor([[[[0.5, 0.0]]]], dtype=F64)
        assert float(bilinear_sample(image, coords)) == 0.5

    def test_matches_grid_sample(self):
        gen = torch.Generator().manual_seed(0)
        image = torch.rand(2, 3, 9, 12, generator=gen, dtype=F64)
        u = torch.rand(2, 5, 4, generator=gen, dtype=F64) * 11
        v = torch.rand(2, 5, 4, generator=gen, dtype=F64) * 8
        coords = torch.stack((u, v), dim=-1)
        norm = torch.stack((2 * u / 11 - 1, 2 * v / 8 - 1), dim=-1)
        expected = F.grid_sample(
            image, norm, mode="bilinear", padding_mode="border", align_corners=True
        )
        assert max_abs(bilinear_sample(image, coords), expected) < 1e-10

    def test_clamps_outside(self):
        image = torch.tensor([[[[0.25, 1.0]]]], dtype=F64)
        coords = torch.tensor([[[[-3.0, 0.0], [5.0, 2.0]]]], dtype=F64)
        assert bilinear_sample(image, coords).flatten().tolist() == [0.25, 1.0]

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(1)
        image = torch.rand(1, 2, 5, 5, generator=gen, dtype=F64, requires_grad=True)
        base = pixel_grid(3, 3)[None] + 0.5
        frac = 0.1 + 0.3 * torch.rand(1, 3, 3, 2, generator=gen, dtype=F64)
        coords = (base + frac).requires_grad_(True)
        assert torch.autograd.gradcheck(bilinear_sample, (image, coords))

    def test_rejects_batch_mismatch(self):
        with pytest.raises(RejectedInputError):
            bilinear_sample(torch.rand(2, 1, 4, 4), torch.zeros(1, 4, 4, 2))


class TestSynthesizeView:
    def test_identity_warp(self):
        K = Intrinsics.centered(12, 12)
        image = torch.rand(2, 3, 12, 12, dtype=F64)
        depth = 0.5 + torch.rand(2, 12, 12, dtype=F64)
        warped, mask = synthesize_view(image, depth, K, PoseSE3.identity(dtype=F64))
        m = mask[:, None].expand_as(image)
        assert torch.equal(warped[m], image[m])
        assert bool(mask[:, 1:-1, 1:-1].all())

    @pytest.mark.parametrize("shift", [1.0, 1.5, 2.25])
    def test_stripe_shift(self, shift):
        fx, depth_value = 10.0, 2.0
        delta = shift * depth_value / fx
        K = Intrinsics(fx, fx, 7.5, 3.5)
        image = _stripes(8, 16)
        depth = torch.full((1, 8, 16), depth_value, dtype=F64)
        T = PoseSE3(torch.eye(3, dtype=F64), torch.tensor([delta, 0.0, 0.0], dtype=F64))
        warped, mask = synthesize_view(image, depth, K, T)
        cols = 0.5 + 0.4 * torch.sin(0.7 * (torch.arange(16, dtype=F64) + shift))
        expected = cols.expand(8, 16)
        valid = mask[0]
        assert bool(valid[:, : 16 - math.ceil(shift) - 1].all())
        assert not bool(valid[:, -1].any())
        # the stripe pattern is smooth, so linear interpolation error stays small
        err = (warped[0, 0] - expected)[valid].abs().max()
        frac = shift - math.floor(shift)
        assert float(err) < (1e-9 if frac == 0 else 0.05)

    def test_integer_shift_exact(self):
        K = Intrinsics(10.0, 10.0, 7.5, 3.5)
        image = _stripes(8, 16)
        depth = torch.full((1, 8, 16), 2.0, dtype=F64)
        T = PoseSE3(torch.eye(3, dtype=F64), torch.tensor([0.4, 0.0, 0.0], dtype=F64))
        warped, mask = synthesize_view(image, depth, K, T)
        shifted = image[0, 0, :, 2:]
        assert max_abs(warped[0, 0, :, :-2][mask[0, :, :-2]], shifted[mask[0, :, :-2]]) < 1e-9

    def test_half_turn_about_z(self):
        H = W = 10
        K = Intrinsics(12.0, 12.0, (W - 1) / 2, (H - 1) / 2)
        image = torch.rand(1, 3, H, W, dtype=F64)
        depth = torch.full((1, H, W), 1.5, dtype=F64)
        R = rodrigues(torch.tensor([0.0, 0.0, math.pi], dtype=F64))
        warped, mask = synthesize_view(image, depth, K, PoseSE3(R, torch.zeros(3, dtype=F64)))
        expected = image.flip(-1, -2)
        inner = (slice(None), slice(None), slice(1, -1), slice(1, -1))
        assert max_abs(warped[inner], expected[inner]) < 1e-6
        assert bool(mask[:, 1:-1, 1:-1].all())

    def test_rejects_mismatched_depth(self):
        with pytest.raises(RejectedInputError):
            synthesize_view(
                torch.rand(1, 3, 4, 4),
                torch.ones(1, 4, 5),
                Intrinsics.centered(4, 4),
                PoseSE3.identity(dtype=torch.float32),
            )


if __name__ == "__main__":
    from testing import run_tests

    run_tests(__file__)
