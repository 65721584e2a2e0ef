"""Tests for geometry.py."""

from __future__ import annotations

import math

import pytest
import torch

from geometry import (
    PoseSE3,
    check_rotation,
    compose,
    invert,
    log_rotation,
    rodrigues,
    rotation_angle,
    scale_head_outputs,
    svd_orthogonalize,
)
from testing import max_abs, random_rotations
from util import DegenerateOrthogonalizationError, InvalidRotationError


F64 = torch.float64


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def _random_phi(n: int, lo: float, hi: float, gen: torch.Generator) -> torch.Tensor:
    axis = torch.randn(n, 3, generator=gen, dtype=F64)
    axis = axis / axis.norm(dim=1, keepdim=True)
    theta = lo + (hi - lo) * torch.rand(n, 1, generator=gen, dtype=F64)
    return axis * theta


def _random_pose(n: int, gen: torch.Generator) -> PoseSE3:
    R = rodrigues(_random_phi(n, 0.0, 3.0, gen))
    return PoseSE3(R, torch.randn(n, 3, generator=gen, dtype=F64))


class TestRodrigues:
    def test_zero_is_identity(self):
        assert torch.equal(rodrigues(torch.zeros(3, dtype=F64)), torch.eye(3, dtype=F64))

    def test_quarter_turn_about_z(self):
        R = rodrigues(torch.tensor([0.0, 0.0, math.pi / 2], dtype=F64))
        expected = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=F64)
        assert max_abs(R, expected) < 1e-15

    def test_always_a_rotation(self, gen):
        phi = torch.randn(200, 3, generator=gen, dtype=F64) * 5.0
        R = rodrigues(phi)
        check_rotation(R, tol=1e-9)

    def test_tiny_angle_taylor(self):
        phi = torch.tensor([1e-10, -2e-10, 0.5e-10], dtype=F64)
        R = rodrigues(phi)
        x, y, z = phi.tolist()
        K = torch.tensor([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]], dtype=F64)
        expected = torch.eye(3, dtype=F64) + K
        assert max_abs(R, expected) < 1e-18

    def test_gradient_finite_at_zero(self):
        phi = torch.zeros(3, dtype=F64, requires_grad=True)
        rodrigues(phi).sum().backward()
        assert phi.grad is not None and bool(torch.isfinite(phi.grad).all())


class TestLogRotation:
    def test_identity(self):
        assert torch.equal(log_rotation(torch.eye(3, dtype=F64)), torch.zeros(3, dtype=F64))

    def test_pi_about_x(self):
        R = torch.diag(torch.tensor([1.0, -1.0, -1.0], dtype=F64))
        phi = log_rotation(R)
        assert abs(float(phi.norm()) - math.pi) < 1e-12
        assert max_abs(phi.abs(), torch.tensor([math.pi, 0.0, 0.0], dtype=F64)) < 1e-12

    def test_round_trip_general(self, gen):
        phi = _random_phi(1000, 0.1, 3.0, gen)
        assert max_abs(log_rotation(rodrigues(phi)), phi) < 1e-8

    @pytest.mark.parametrize("theta", [1e-6, 1e-4, 0.5, math.pi - 1e-2, math.pi - 1e-6])
    def test_round_trip_range(self, gen, theta):
        phi = _random_phi(50, theta, theta, gen)
        assert max_abs(log_rotation(rodrigues(phi)), phi) < 1e-8

    def test_random_rotations_round_trip(self):
        R = random_rotations(100, seed=3)
        assert max_abs(rodrigues(log_rotation(R)), R) < 1e-9

    def test_canonical_range(self):
        R = random_rotations(100, seed=4)
        assert float(log_rotation(R).norm(dim=-1).max()) <= math.pi + 1e-12

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidRotationError):
            log_rotation(torch.eye(3, dtype=F64) * 1.1)

    def test_rejects_reflection(self):
        with pytest.raises(InvalidRotationError):
            log_rotation(torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=F64)))


class TestSvdOrthogonalize:
    def test_fixed_point(self):
        R = random_rotations(10, seed=1)
        assert max_abs(svd_orthogonalize(R), R) < 1e-10

    def test_scaled_identity(self):
        out = svd_orthogonalize(1.5 * torch.eye(3, dtype=F64))
        assert max_abs(out, torch.eye(3, dtype=F64)) < 1e-12

    def test_negated_column(self):
        R = random_rotations(1, seed=2)[0]
        raw = R.clone()
        raw[:, 0] = -raw[:, 0]
        out = svd_orthogonalize(raw)
        assert abs(float(torch.linalg.det(out)) - 1.0) < 1e-10
        # nearest rotation: no sampled rotation is closer in Frobenius norm
        best = float((out - raw).norm())
        candidates = random_rotations(2000, seed=7)
        assert float((candidates - raw).norm(dim=(1, 2)).min()) >= best - 1e-9

    def test_idempotent(self, gen):
        raw = torch.randn(20, 3, 3, generator=gen, dtype=F64)
        once = svd_orthogonalize(raw)
        assert max_abs(svd_orthogonalize(once), once) < 1e-10
        check_rotation(once, tol=1e-9)

    def test_rank_deficient(self):
        raw = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]], dtype=F64)
        with pytest.raises(DegenerateOrthogonalizationError):
            svd_orthogonalize(raw)


class TestScaleHeadOutputs:
    def test_zero(self):
        phi, t = scale_head_outputs(torch.zeros(3), torch.zeros(3))
        assert not phi.any() and not t.any()

    def test_quarter_turn(self):
        phi, _ = scale_head_outputs(
            torch.tensor([1000 * math.pi / 2, 0.0, 0.0], dtype=F64), torch.zeros(3, dtype=F64)
        )
        assert max_abs(phi, torch.tensor([math.pi / 2, 0.0, 0.0], dtype=F64)) < 1e-15

    def test_exact_multiply(self, gen):
        a = torch.randn(3, generator=gen, dtype=F64)
        b = torch.randn(3, generator=gen, dtype=F64)
        phi, t = scale_head_outputs(a, b)
        assert torch.equal(phi, a * 0.001) and torch.equal(t, b * 0.001)

    def test_order_matters_for_large_values(self):
        raw = torch.tensor([2000.0, 0.0, 0.0], dtype=F64)
        scaled_first = rodrigues(scale_head_outputs(raw, raw)[0])
        rotated_first = 0.001 * rodrigues(raw)
        assert max_abs(scaled_first, rotated_first) > 0.1


class TestComposition:
    def test_identity_left(self, gen):
        T = _random_pose(5, gen)
        out = compose(PoseSE3.identity(dtype=F64), T)
        assert max_abs(out.R, T.R) == 0.0 and max_abs(out.t, T.t) == 0.0

    def test_inverse(self, gen):
        T = _random_pose(5, gen)
        out = compose(T, invert(T))
        assert max_abs(out.R, torch.eye(3, dtype=F64).expand(5, 3, 3)) < 1e-10
        assert max_abs(out.t, torch.zeros(5, 3, dtype=F64)) < 1e-10

    def test_chain_matches_homogeneous(self, gen):
        poses = _random_pose(10, gen)
        acc = PoseSE3.identity(dtype=F64)
        dense = torch.eye(4, dtype=F64)
        for i in range(10):
            acc = compose(acc, poses[i])
            dense = dense @ poses[i].matrix()
        assert max_abs(acc.matrix(), dense) < 1e-9

    def test_invert_matches_matrix_inverse(self, gen):
        T = _random_pose(3, gen)
        assert max_abs(invert(T).matrix(), torch.linalg.inv(T.matrix())) < 1e-10

    def test_from_matrix(self, gen):
        T = _random_pose(2, gen)
        back = PoseSE3.from_matrix(T.matrix())
        assert torch.equal(back.R, T.R) and torch.equal(back.t, T.t)


class TestRotationAngle:
    def test_matches_log_norm(self, gen):
        phi = _random_phi(20, 0.1, 3.0, gen)
        angle = rotation_angle(rodrigues(phi))
        assert max_abs(angle, phi.norm(dim=-1)) < 1e-9


if __name__ == "__main__":
    from testing import run_tests

    run_tests(__file__)
