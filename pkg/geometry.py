"""SE(3) pose algebra: Rodrigues, rotation log, SVD orthogonalization, composition.

All functions are batched over leading dimensions and differentiable where
the training path needs them (rodrigues, compose, invert).
"""

from __future__ import annotations

from dataclasses import dataclass

import logging
import math

import torch

from util import DegenerateOrthogonalizationError, InvalidRotationError


log = logging.getLogger(__name__)

POSE_OUTPUT_SCALE = 0.001
SMALL_ANGLE = 1e-8
NEAR_PI = 1e-3  # pi - theta below this uses the symmetric-part axis
ROTATION_TOL = 1e-6


# ===========================================================================
# Data Types
# ===========================================================================


@dataclass(slots=True)
class PoseSE3:
    """Rigid transform p -> R p + t; R[..., 3, 3], t[..., 3]."""

    R: torch.Tensor
    t: torch.Tensor

    @classmethod
    def identity(
        cls, batch: tuple[int, ...] = (), dtype: torch.dtype = torch.float64
    ) -> PoseSE3:
        R = torch.eye(3, dtype=dtype).expand(*batch, 3, 3).clone()
        return cls(R, torch.zeros(*batch, 3, dtype=dtype))

    @classmethod
    def from_matrix(cls, T: torch.Tensor) -> PoseSE3:
        return cls(T[..., :3, :3].clone(), T[..., :3, 3].clone())

    def matrix(self) -> torch.Tensor:
        """Homogeneous 4x4 form."""
        T = torch.zeros(*self.R.shape[:-2], 4, 4, dtype=self.R.dtype, device=self.R.device)
        T[..., :3, :3] = self.R
        T[..., :3, 3] = self.t
        T[..., 3, 3] = 1.0
        return T

    def __getitem__(self, i: int | slice) -> PoseSE3:
        return PoseSE3(self.R[i], self.t[i])

    def detach(self) -> PoseSE3:
        return PoseSE3(self.R.detach(), self.t.detach())

    def to(self, dtype: torch.dtype) -> PoseSE3:
        return PoseSE3(self.R.to(dtype), self.t.to(dtype))

    def check(self, tol: float = ROTATION_TOL) -> None:
        check_rotation(self.R, tol)
        if not bool(torch.isfinite(self.t).all()):
            raise InvalidRotationError("translation has non-finite entries")


# ===========================================================================
# Rotations
# ===========================================================================


def skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix [v]x of v[..., 3]."""
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        (
            torch.stack((zero, -z, y), -1),
            torch.stack((z, zero, -x), -1),
            torch.stack((-y, x, zero), -1),
        ),
        -2,
    )


def vee(S: torch.Tensor) -> torch.Tensor:
    """Inverse of skew on the antisymmetric part."""
    return torch.stack((S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]), -1)


def rodrigues(phi: torch.Tensor) -> torch.Tensor:
    """Axis-angle phi[..., 3] -> rotation matrix[..., 3, 3].

    R = I + a [phi]x + b [phi]x^2 with a = sin(t)/t, b = (1 - cos(t))/t^2,
    which is the unit-axis form I + sin(t) K + (1 - cos(t)) K^2. Below
    SMALL_ANGLE the second-order Taylor coefficients are used.
    """
    theta2 = (phi * phi).sum(-1)
    theta = torch.sqrt(theta2.clamp_min(SMALL_ANGLE**2))
    small = theta2 < SMALL_ANGLE**2
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / (theta * theta))
    K = skew(phi)
    eye = torch.eye(3, dtype=phi.dtype, device=phi.device).expand_as(K)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def check_rotation(R: torch.Tensor, tol: float = ROTATION_TOL) -> None:
    """Raise InvalidRotationError unless R^T R = I and det R = +1 within tol."""
    if R.shape[-2:] != (3, 3):
        raise InvalidRotationError(f"expected [..., 3, 3], got {tuple(R.shape)}")
    if not bool(torch.isfinite(R).all()):
        raise InvalidRotationError("matrix has non-finite entries")
    eye = torch.eye(3, dtype=R.dtype, device=R.device)
    ortho = float((R.transpose(-1, -2) @ R - eye).abs().max())
    if ortho > tol:
        raise InvalidRotationError(f"matrix is not orthonormal (max |R^T R - I| = {ortho:.3g})")
    if float((torch.linalg.det(R) - 1.0).abs().max()) > tol:
        raise InvalidRotationError("matrix has det != +1")


def log_rotation(R: torch.Tensor) -> torch.Tensor:
    """Rotation matrix[..., 3, 3] -> canonical axis-angle[..., 3] with angle in [0, pi]."""
    check_rotation(R)
    w = vee(R - R.transpose(-1, -2))  # 2 sin(theta) axis
    sin_theta = 0.5 * torch.linalg.vector_norm(w, dim=-1)
    cos_theta = 0.5 * (R.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
    theta = torch.atan2(sin_theta, cos_theta)

    small = theta < SMALL_ANGLE
    near_pi = (math.pi - theta) < NEAR_PI

    # General: theta / (2 sin theta) * w.
    safe_sin = torch.where(small | near_pi, torch.ones_like(sin_theta), sin_theta)
    factor = torch.where(small, 0.5 + theta * theta / 12.0, theta / (2.0 * safe_sin))
    phi = factor[..., None] * w

    if bool(near_pi.any()):
        # a a^T = (sym(R) - cos(theta) I) / (1 - cos(theta)), exact for every theta > 0.
        eye = torch.eye(3, dtype=R.dtype, device=R.device)
        sym = 0.5 * (R + R.transpose(-1, -2))
        aat = (sym - cos_theta[..., None, None] * eye) / (1.0 - cos_theta)[..., None, None]
        diag = aat.diagonal(dim1=-2, dim2=-1)
        idx = diag.argmax(-1)
        col = torch.take_along_dim(aat, idx[..., None, None].expand(*idx.shape, 3, 1), dim=-1)
        col = col[..., 0]
        pivot = torch.take_along_dim(diag, idx[..., None], dim=-1)
        axis = col / torch.sqrt(pivot.clamp_min(1e-300))
        sign = torch.where((axis * w).sum(-1) < 0, -1.0, 1.0).to(R.dtype)
        phi_pi = (sign * theta)[..., None] * axis
        phi = torch.where(near_pi[..., None], phi_pi, phi)
    return phi


def svd_orthogonalize(raw: torch.Tensor) -> torch.Tensor:
    """Nearest rotation (Frobenius) to raw[..., 3, 3]: U diag(1, 1, det(U V^T)) V^T."""
    if raw.shape[-2:] != (3, 3):
        raise DegenerateOrthogonalizationError(f"expected [..., 3, 3], got {tuple(raw.shape)}")
    U, S, Vh = torch.linalg.svd(raw)
    if bool((S[..., -1] <= 1e-12 * S[..., 0].clamp_min(1e-300)).any()):
        raise DegenerateOrthogonalizationError("9D rotation output is rank deficient")
    det = torch.linalg.det(U @ Vh)
    D = torch.ones_like(S)
    D[..., -1] = torch.sign(det)
    return U @ torch.diag_embed(D) @ Vh


def scale_head_outputs(
    phi_raw: torch.Tensor, t_raw: torch.Tensor, scale: float = POSE_OUTPUT_SCALE
) -> tuple[torch.Tensor, torch.Tensor]:
    """Permanent output gain on the pose head; applied before rodrigues."""
    return phi_raw * scale, t_raw * scale


# ===========================================================================
# Composition
# ===========================================================================


def compose(T1: PoseSE3, T2: PoseSE3) -> PoseSE3:
    """T1 after T2: (R1 R2, R1 t2 + t1)."""
    R = T1.R @ T2.R
    t = (T1.R @ T2.t[..., None])[..., 0] + T1.t
    return PoseSE3(R, t)


def invert(T: PoseSE3) -> PoseSE3:
    """(R^T, -R^T t)."""
    Rt = T.R.transpose(-1, -2)
    return PoseSE3(Rt, -(Rt @ T.t[..., None])[..., 0])


def rotation_angle(R: torch.Tensor) -> torch.Tensor:
    """Geodesic angle of R in [0, pi]."""
    w = vee(R - R.transpose(-1, -2))
    sin_theta = 0.5 * torch.linalg.vector_norm(w, dim=-1)
    cos_theta = 0.5 * (R.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
    return torch.atan2(sin_theta, cos_theta)
