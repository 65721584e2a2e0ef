"""Differentiable pinhole reprojection and bilinear sampling.

Tensor layouts: images (B, C, H, W) in [0, 1], depths (B, H, W), point grids
(B, 3, H, W), pixel coordinates (B, H, W, 2) as (u, v) = (column, row).
Pixel centers sit at integer coordinates with the origin at the top-left.
"""

from __future__ import annotations

from dataclasses import dataclass

import logging

import torch

from geometry import PoseSE3
from util import RejectedInputError


log = logging.getLogger(__name__)

Z_MIN = 1e-4
SNAP_TOL = 1e-9  # sample offsets this close to a pixel center are exactly zero


@dataclass(frozen=True, slots=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise RejectedInputError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")

    @classmethod
    def centered(cls, height: int, width: int, focal: float | None = None) -> Intrinsics:
        """Square pixels, principal point at the image center."""
        f = float(width) if focal is None else focal
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)

    def check_bounds(self, height: int, width: int) -> None:
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise RejectedInputError(
                f"principal point ({self.cx}, {self.cy}) outside a {width}x{height} image"
            )

    def matrix(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=dtype
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


def pixel_grid(
    height: int, width: int, dtype: torch.dtype = torch.float64, device: torch.device | None = None
) -> torch.Tensor:
    """(H, W, 2) grid of (u, v) integer pixel coordinates."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((u, v), dim=-1)


# ===========================================================================
# Projection
# ===========================================================================


def backproject(depth: torch.Tensor, K: Intrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """(u, v) -> D[v, u] * ((u - cx) / fx, (v - cy) / fy, 1).

    Returns points (B, 3, H, W) and a validity mask (B, H, W) that is false
    where depth is not strictly positive.
    """
    if depth.ndim != 3:
        raise RejectedInputError(f"depth must be (B, H, W), got {tuple(depth.shape)}")
    _, H, W = depth.shape
    grid = pixel_grid(H, W, depth.dtype, depth.device)
    x = (grid[..., 0] - K.cx) / K.fx
    y = (grid[..., 1] - K.cy) / K.fy
    rays = torch.stack((x, y, torch.ones_like(x)), dim=0)  # (3, H, W)
    points = depth[:, None] * rays[None]
    return points, depth > 0


def transform_points(points: torch.Tensor, T: PoseSE3) -> torch.Tensor:
    """p -> R p + t on a (B, 3, H, W) grid; T may be batched (B) or single."""
    B = points.shape[0]
    R = T.R.expand(B, 3, 3) if T.R.ndim == 2 else T.R
    t = T.t.expand(B, 3) if T.t.ndim == 1 else T.t
    flat = points.reshape(B, 3, -1)
    return (R @ flat + t[..., None]).reshape(points.shape)


def project(
    points: torch.Tensor, K: Intrinsics, z_min: float = Z_MIN
) -> tuple[torch.Tensor, torch.Tensor]:
    """(x, y, z) -> (fx x / z + cx, fy y / z + cy).

    The mask is false where z <= z_min or the projection leaves
    [0, W - 1] x [0, H - 1]; masked coordinates are finite but meaningless.
    """
    _, _, H, W = points.shape
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    in_front = z > z_min
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    u = K.fx * x / z_safe + K.cx
    v = K.fy * y / z_safe + K.cy
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    return torch.stack((u, v), dim=-1), in_front & inside


# ===========================================================================
# Sampling
# ===========================================================================


def _snap_fraction(frac: torch.Tensor) -> torch.Tensor:
    """Zero the value of near-integer offsets while keeping their gradient."""
    near = (frac.abs() < SNAP_TOL) | ((1.0 - frac).abs() < SNAP_TOL)
    snapped = frac - frac.detach() + torch.where(frac > 0.5, 1.0, 0.0).to(frac.dtype)
    return torch.where(near, snapped, frac)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample image (B, C, H, W) at pixel coords (B, H', W', 2).

    Four-neighbour bilinear interpolation, coordinates clamped to the border.
    """
    B, C, H, W = image.shape
    if coords.shape[0] != B or coords.shape[-1] != 2:
        raise RejectedInputError(
            f"coords {tuple(coords.shape)} do not match image batch {B} with (u, v) pairs"
        )
    Ho, Wo = coords.shape[1], coords.shape[2]
    u = coords[..., 0].clamp(0, W - 1)
    v = coords[..., 1].clamp(0, H - 1)
    u0 = torch.floor(u).clamp(0, W - 1)
    v0 = torch.floor(v).clamp(0, H - 1)
    wu = _snap_fraction(u - u0)
    wv = _snap_fraction(v - v0)
    # A snapped fraction of 1.0 means the true sample is the next pixel.
    u0 = torch.where(wu >= 1.0, u0 + 1, u0).clamp(0, W - 1)
    v0 = torch.where(wv >= 1.0, v0 + 1, v0).clamp(0, H - 1)
    wu = torch.where(wu >= 1.0, wu - 1.0, wu)
    wv = torch.where(wv >= 1.0, wv - 1.0, wv)
    u1 = (u0 + 1).clamp(max=W - 1)
    v1 = (v0 + 1).clamp(max=H - 1)

    flat = image.reshape(B, C, H * W)

    def gather(vi: torch.Tensor, ui: torch.Tensor) -> torch.Tensor:
        idx = (vi * W + ui).long().reshape(B, 1, Ho * Wo).expand(B, C, Ho * Wo)
        return flat.gather(2, idx).reshape(B, C, Ho, Wo)

    wu = wu[:, None]
    wv = wv[:, None]
    top = gather(v0, u0) * (1 - wu) + gather(v0, u1) * wu
    bottom = gather(v1, u0) * (1 - wu) + gather(v1, u1) * wu
    return top * (1 - wv) + bottom * wv


def synthesize_view(
    image: torch.Tensor,
    depth: torch.Tensor,
    K: Intrinsics,
    T: PoseSE3,
    z_min: float = Z_MIN,
) -> tuple[torch.Tensor, torch.Tensor]:
    """pi(D, K, R, t, I): inverse warping of ``image`` onto the depth's pixel grid.

    Each grid pixel is backprojected with ``depth``, carried by T into the
    camera that captured ``image``, projected and bilinearly sampled there.
    Returns the warped image (B, C, H, W) and its validity mask (B, H, W).
    """
    if image.ndim != 4 or depth.shape != (image.shape[0], *image.shape[2:]):
        raise RejectedInputError(
            f"image {tuple(image.shape)} and depth {tuple(depth.shape)} do not agree"
        )
    points, valid_depth = backproject(depth, K)
    coords, valid_proj = project(transform_points(points, T), K, z_min)
    return bilinear_sample(image, coords), valid_depth & valid_proj
