"""Synthetic sequences: analytic surfaces, smooth camera paths, textured renders.

Poses are camera-to-world with frame 0 at the world origin. Depth comes from
closed-form ray/surface intersection; colors are read from a procedural
texture atlas through the same backproject / transform / sample primitives
the training warp uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import logging
import math

import numpy as np
import torch

from geometry import PoseSE3, compose, invert, rodrigues
from util import RejectedInputError, np_substream
from warp import Intrinsics, backproject, bilinear_sample, pixel_grid, transform_points


log = logging.getLogger(__name__)

SceneKind = Literal["textured-plane", "sphere-room", "two-plane"]
SCENE_KINDS: tuple[str, ...] = ("textured-plane", "sphere-room", "two-plane")

ATLAS_SIZE = 512
PLANE_SPAN = 8.0  # world units covered by the atlas on planar scenes

# n . X = c in world (frame 0) coordinates
PLANE = ((0.1, -0.05, 1.0), 3.0)
WEDGE = (((0.0, 0.0, 1.0), 3.2), ((-0.9, 0.0, 1.0), 2.4))
SPHERE_CENTER = (0.2, -0.1, 0.8)
SPHERE_RADIUS = 4.0

# Camera path, per frame. At depth 3 and focal = width the glide moves the
# image by about a third of a pixel per frame on 64 px frames.
GLIDE_SPEED = (0.014, 0.018)
FORWARD_SPEED = (0.001, 0.002)
SWAY_AMPLITUDE = (0.003, 0.006)
SWAY_PERIOD = (45.0, 90.0)  # frames
WOBBLE_AMPLITUDE = (0.001, 0.002)  # radians


@dataclass(slots=True)
class SceneSequence:
    kind: str
    seed: int
    frames: torch.Tensor  # (N, 3, H, W)
    depths: torch.Tensor  # (N, H, W)
    poses: PoseSE3  # (N,) camera-to-world
    relatives: PoseSE3  # (N - 1,) with poses[i + 1] = poses[i] * relatives[i]
    intrinsics: Intrinsics

    def __post_init__(self) -> None:
        n = self.frames.shape[0]
        if self.depths.shape[0] != n or self.poses.R.shape[0] != n:
            raise RejectedInputError(
                f"sequence lengths differ: {n} frames, {self.depths.shape[0]} depths, "
                f"{self.poses.R.shape[0]} poses"
            )
        if self.relatives.R.shape[0] != n - 1:
            raise RejectedInputError(f"expected {n - 1} relative poses")
        if not (torch.isfinite(self.relatives.R).all() and torch.isfinite(self.relatives.t).all()):
            raise RejectedInputError("relative poses contain non-finite values")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[-2]

    @property
    def width(self) -> int:
        return self.frames.shape[-1]

    def positions(self) -> np.ndarray:
        return self.poses.t.detach().cpu().numpy().astype(np.float64)


# ===========================================================================
# Surfaces
# ===========================================================================


def _rays(
    pose: PoseSE3, K: Intrinsics, height: int, width: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """World ray origin (3,) and directions (H, W, 3) with unit camera z."""
    grid = pixel_grid(height, width, pose.R.dtype)
    x = (grid[..., 0] - K.cx) / K.fx
    y = (grid[..., 1] - K.cy) / K.fy
    d_cam = torch.stack((x, y, torch.ones_like(x)), dim=-1)
    return pose.t, d_cam @ pose.R.T


def plane_depth(
    normal: tuple[float, float, float],
    offset: float,
    pose: PoseSE3,
    K: Intrinsics,
    height: int,
    width: int,
) -> torch.Tensor:
    """Camera-z depth of the plane n . X = c; inf where the ray misses it."""
    origin, dirs = _rays(pose, K, height, width)
    n = torch.tensor(normal, dtype=dirs.dtype)
    denom = dirs @ n
    lam = (offset - origin @ n) / torch.where(denom == 0, torch.ones_like(denom), denom)
    hit = (denom != 0) & (lam > 0)
    return torch.where(hit, lam, torch.full_like(lam, math.inf))


def sphere_depth(pose: PoseSE3, K: Intrinsics, height: int, width: int) -> torch.Tensor:
    """Camera-z depth of the far intersection with the room sphere."""
    origin, dirs = _rays(pose, K, height, width)
    oc = origin - torch.tensor(SPHERE_CENTER, dtype=dirs.dtype)
    a = (dirs * dirs).sum(-1)
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - SPHERE_RADIUS**2
    disc = b * b - 4.0 * a * c
    if bool((disc < 0).any()) or c >= 0:
        raise RejectedInputError("camera left the sphere room")
    return (-b + torch.sqrt(disc)) / (2.0 * a)


def analytic_depth(
    kind: str, pose: PoseSE3, K: Intrinsics, height: int, width: int
) -> torch.Tensor:
    if kind == "textured-plane":
        return plane_depth(*PLANE, pose, K, height, width)
    if kind == "two-plane":
        return torch.minimum(*(plane_depth(*p, pose, K, height, width) for p in WEDGE))
    if kind == "sphere-room":
        return sphere_depth(pose, K, height, width)
    raise RejectedInputError(f"Unknown scene kind: {kind!r} (expected one of {SCENE_KINDS})")


# ===========================================================================
# Texture
# ===========================================================================


def texture_atlas(seed: int, size: int = ATLAS_SIZE) -> torch.Tensor:
    """(1, 3, size, size) sum of seeded oriented sinusoids in [0.05, 0.95]."""
    rng = np_substream(seed, "scene.texture")
    ys, xs = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    channels = []
    for _ in range(3):
        acc = np.zeros((size, size))
        for _ in range(6):
            freq = rng.uniform(3.0, 12.0)
            angle = rng.uniform(0.0, math.pi)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            along = xs * math.cos(angle) + ys * math.sin(angle)
            acc += np.sin(2.0 * math.pi * freq * along + phase)
        acc = (acc - acc.min()) / (acc.max() - acc.min())
        channels.append(0.05 + 0.9 * acc)
    return torch.from_numpy(np.stack(channels))[None]


def _atlas_coords(kind: str, world: torch.Tensor, size: int) -> torch.Tensor:
    """World points (1, 3, H, W) -> atlas pixel coords (1, H, W, 2)."""
    X, Y, Z = world[0]
    if kind == "sphere-room":
        c = SPHERE_CENTER
        az = torch.atan2(X - c[0], Z - c[2])
        el = torch.atan2(Y - c[1], torch.hypot(X - c[0], Z - c[2]))
        u = (az + math.pi) / (2.0 * math.pi)
        v = (el + math.pi / 2) / math.pi
    else:
        u = X / PLANE_SPAN + 0.5
        v = Y / PLANE_SPAN + 0.5
    return torch.stack((u * (size - 1), v * (size - 1)), dim=-1)[None]


def render_frame(
    kind: str, atlas: torch.Tensor, pose: PoseSE3, K: Intrinsics, height: int, width: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """(image (3, H, W), depth (H, W)) seen from camera-to-world ``pose``."""
    depth = analytic_depth(kind, pose, K, height, width)
    points, _ = backproject(depth[None], K)
    world = transform_points(points, pose)
    image = bilinear_sample(atlas, _atlas_coords(kind, world, atlas.shape[-1]))
    return image[0].clamp(0.0, 1.0), depth


# ===========================================================================
# Trajectory
# ===========================================================================


def smooth_trajectory(seed: int, num_frames: int) -> PoseSE3:
    """Camera-to-world poses of a seeded glide over the surface; pose 0 = I.

    The camera drifts at constant velocity, mostly parallel to the image
    plane, with a slow sideways sway and a small rotational wobble on top.
    Speeds are per frame, so longer sequences cover more ground.
    """
    rng = np_substream(seed, "scene.trajectory")
    k = np.arange(num_frames, dtype=np.float64)[:, None]
    heading = rng.uniform(0.0, 2.0 * math.pi)
    along = np.array([math.cos(heading), math.sin(heading), 0.0])
    across = np.array([-math.sin(heading), math.cos(heading), 0.0])
    velocity = rng.uniform(*GLIDE_SPEED) * along
    velocity[2] = rng.uniform(*FORWARD_SPEED)
    sway = rng.uniform(*SWAY_AMPLITUDE) * np.sin(
        2.0 * math.pi * k / rng.uniform(*SWAY_PERIOD) + rng.uniform(0.0, 2.0 * math.pi)
    )
    pos = k * velocity + sway * across
    rot_amp = rng.uniform(*WOBBLE_AMPLITUDE, size=3)
    rot_period = rng.uniform(*SWAY_PERIOD, size=3)
    rot_phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    phi = rot_amp * np.sin(2.0 * math.pi * k / rot_period + rot_phase)
    raw = PoseSE3(rodrigues(torch.from_numpy(phi)), torch.from_numpy(pos))
    return compose(invert(raw[0]), raw)


def relative_motion(poses: PoseSE3) -> PoseSE3:
    """Consecutive camera motion poses[i]^-1 poses[i + 1]."""
    return compose(invert(poses[:-1]), poses[1:])


def generate_scene(
    seed: int,
    kind: str = "textured-plane",
    num_frames: int = 60,
    height: int = 64,
    width: int = 64,
) -> SceneSequence:
    """Deterministic per (seed, kind, size); everything is float64."""
    if kind not in SCENE_KINDS:
        raise RejectedInputError(f"Unknown scene kind: {kind!r} (expected one of {SCENE_KINDS})")
    if num_frames < 2 or height < 8 or width < 8:
        raise RejectedInputError(f"scene too small: {num_frames} frames of {height}x{width}")
    K = Intrinsics.centered(height, width)
    atlas = texture_atlas(seed)
    poses = smooth_trajectory(seed, num_frames)
    frames, depths = [], []
    for i in range(num_frames):
        image, depth = render_frame(kind, atlas, poses[i], K, height, width)
        if not bool(torch.isfinite(depth).all()):
            raise RejectedInputError(f"frame {i} sees past the {kind} surface")
        frames.append(image)
        depths.append(depth)
    log.info(
        "Generated %s scene: seed=%d frames=%d size=%dx%d", kind, seed, num_frames, width, height
    )
    return SceneSequence(
        kind=kind,
        seed=seed,
        frames=torch.stack(frames),
        depths=torch.stack(depths),
        poses=poses,
        relatives=relative_motion(poses),
        intrinsics=K,
    )
