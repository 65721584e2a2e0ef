"""Self-supervised objective: MS-SSIM + L1 reprojection loss and smoothness regularizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Literal

import logging
import math

import torch
import torch.nn.functional as F

from util import NoValidPixelsError, NonFiniteLossError, RejectedInputError


log = logging.getLogger(__name__)

Window = Literal["gaussian", "box"]

C1 = 0.01**2
C2 = 0.03**2
# Standard five-scale exponents; fewer scales use the leading entries renormalized.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


# ===========================================================================
# Data Types
# ===========================================================================


@dataclass(slots=True)
class LossConfig:
    alpha: float = 0.85
    beta: float = 0.15
    msssim_scales: int = 0  # 0 = automatic: 5 when H, W >= 160, else 3
    smoothness_weight: float = 1e-3
    window: Window = "gaussian"
    window_size: int = 11
    window_sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise RejectedInputError(
                f"need alpha, beta >= 0 with a positive sum: {self.alpha}, {self.beta}"
            )
        if self.msssim_scales < 0 or self.msssim_scales > len(MS_SSIM_WEIGHTS):
            raise RejectedInputError(f"msssim_scales must be in [0, 5], got {self.msssim_scales}")
        if self.smoothness_weight < 0:
            raise RejectedInputError("smoothness_weight must be >= 0")
        if self.window not in ("gaussian", "box") or self.window_size < 1:
            raise RejectedInputError(f"bad SSIM window: {self.window} / {self.window_size}")

    def scales_for(self, height: int, width: int) -> int:
        if self.msssim_scales:
            return self.msssim_scales
        return 5 if min(height, width) >= 160 else 3

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> LossConfig:
        return cls(
            alpha=settings["alpha"],
            beta=settings["beta"],
            msssim_scales=settings["msssim_scales"],
            smoothness_weight=settings["smoothness_weight"],
            window=settings["ssim_window"],
            window_size=settings["ssim_window_size"],
        )


@dataclass(slots=True)
class LossBreakdown:
    """L_ssl parts; tensors keep the graph for backward."""

    reproj: torch.Tensor
    tikhonov: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "reproj": float(self.reproj.detach()),
            "tikhonov": float(self.tikhonov.detach()),
            "total": float(self.total.detach()),
        }


# ===========================================================================
# SSIM
# ===========================================================================


def _window(cfg: LossConfig, channels: int, dtype: torch.dtype, device: Any) -> torch.Tensor:
    n = cfg.window_size
    if cfg.window == "box":
        g = torch.full((n,), 1.0 / n, dtype=dtype, device=device)
    else:
        x = torch.arange(n, dtype=dtype, device=device) - (n - 1) / 2.0
        g = torch.exp(-(x * x) / (2.0 * cfg.window_sigma**2))
        g = g / g.sum()
    kernel = g[:, None] * g[None, :]
    return kernel.expand(channels, 1, n, n).contiguous()


def _filter(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    return F.conv2d(x, kernel, groups=x.shape[1])


def ssim_maps(
    I1: torch.Tensor, I2: torch.Tensor, cfg: LossConfig = LossConfig()
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel (ssim, contrast-structure) maps over valid window positions.

    Map entry (i, j) describes the window whose top-left pixel is (i, j),
    i.e. centered at (i + n // 2, j + n // 2) for window size n.
    """
    if I1.shape != I2.shape or I1.ndim != 4:
        raise RejectedInputError(f"image shapes differ: {tuple(I1.shape)} vs {tuple(I2.shape)}")
    n = cfg.window_size
    if I1.shape[-2] < n or I1.shape[-1] < n:
        raise RejectedInputError(f"image {tuple(I1.shape[-2:])} smaller than SSIM window {n}")
    kernel = _window(cfg, I1.shape[1], I1.dtype, I1.device)
    mu1 = _filter(I1, kernel)
    mu2 = _filter(I2, kernel)
    sigma1 = _filter(I1 * I1, kernel) - mu1 * mu1
    sigma2 = _filter(I2 * I2, kernel) - mu2 * mu2
    sigma12 = _filter(I1 * I2, kernel) - mu1 * mu2
    cs = (2.0 * sigma12 + C2) / (sigma1 + sigma2 + C2)
    luminance = (2.0 * mu1 * mu2 + C1) / (mu1 * mu1 + mu2 * mu2 + C1)
    return luminance * cs, cs


def ssim(I1: torch.Tensor, I2: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel SSIM map (B, C, H - n + 1, W - n + 1)."""
    return ssim_maps(I1, I2, cfg)[0]


def _map_mask(mask: torch.Tensor, n: int) -> torch.Tensor:
    """Mask value at each window center, cropped to the valid-window map."""
    off = n // 2
    H, W = mask.shape[-2:]
    return mask[..., off : H - (n - 1 - off), off : W - (n - 1 - off)]


def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Per-image mean over channels and masked pixels -> (B,)."""
    if mask is None:
        return values.mean(dim=(1, 2, 3))
    m = mask[:, None].to(values.dtype).expand_as(values)
    count = m.sum(dim=(1, 2, 3))
    mean_all = values.mean(dim=(1, 2, 3))
    masked = (values * m).sum(dim=(1, 2, 3)) / count.clamp_min(1.0)
    # A scale whose valid windows all vanished falls back to the plain mean.
    return torch.where(count > 0, masked, mean_all)


def ms_ssim(
    I1: torch.Tensor,
    I2: torch.Tensor,
    scales: int = 3,
    cfg: LossConfig = LossConfig(),
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Multi-scale SSIM averaged over the batch.

    prod_{j < S-1} mean(cs_j)^w_j * mean(ssim_{S-1})^w_{S-1}; with more than
    one scale the per-scale means are clamped just above zero before
    exponentiation.
    """
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise RejectedInputError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    min_side = min(I1.shape[-2], I1.shape[-1]) // 2 ** (scales - 1)
    if min_side < cfg.window_size:
        raise RejectedInputError(
            f"image {tuple(I1.shape[-2:])} too small for {scales} scales "
            f"of window {cfg.window_size}"
        )
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=I1.dtype, device=I1.device)
    weights = weights / weights.sum()
    m = mask.to(I1.dtype) if mask is not None else None
    values = []
    for j in range(scales):
        s_map, cs_map = ssim_maps(I1, I2, cfg)
        mm = _map_mask(m, cfg.window_size) > 0.5 if m is not None else None
        values.append(_masked_mean(s_map if j == scales - 1 else cs_map, mm))
        if j < scales - 1:
            I1 = F.avg_pool2d(I1, 2)
            I2 = F.avg_pool2d(I2, 2)
            if m is not None:
                # A coarse pixel is valid only if all four children are.
                m = -F.max_pool2d(-m[:, None], 2)[:, 0]
    stacked = torch.stack(values, dim=0)  # (S, B)
    if scales == 1:
        return stacked[0].mean()
    stacked = stacked.clamp_min(1e-8)
    return torch.prod(stacked ** weights[:, None], dim=0).mean()


# ===========================================================================
# Loss Terms
# ===========================================================================


def reprojection_loss(
    target: torch.Tensor,
    synthesized: torch.Tensor,
    mask: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """alpha (1 - MS_SSIM) + beta mean|I_t - I_st|, both over valid-mask pixels.

    Invalid pixels of the synthesized view are replaced by the target before
    the SSIM windows read them, so no clamped border sample enters the loss.
    """
    if target.shape != synthesized.shape or mask.shape != (target.shape[0], *target.shape[2:]):
        raise RejectedInputError(
            f"shapes disagree: target {tuple(target.shape)}, "
            f"synthesized {tuple(synthesized.shape)}, mask {tuple(mask.shape)}"
        )
    mask = mask.bool()
    count = int(mask.sum())
    if count == 0:
        raise NoValidPixelsError("reprojection mask has no valid pixel")
    m = mask[:, None].expand_as(target)
    filled = torch.where(m, synthesized, target)
    l1 = (target - filled).abs().sum() / (count * target.shape[1])
    loss = cfg.beta * l1
    if cfg.alpha > 0:
        scales = cfg.scales_for(*target.shape[-2:])
        loss = loss + cfg.alpha * (1.0 - ms_ssim(target, filled, scales, cfg, mask))
    return loss


def tikhonov_regulariser(depth: torch.Tensor, image: torch.Tensor, weight: float) -> torch.Tensor:
    """Edge-aware first-order smoothness of mean-normalized inverse depth.

    weight * (mean |dx d*| e^{-|dx I|} + mean |dy d*| e^{-|dy I|}), d* = (1/D) / mean(1/D)
    per image, image gradients averaged over channels.
    """
    if depth.ndim != 3 or depth.shape != (image.shape[0], *image.shape[2:]):
        raise RejectedInputError(
            f"depth {tuple(depth.shape)} does not match image {tuple(image.shape)}"
        )
    disp = 1.0 / depth
    d_star = disp / disp.mean(dim=(1, 2), keepdim=True)
    dx_d = (d_star[:, :, 1:] - d_star[:, :, :-1]).abs()
    dy_d = (d_star[:, 1:, :] - d_star[:, :-1, :]).abs()
    dx_i = (image[..., 1:] - image[..., :-1]).abs().mean(dim=1)
    dy_i = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=1)
    smooth = (dx_d * torch.exp(-dx_i)).mean() + (dy_d * torch.exp(-dy_i)).mean()
    return weight * smooth


def total_loss(
    reproj: torch.Tensor, tikhonov: torch.Tensor, batch_index: int | None = None
) -> LossBreakdown:
    """L_ssl = L_reproj + L_tikhonov; non-finite parts abort."""
    reproj = torch.as_tensor(reproj)
    tikhonov = torch.as_tensor(tikhonov)
    parts = {"reproj": float(reproj.detach()), "tikhonov": float(tikhonov.detach())}
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError(parts, batch_index)
    return LossBreakdown(reproj, tikhonov, reproj + tikhonov)
