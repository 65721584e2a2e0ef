"""Desk-scale depth and pose transformers with DoMoRA injection.

DepthNet: ViT encoder -> convolutional neck -> conv head -> sigmoid -> depth.
PoseNet: shared-weight ViT encoder on both images, a cross-attention decoder
on the first stream, and a two-layer head regressing axis-angle and
translation (scaled by 0.001, then Rodrigues). Only the source -> target
direction is computed. PoseCNN is the alternative pose branch: a small fully
trainable convolutional regressor on the stacked pair, for ablations.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from adapters import ADAPTER_KINDS, AdaptedLinear, CompressionScheme, RankVector
from geometry import POSE_OUTPUT_SCALE, PoseSE3, rodrigues, scale_head_outputs
from util import ConfigError, NumericalError, RejectedInputError, substream_seed


log = logging.getLogger(__name__)

POSE_BRANCHES = ("reloc3rx", "cnn")


# ===========================================================================
# Configuration
# ===========================================================================


@dataclass(slots=True)
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 0
    mlp_ratio: float = 4.0
    image_height: int = 64
    image_width: int = 64
    in_chans: int = 3

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 for 2D positional encoding")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} "
                f"not divisible by patch {self.patch_size}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w


@dataclass(slots=True)
class ModelConfig:
    depth: ViTConfig = field(default_factory=ViTConfig)
    pose: ViTConfig = field(default_factory=lambda: ViTConfig(decoder_layers=2))
    neck_channels: int = 32
    head_hidden: int = 128
    pool: str = "mean"
    d_min: float = 0.1
    d_max: float = 100.0
    pose_scale: float = POSE_OUTPUT_SCALE
    pose_branch: str = "reloc3rx"

    def __post_init__(self) -> None:
        if self.pose_branch not in POSE_BRANCHES:
            raise ConfigError(
                f"Unknown pose branch: {self.pose_branch!r} (expected one of {POSE_BRANCHES})"
            )
        if not 0 < self.d_min < self.d_max:
            raise ConfigError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.pool not in ("mean", "max"):
            raise ConfigError(f"Unknown token pooling: {self.pool!r}")

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> ModelConfig:
        common = dict(
            patch_size=settings["patch_size"],
            embed_dim=settings["embed_dim"],
            num_heads=settings["num_heads"],
            mlp_ratio=settings["mlp_ratio"],
            image_height=settings["image_size"],
            image_width=settings["image_size"],
        )
        return cls(
            depth=ViTConfig(encoder_layers=settings["depth_layers"], decoder_layers=0, **common),
            pose=ViTConfig(
                encoder_layers=settings["pose_encoder_layers"],
                decoder_layers=settings["pose_decoder_layers"],
                **common,
            ),
            neck_channels=settings["neck_channels"],
            head_hidden=settings["head_hidden"],
            pool=settings["pool"],
            d_min=settings["d_min"],
            d_max=settings["d_max"],
            pose_scale=settings["pose_scale"],
            pose_branch=settings["pose_branch"],
        )


# ===========================================================================
# Transformer Blocks
# ===========================================================================


def sincos_2d(height: int, width: int, dim: int) -> torch.Tensor:
    """Fixed (height * width, dim) positional encoding; half the channels per axis."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=torch.float64),
        torch.arange(width, dtype=torch.float64),
        indexing="ij",
    )
    out = []
    for pos in (ys.flatten(), xs.flatten()):
        angles = pos[:, None] * omega[None, :]
        out += [torch.sin(angles), torch.cos(angles)]
    return torch.cat(out, dim=1).float()


class Attention(nn.Module):
    """Multi-head attention; keys and values come from ``context`` when given."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q: nn.Module = nn.Linear(dim, dim, bias=False)
        self.k: nn.Module = nn.Linear(dim, dim, bias=False)
        self.v: nn.Module = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.num_heads, self.head_dim).transpose(1, 2)

    def weights(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        """Softmax attention rows (B, heads, T_query, T_key)."""
        context = x if context is None else context
        q = self._heads(self.q(x))
        k = self._heads(self.k(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        return scores.softmax(dim=-1)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        attn = self.weights(x, context)
        v = self._heads(self.v(context))
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Self-attention, cross-attention to the other stream, feed-forward."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_y = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), self.norm_y(y))
        return x + self.mlp(self.norm3(x))


class ViTEncoder(nn.Module):
    def __init__(self, cfg: ViTConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_chans, d, cfg.patch_size, stride=cfg.patch_size)
        self.register_buffer("pos_embed", sincos_2d(*cfg.grid, d), persistent=False)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_layers)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        expected = (cfg.in_chans, cfg.image_height, cfg.image_width)
        if image.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise RejectedInputError(f"image {tuple(image.shape)} does not match (B, {expected})")
        x = self.patch_embed(image).flatten(2).transpose(1, 2)
        x = x + self.pos_embed.to(x.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


# ===========================================================================
# Networks
# ===========================================================================


def disparity_to_depth(sigma: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    """depth = 1 / (sigma (1/d_min - 1/d_max) + 1/d_max), within [d_min, d_max]."""
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return 1.0 / (sigma * (hi - lo) + lo)


class DepthNet(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d, c = cfg.depth.embed_dim, cfg.neck_channels
        self.encoder = ViTEncoder(cfg.depth)
        self.neck = nn.Sequential(
            nn.Conv2d(d, c, 3, padding=1),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
        )
        self.head = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c // 2, 1, 3, padding=1),
        )

    def sigmoid_output(self, image: torch.Tensor) -> torch.Tensor:
        tokens = self.encoder(image)
        h, w = self.cfg.depth.grid
        grid = tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)
        logits = self.head(self.neck(grid))
        logits = F.interpolate(
            logits, size=image.shape[-2:], mode="bilinear", align_corners=False
        )
        return torch.sigmoid(logits[:, 0])

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> depth (B, H, W) in [d_min, d_max]."""
        return disparity_to_depth(self.sigmoid_output(image), self.cfg.d_min, self.cfg.d_max)


class PoseHead(nn.Module):
    """Pool tokens -> two feed-forward layers -> 6 raw values."""

    def __init__(self, dim: int, hidden: int, pool: str = "mean") -> None:
        super().__init__()
        self.pool = pool
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 6)

    def raw(self, G1: torch.Tensor) -> torch.Tensor:
        pooled = G1.mean(dim=1) if self.pool == "mean" else G1.amax(dim=1)
        return self.fc2(F.relu(self.fc1(pooled)))


def raw_to_pose(raw: torch.Tensor, scale: float = POSE_OUTPUT_SCALE) -> PoseSE3:
    """Scale the 6 raw outputs, then Rodrigues on the axis-angle half."""
    phi, t = scale_head_outputs(raw[..., :3], raw[..., 3:], scale)
    return PoseSE3(rodrigues(phi), t)


def pose_head_forward(
    G1: torch.Tensor, head: PoseHead, scale: float = POSE_OUTPUT_SCALE
) -> PoseSE3:
    return raw_to_pose(head.raw(G1), scale)


class PoseNet(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        p = cfg.pose
        self.encoder = ViTEncoder(p)
        self.decoder = nn.ModuleList(
            DecoderBlock(p.embed_dim, p.num_heads, p.mlp_ratio) for _ in range(p.decoder_layers)
        )
        self.dec_norm = nn.LayerNorm(p.embed_dim)
        self.head = PoseHead(p.embed_dim, cfg.head_hidden, cfg.pool)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image)

    def decode_pair(self, F1: torch.Tensor, F2: torch.Tensor) -> torch.Tensor:
        """G1: the first stream after every decoder block, keys/values from F2."""
        if F1.shape != F2.shape:
            raise RejectedInputError(f"token shapes differ: {tuple(F1.shape)} vs {tuple(F2.shape)}")
        x = F1
        for blk in self.decoder:
            x = blk(x, F2)
        return self.dec_norm(x)

    def raw_outputs(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        G1 = self.decode_pair(self.encode(source), self.encode(target))
        return self.head.raw(G1)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> PoseSE3:
        return raw_to_pose(self.raw_outputs(source, target), self.cfg.pose_scale)


class PoseCNN(nn.Module):
    """Convolutional pose branch on the channel-stacked pair, trained in full.

    Three strided convolutions, a 1x1 projection to 6 raw values per cell and
    a spatial mean; the raw values go through the same gain and Rodrigues map
    as the transformer branch.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.neck_channels
        self.convs = nn.Sequential(
            nn.Conv2d(6, c, 7, stride=2, padding=3),
            nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(2 * c, 6, 1)

    def raw_outputs(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if source.shape != target.shape:
            raise RejectedInputError(
                f"image shapes differ: {tuple(source.shape)} vs {tuple(target.shape)}"
            )
        features = self.convs(torch.cat((source, target), dim=1))
        return self.head(features).mean(dim=(2, 3))

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> PoseSE3:
        return raw_to_pose(self.raw_outputs(source, target), self.cfg.pose_scale)


class EndoFast(nn.Module):
    """Depth and pose networks trained jointly."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.depth_net = DepthNet(cfg)
        self.pose_net: PoseNet | PoseCNN = (
            PoseNet(cfg) if cfg.pose_branch == "reloc3rx" else PoseCNN(cfg)
        )
        self.adapter_info: dict[str, Any] = {}

    def blocks(self) -> list[tuple[str, nn.Module]]:
        """Every transformer block in rank-vector order."""
        out: list[tuple[str, nn.Module]] = []
        groups: list[tuple[str, Sequence[nn.Module]]] = [
            ("depth_net.encoder.blocks", self.depth_net.encoder.blocks)
        ]
        if isinstance(self.pose_net, PoseNet):
            groups += [
                ("pose_net.encoder.blocks", self.pose_net.encoder.blocks),
                ("pose_net.decoder", self.pose_net.decoder),
            ]
        for prefix, blocks in groups:
            out += [(f"{prefix}.{i}", b) for i, b in enumerate(blocks)]
        return out


def build_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> EndoFast:
    """Seeded stand-in for pretrained weights; deterministic per seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream_seed(seed, "backbone"))
        model = EndoFast(cfg)
    return model.to(dtype)


def depth_forward(image: torch.Tensor, model: EndoFast) -> torch.Tensor:
    return model.depth_net(image)


def _token_pose_net(model: EndoFast) -> PoseNet:
    if not isinstance(model.pose_net, PoseNet):
        raise ConfigError("the convolutional pose branch has no token encoder or decoder")
    return model.pose_net


def encode(image: torch.Tensor, model: EndoFast) -> torch.Tensor:
    return _token_pose_net(model).encode(image)


def decode_pair(F1: torch.Tensor, F2: torch.Tensor, model: EndoFast) -> torch.Tensor:
    return _token_pose_net(model).decode_pair(F1, F2)


def relative_pose(source: torch.Tensor, target: torch.Tensor, model: EndoFast) -> PoseSE3:
    """Source -> target pose only; the reverse direction is never evaluated."""
    return model.pose_net(source, target)


# ===========================================================================
# Adapter Injection and Partition
# ===========================================================================


def inject_adapters(
    model: EndoFast,
    ranks: RankVector,
    scheme: CompressionScheme = CompressionScheme(),
    kind: str = "domora",
    adapt_cross_attention: bool = False,
    seed: int = 0,
) -> EndoFast:
    """Wrap every q and v projection as an AdaptedLinear, one rank per block.

    Outputs are unchanged at injection time. k projections and MLPs stay bare.
    """
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"Unknown adapter kind: {kind!r} (expected one of {ADAPTER_KINDS})")
    if model.adapter_info:
        raise ConfigError("adapters are already injected")
    blocks = model.blocks()
    if len(ranks) != len(blocks):
        raise ConfigError(
            f"rank vector has {len(ranks)} entries for {len(blocks)} transformer blocks"
        )
    model.adapter_info = {
        "kind": kind,
        "ranks": list(ranks.ranks),
        "policy": ranks.policy,
        "scheme": scheme.mode,
        "rotation_base": scheme.base,
        "adapt_cross_attention": adapt_cross_attention,
    }
    if kind == "none":
        return model
    count = 0
    for i, ((name, blk), r) in enumerate(zip(blocks, ranks.ranks, strict=True)):
        attentions = [("attn", blk.attn)]
        if adapt_cross_attention and isinstance(blk, DecoderBlock):
            attentions.append(("cross_attn", blk.cross_attn))
        for attn_name, attn in attentions:
            for proj in ("q", "v"):
                base = getattr(attn, proj)
                if r > min(base.in_features, base.out_features):
                    raise ConfigError(f"{name}: rank {r} exceeds layer size {base.out_features}")
                layer_seed = substream_seed(seed, f"adapter.{i}.{attn_name}.{proj}")
                setattr(attn, proj, AdaptedLinear(base, r, scheme, kind, layer_seed))
                count += 1
    log.info("Injected %d %s adapters into %d blocks", count, kind, len(blocks))
    return model


@dataclass(slots=True)
class ParamPartition:
    frozen: tuple[str, ...]
    trainable: tuple[str, ...]
    sizes: dict[str, int]

    def is_trainable(self, name: str) -> bool:
        return name in self.trainable

    @property
    def trainable_count(self) -> int:
        return sum(self.sizes[n] for n in self.trainable)

    @property
    def total_count(self) -> int:
        return sum(self.sizes.values())

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_count / self.total_count


_TRAINABLE_PREFIXES = ("depth_net.neck.", "depth_net.head.", "pose_net.head.", "pose_net.convs.")


def _adapter_param_names(model: nn.Module) -> set[str]:
    names = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, AdaptedLinear):
            names.update(f"{mod_name}.{p}" for p in mod.adapter_parameters())
    return names


def partition_parameters(model: EndoFast) -> ParamPartition:
    """Freeze everything but adapters, the depth neck/head and the pose head.

    The convolutional pose branch has no pretrained backbone and trains in full.
    """
    adapter_names = _adapter_param_names(model)
    frozen, trainable, sizes = [], [], {}
    for name, p in model.named_parameters():
        sizes[name] = p.numel()
        train = name in adapter_names or name.startswith(_TRAINABLE_PREFIXES)
        p.requires_grad_(train)
        (trainable if train else frozen).append(name)
    return ParamPartition(tuple(frozen), tuple(trainable), sizes)


def expected_trainable_count(model: EndoFast) -> int:
    """Closed form: sum of per-adapter counts plus the neck/head sizes."""
    total = sum(m.trainable_count() for m in model.modules() if isinstance(m, AdaptedLinear))
    heads: list[nn.Module] = [model.depth_net.neck, model.depth_net.head, model.pose_net.head]
    if isinstance(model.pose_net, PoseCNN):
        heads.append(model.pose_net.convs)
    for mod in heads:
        total += sum(p.numel() for p in mod.parameters())
    return total


def adapted_layers(model: nn.Module) -> list[tuple[str, AdaptedLinear]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, AdaptedLinear)]


# ===========================================================================
# Gradient Checking
# ===========================================================================


@dataclass(slots=True)
class GradCheckResult:
    name: str
    max_rel_error: float
    threshold: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def as_dict(self) -> dict[str, Any]:
        return {
            "check": self.name,
            "max_rel_error": self.max_rel_error,
            "threshold": self.threshold,
            "passed": self.passed,
        }


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]],
    eps: float = 1e-5,
    max_scalars: int = 5000,
) -> tuple[float, dict[str, float]]:
    """Compare autograd against central differences.

    The error is max |analytic - numeric| over all checked scalars divided
    by the largest gradient magnitude among them. Parameters must require
    grad; use float64 for meaningful results.
    """
    total = sum(p.numel() for _, p in params)
    if total > max_scalars:
        raise RejectedInputError(
            f"{total} scalars exceed the finite-difference budget {max_scalars}"
        )
    for name, p in params:
        if not p.requires_grad:
            raise RejectedInputError(f"{name} does not require grad")
    tensors = [p for _, p in params]
    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    analytic = [
        torch.zeros_like(p) if g is None else g
        for p, g in zip(tensors, analytic, strict=True)
    ]
    for (name, _), g in zip(params, analytic, strict=True):
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite analytic gradient for {name}")

    numeric = []
    with torch.no_grad():
        for p in tensors:
            flat = p.view(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = float(loss_fn())
                flat[i] = orig - eps
                minus = float(loss_fn())
                flat[i] = orig
                grad[i] = (plus - minus) / (2 * eps)
            numeric.append(grad.view_as(p))
    for (name, _), g in zip(params, numeric, strict=True):
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite numeric gradient for {name}")

    scale = max(max(float(g.abs().max()) for g in numeric + analytic), 1e-30)
    per_param = {
        name: float((a - n).abs().max()) / scale
        for (name, _), a, n in zip(params, analytic, numeric, strict=True)
    }
    return max(per_param.values()), per_param


def _randomize(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)


def grad_check_suite(which: str = "all") -> list[GradCheckResult]:
    """Finite-difference checks of the trainable paths, in float64."""
    from losses import LossConfig, reprojection_loss
    from warp import Intrinsics, synthesize_view

    dt = torch.float64
    results: list[GradCheckResult] = []
    gen = torch.Generator().manual_seed(0)

    def trainables(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
        return [(n, p) for n, p in module.named_parameters() if p.requires_grad]

    if which in ("all", "adapters"):
        base = nn.Linear(8, 6, bias=False).to(dt)
        layer = AdaptedLinear(base, 3, CompressionScheme(), "domora", 1)
        _randomize(layer, 1)
        x = torch.randn(5, 8, generator=gen, dtype=dt)
        err, per = grad_check(lambda: (layer(x) ** 2).sum(), trainables(layer))
        results.append(GradCheckResult("adapted_linear", err, 1e-6, per))

    if which in ("all", "encoder"):
        blk = EncoderBlock(8, 2, 2.0).to(dt)
        _randomize(blk, 2)
        blk.requires_grad_(False)
        blk.attn.q = AdaptedLinear(blk.attn.q, 2, CompressionScheme(), "domora", 3)
        blk.attn.v = AdaptedLinear(blk.attn.v, 2, CompressionScheme(), "domora", 4)
        _randomize(blk.attn.q, 5)
        _randomize(blk.attn.v, 6)
        blk.attn.q.base.requires_grad_(False)
        blk.attn.v.base.requires_grad_(False)
        x = torch.randn(1, 4, 8, generator=gen, dtype=dt)
        err, per = grad_check(lambda: (blk(x) ** 2).sum(), trainables(blk))
        results.append(GradCheckResult("encoder_block", err, 1e-4, per))

    if which in ("all", "decoder"):
        blk = DecoderBlock(8, 2, 2.0).to(dt)
        _randomize(blk, 7)
        blk.requires_grad_(False)
        for attn in (blk.attn, blk.cross_attn):
            attn.q = AdaptedLinear(attn.q, 2, CompressionScheme(), "domora", 8)
            attn.v = AdaptedLinear(attn.v, 2, CompressionScheme(), "domora", 9)
            _randomize(attn.q, 10)
            _randomize(attn.v, 11)
            attn.q.base.requires_grad_(False)
            attn.v.base.requires_grad_(False)
        x = torch.randn(1, 4, 8, generator=gen, dtype=dt)
        y = torch.randn(1, 4, 8, generator=gen, dtype=dt)
        err, per = grad_check(lambda: (blk(x, y) ** 2).sum(), trainables(blk))
        results.append(GradCheckResult("decoder_block", err, 1e-4, per))

    if which in ("all", "warp"):
        K = Intrinsics.centered(8, 8, focal=8.0)
        image = torch.rand(1, 3, 8, 8, generator=gen, dtype=dt)
        target = torch.rand(1, 3, 8, 8, generator=gen, dtype=dt)
        depth = (2.0 + torch.rand(1, 8, 8, generator=gen, dtype=dt)).requires_grad_(True)
        pose = PoseSE3(
            rodrigues(torch.tensor([[0.01, -0.02, 0.015]], dtype=dt)),
            torch.tensor([[0.13, 0.07, 0.02]], dtype=dt),
        )
        cfg = LossConfig(window="box", window_size=3, msssim_scales=1)
        with torch.no_grad():
            _, mask = synthesize_view(image, depth, K, pose)

        def loss() -> torch.Tensor:
            warped, _ = synthesize_view(image, depth, K, pose)
            return reprojection_loss(target, warped, mask, cfg)

        err, per = grad_check(loss, [("depth", depth)])
        results.append(GradCheckResult("warp_depth", err, 1e-3, per))

    if not results:
        raise ConfigError(f"Unknown grad-check module: {which!r}")
    return results
