"""LoRA / DoRA / MoRA / DoMoRA adapters over frozen linear maps.

Conventions: a layer maps R^k -> R^d with weight W0 of shape (d, k). Inputs
are row vectors with any leading batch shape, ``x[..., k]``; ``M @ c`` for a
column vector is written ``c @ M.T`` on rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import logging
import math

import torch
from torch import nn

from util import DegenerateDirectionError, RejectedInputError, substream


log = logging.getLogger(__name__)

CompressionMode = Literal["truncation-sum", "rotation"]
AdapterKind = Literal["none", "lora", "dora", "mora", "domora"]
RankPolicy = Literal["linear", "constant"]

ADAPTER_KINDS: tuple[str, ...] = ("none", "lora", "dora", "mora", "domora")
ROTATION_BASE = 10000.0


# ===========================================================================
# Data Types
# ===========================================================================


@dataclass(frozen=True, slots=True)
class FrozenLinear:
    """Pre-trained weight W0 (d x k); never updated."""

    W0: torch.Tensor

    def __post_init__(self) -> None:
        if self.W0.ndim != 2 or self.W0.shape[0] < 1 or self.W0.shape[1] < 1:
            raise RejectedInputError(f"W0 must be a non-empty matrix, got {tuple(self.W0.shape)}")
        if not bool(torch.isfinite(self.W0).all()):
            raise RejectedInputError("W0 has non-finite entries")
        object.__setattr__(self, "W0", self.W0.detach().clone())

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def k(self) -> int:
        return self.W0.shape[1]


@dataclass(slots=True)
class AdapterParams:
    m: torch.Tensor  # (k,)
    B: torch.Tensor  # (d, r)
    A: torch.Tensor  # (r, k)
    M: torch.Tensor  # (r, r)

    @property
    def r(self) -> int:
        return self.A.shape[0]

    def check(self, layer: FrozenLinear) -> None:
        d, k, r = layer.d, layer.k, self.r
        expected = {"m": (k,), "B": (d, r), "A": (r, k), "M": (r, r)}
        for name, shape in expected.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise RejectedInputError(f"{name} has shape {got}, expected {shape}")
        if r > min(d, k):
            raise RejectedInputError(f"rank {r} exceeds min(d={d}, k={k})")


@dataclass(frozen=True, slots=True)
class CompressionScheme:
    """Non-parameterized compression k -> r and decompression r -> d.

    Segment j of the rotation mode rotates coordinate pair (2i, 2i+1) by
    j * base**(-2i / r); segment 0 is never rotated.
    """

    mode: CompressionMode = "truncation-sum"
    base: float = ROTATION_BASE

    def __post_init__(self) -> None:
        if self.mode not in ("truncation-sum", "rotation"):
            raise RejectedInputError(f"Unknown compression mode: {self.mode!r}")


@dataclass(frozen=True, slots=True)
class RankVector:
    ranks: tuple[int, ...]
    policy: str = "constant"

    def __len__(self) -> int:
        return len(self.ranks)

    def __getitem__(self, i: int) -> int:
        return self.ranks[i]

    def validate(self, dims: list[tuple[int, int]]) -> None:
        """Check one (d, k) per adapted layer and r <= min(d, k) for each."""
        if len(dims) != len(self.ranks):
            raise RejectedInputError(
                f"rank vector has {len(self.ranks)} entries for {len(dims)} layers"
            )
        for i, (r, (d, k)) in enumerate(zip(self.ranks, dims, strict=True)):
            if not 1 <= r <= min(d, k):
                raise RejectedInputError(f"layer {i}: rank {r} outside [1, min({d}, {k})]")


# ===========================================================================
# Compression
# ===========================================================================


def _segment_angles(
    num_segments: int, r: int, base: float, dtype: torch.dtype, device: torch.device
) -> torch.Tensor:
    """Angles (num_segments, r // 2) for segment j, pair i: j * base**(-2i/r)."""
    j = torch.arange(num_segments, dtype=dtype, device=device)[:, None]
    i = torch.arange(r // 2, dtype=dtype, device=device)[None, :]
    return j * base ** (-2.0 * i / r)


def _rotate_segments(seg: torch.Tensor, base: float, sign: float) -> torch.Tensor:
    """Rotate each segment of seg[..., n, r] by its planar angles times sign."""
    n, r = seg.shape[-2], seg.shape[-1]
    half = r // 2
    if half == 0:
        return seg
    theta = sign * _segment_angles(n, r, base, seg.dtype, seg.device)
    cos, sin = torch.cos(theta), torch.sin(theta)
    even = seg[..., : 2 * half : 2]
    odd = seg[..., 1 : 2 * half : 2]
    rot_even = cos * even - sin * odd
    rot_odd = sin * even + cos * odd
    pairs = torch.stack((rot_even, rot_odd), dim=-1).flatten(-2)
    return torch.cat((pairs, seg[..., 2 * half :]), dim=-1)


def compress(
    x: torch.Tensor, r: int, scheme: CompressionScheme = CompressionScheme()
) -> torch.Tensor:
    """Map x[..., k] to [..., r] by summing zero-padded length-r segments."""
    k = x.shape[-1]
    if not 1 <= r <= k:
        raise RejectedInputError(f"compress: rank {r} outside [1, k={k}]")
    n = math.ceil(k / r)
    padded = nn.functional.pad(x, (0, n * r - k))
    seg = padded.reshape(*x.shape[:-1], n, r)
    if scheme.mode == "rotation":
        seg = _rotate_segments(seg, scheme.base, 1.0)
    return seg.sum(dim=-2)


def decompress(
    z: torch.Tensor, d: int, scheme: CompressionScheme = CompressionScheme()
) -> torch.Tensor:
    """Map z[..., r] to [..., d] by tiling and truncating."""
    r = z.shape[-1]
    if not 1 <= r <= d:
        raise RejectedInputError(f"decompress: rank {r} outside [1, d={d}]")
    n = math.ceil(d / r)
    tiles = z.unsqueeze(-2).expand(*z.shape[:-1], n, r)
    if scheme.mode == "rotation":
        tiles = _rotate_segments(tiles, scheme.base, -1.0)
    return tiles.reshape(*z.shape[:-1], n * r)[..., :d]


# ===========================================================================
# Forwards
# ===========================================================================


def column_norms(W: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of each column of W (d x k) -> (k,)."""
    return torch.linalg.vector_norm(W, dim=0)


def _check_x(layer: FrozenLinear, x: torch.Tensor) -> None:
    if x.shape[-1] != layer.k:
        raise RejectedInputError(f"input has {x.shape[-1]} features, layer expects {layer.k}")


def lora_forward(
    layer: FrozenLinear, B: torch.Tensor, A: torch.Tensor, x: torch.Tensor
) -> torch.Tensor:
    """W0 x + B (A x)."""
    _check_x(layer, x)
    if B.ndim != 2 or A.ndim != 2 or B.shape[0] != layer.d or A.shape[1] != layer.k:
        raise RejectedInputError(
            f"B {tuple(B.shape)} / A {tuple(A.shape)} do not fit W0 {tuple(layer.W0.shape)}"
        )
    if B.shape[1] != A.shape[0]:
        raise RejectedInputError(f"B has rank {B.shape[1]} but A has rank {A.shape[0]}")
    return x @ layer.W0.T + (x @ A.T) @ B.T


def mora_branch(
    M: torch.Tensor, x: torch.Tensor, d: int, scheme: CompressionScheme
) -> torch.Tensor:
    """decompress(M compress(x)) without the frozen term."""
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise RejectedInputError(f"M must be square, got {tuple(M.shape)}")
    return decompress(compress(x, M.shape[0], scheme) @ M.T, d, scheme)


def _check_m(layer: FrozenLinear, M: torch.Tensor, x: torch.Tensor) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise RejectedInputError(f"M must be square, got {tuple(M.shape)}")
    if not 1 <= M.shape[0] <= min(layer.d, layer.k):
        raise RejectedInputError(
            f"M rank {M.shape[0]} outside [1, min(d, k)={min(layer.d, layer.k)}]"
        )
    if M.dtype != layer.W0.dtype or x.dtype != layer.W0.dtype:
        raise RejectedInputError(f"dtypes differ: W0 {layer.W0.dtype}, M {M.dtype}, x {x.dtype}")


def mora_forward(
    layer: FrozenLinear,
    M: torch.Tensor,
    x: torch.Tensor,
    scheme: CompressionScheme = CompressionScheme(),
) -> torch.Tensor:
    """W0 x + decompress(M compress(x))."""
    _check_m(layer, M, x)
    _check_x(layer, x)
    return x @ layer.W0.T + mora_branch(M, x, layer.d, scheme)


def dora_effective_weight(
    layer: FrozenLinear, m: torch.Tensor, B: torch.Tensor, A: torch.Tensor
) -> torch.Tensor:
    """W' = m * (W0 + BA) / ||W0 + BA||_c, column-wise."""
    V = layer.W0 + B @ A
    norms = column_norms(V)
    if bool((norms == 0).any()):
        cols = torch.nonzero(norms == 0).flatten().tolist()
        raise DegenerateDirectionError(f"W0 + BA has zero columns: {cols}")
    return V * (m / norms)


def domora_forward(
    layer: FrozenLinear,
    params: AdapterParams,
    x: torch.Tensor,
    scheme: CompressionScheme = CompressionScheme(),
) -> torch.Tensor:
    """W' x + decompress(M compress(x)); the MoRA branch sits outside the normalization."""
    _check_x(layer, x)
    params.check(layer)
    W = dora_effective_weight(layer, params.m, params.B, params.A)
    return x @ W.T + mora_branch(params.M, x, layer.d, scheme)


# ===========================================================================
# Initialization and Ranks
# ===========================================================================


def init_adapter(layer: FrozenLinear, r: int, seed: int) -> AdapterParams:
    """Zero-update initialization: domora_forward equals W0 x exactly."""
    d, k = layer.d, layer.k
    if not 1 <= r <= min(d, k):
        raise RejectedInputError(f"rank {r} outside [1, min(d={d}, k={k})]")
    dtype = layer.W0.dtype
    bound = 1.0 / math.sqrt(k)
    gen = substream(seed, "adapter.A")
    A = (torch.rand(r, k, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound
    return AdapterParams(
        m=column_norms(layer.W0),
        B=torch.zeros(d, r, dtype=dtype),
        A=A.to(dtype),
        M=torch.zeros(r, r, dtype=dtype),
    )


def parameter_count(d: int, k: int, r: int, kind: str = "domora") -> int:
    """Trainable scalars one adapted layer adds."""
    counts = {
        "none": 0,
        "lora": r * (d + k),
        "dora": k + r * (d + k),
        "mora": r * r,
        "domora": k + r * (d + k) + r * r,
    }
    if kind not in counts:
        raise RejectedInputError(f"Unknown adapter kind: {kind!r}")
    return counts[kind]


def rank_vector(num_layers: int, base_rank: int, policy: str = "linear") -> RankVector:
    """Per-layer ranks; "linear" decreases from base_rank to max(1, base_rank / 2)."""
    if num_layers < 1 or base_rank < 1:
        raise RejectedInputError(
            f"need num_layers >= 1 and base_rank >= 1, got {num_layers}, {base_rank}"
        )
    if policy not in ("linear", "constant"):
        raise RejectedInputError(f"Unknown rank policy: {policy!r}")
    if policy == "constant" or num_layers == 1:
        return RankVector(tuple([base_rank] * num_layers), policy)
    end = max(1.0, base_rank / 2)
    ranks = []
    for i in range(num_layers):
        value = base_rank + (end - base_rank) * i / (num_layers - 1)
        ranks.append(max(1, math.floor(value + 0.5)))
    return RankVector(tuple(ranks), policy)


# ===========================================================================
# Torch Module
# ===========================================================================


class AdaptedLinear(nn.Module):
    """A frozen nn.Linear plus the trainable parameters of one adapter kind.

    The base weight and bias stay in ``self.base`` with requires_grad off.
    Parameters a kind does not use are not created.
    """

    def __init__(
        self,
        base: nn.Linear,
        rank: int,
        scheme: CompressionScheme = CompressionScheme(),
        kind: str = "domora",
        seed: int = 0,
    ) -> None:
        super().__init__()
        if kind not in ADAPTER_KINDS or kind == "none":
            raise RejectedInputError(f"Cannot build an AdaptedLinear of kind {kind!r}")
        self.base = base
        self.base.requires_grad_(False)
        self.rank = rank
        self.scheme = scheme
        self.kind = kind
        init = init_adapter(FrozenLinear(base.weight.detach()), rank, seed)
        if kind in ("dora", "domora"):
            self.m = nn.Parameter(init.m)
        if kind in ("lora", "dora", "domora"):
            self.B = nn.Parameter(init.B)
            self.A = nn.Parameter(init.A)
        if kind in ("mora", "domora"):
            self.M = nn.Parameter(init.M)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def adapter_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters(recurse=False)}

    def trainable_count(self) -> int:
        return parameter_count(self.out_features, self.in_features, self.rank, self.kind)

    def params(self) -> AdapterParams:
        """Current values as AdapterParams (kinds without m/M use the neutral values)."""
        W0 = self.base.weight
        return AdapterParams(
            m=getattr(self, "m", column_norms(W0)),
            B=getattr(self, "B", torch.zeros_like(W0[:, : self.rank])),
            A=getattr(self, "A", torch.zeros_like(W0[: self.rank])),
            M=getattr(self, "M", torch.zeros_like(W0[: self.rank, : self.rank])),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        W0 = self.base.weight
        d = self.out_features
        if self.kind == "lora":
            out = x @ W0.T + (x @ self.A.T) @ self.B.T
        elif self.kind == "mora":
            out = x @ W0.T + mora_branch(self.M, x, d, self.scheme)
        else:
            V = W0 + self.B @ self.A
            norms = column_norms(V)
            if bool((norms == 0).any()):
                raise DegenerateDirectionError("W0 + BA has a zero column")
            out = x @ (V * (self.m / norms)).T
            if self.kind == "domora":
                out = out + mora_branch(self.M, x, d, self.scheme)
        if self.base.bias is not None:
            out = out + self.base.bias
        return out

    def extra_repr(self) -> str:
        return (
            f"in={self.in_features}, out={self.out_features}, rank={self.rank}, "
            f"kind={self.kind}, scheme={self.scheme.mode}"
        )
