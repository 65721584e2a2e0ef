"""Depth and trajectory evaluation: median scaling, depth errors, ATE."""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import logging

import numpy as np
import torch

from geometry import PoseSE3, compose
from util import AlignmentError, DegeneratePredictionError, NoValidPixelsError, RejectedInputError


log = logging.getLogger(__name__)

DELTA_THRESHOLD = 1.25
COLLINEAR_TOL = 1e-12


def _numpy(x: Any) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


# ===========================================================================
# Depth
# ===========================================================================


@dataclass(slots=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, items: Sequence[DepthMetrics]) -> DepthMetrics:
        if not items:
            raise RejectedInputError("no depth metrics to average")
        rows = np.array([[m.abs_rel, m.sq_rel, m.rmse, m.delta] for m in items])
        return cls(*(float(v) for v in rows.mean(axis=0)))


def _valid_mask(pred: np.ndarray, gt: np.ndarray, mask: Any | None) -> np.ndarray:
    if pred.shape != gt.shape:
        raise RejectedInputError(f"pred {pred.shape} and gt {gt.shape} differ")
    valid = (gt > 0) & np.isfinite(gt) & np.isfinite(pred)
    if mask is not None:
        valid &= _numpy(mask).astype(bool)
    if not valid.any():
        raise NoValidPixelsError("no overlapping valid pixels")
    return valid


def median_scale(pred: Any, gt: Any, mask: Any | None = None) -> np.ndarray:
    """pred * median(gt) / median(pred) over the valid pixels."""
    pred, gt = _numpy(pred), _numpy(gt)
    valid = _valid_mask(pred, gt, mask)
    med_pred = float(np.median(pred[valid]))
    if med_pred == 0:
        raise DegeneratePredictionError("median of predicted depth is zero")
    return pred * (float(np.median(gt[valid])) / med_pred)


def depth_metrics(pred: Any, gt: Any, mask: Any | None = None) -> DepthMetrics:
    """AbsRel, SqRel, RMSE and delta < 1.25 over valid pixels; pred already scaled."""
    pred, gt = _numpy(pred), _numpy(gt)
    valid = _valid_mask(pred, gt, mask)
    p, g = pred[valid], gt[valid]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        delta=float(np.mean(ratio < DELTA_THRESHOLD)),
    )


def evaluate_depths(
    preds: Sequence[Any],
    gts: Sequence[Any],
    masks: Sequence[Any] | None = None,
    workers: int = 4,
) -> tuple[DepthMetrics, list[DepthMetrics]]:
    """Median-scale each frame on its own, score it, and average over frames."""
    if len(preds) != len(gts) or not preds:
        raise RejectedInputError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    masks = list(masks) if masks is not None else [None] * len(preds)

    def one(args: tuple[Any, Any, Any]) -> DepthMetrics:
        pred, gt, mask = args
        return depth_metrics(median_scale(pred, gt, mask), gt, mask)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_frame = list(pool.map(one, zip(preds, gts, masks, strict=True)))
    return DepthMetrics.mean(per_frame), per_frame


# ===========================================================================
# Trajectory
# ===========================================================================


def accumulate_trajectory(relatives: PoseSE3) -> PoseSE3:
    """Chain N relative motions into N + 1 absolute poses starting at identity.

    T_abs[i] = T_abs[i - 1] * rel[i - 1], with rel the camera motion from
    frame i - 1 to frame i (the pose-network output convention).
    """
    if relatives.R.ndim != 3 or relatives.R.shape[0] < 1:
        raise RejectedInputError("need a batch of at least one relative pose")
    current = PoseSE3.identity(dtype=relatives.R.dtype)
    Rs, ts = [current.R], [current.t]
    for i in range(relatives.R.shape[0]):
        current = compose(current, relatives[i])
        Rs.append(current.R)
        ts.append(current.t)
    return PoseSE3(torch.stack(Rs), torch.stack(ts))


@dataclass(slots=True)
class ATEResult:
    ate_rmse: float
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    rigid: bool = False
    aligned: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def as_dict(self) -> dict[str, Any]:
        return {
            "ate_rmse": self.ate_rmse,
            "scale": self.scale,
            "rigid": self.rigid,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


def umeyama_alignment(
    pred: np.ndarray, gt: np.ndarray, with_scale: bool = True
) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares (R, t, s) with gt ~ s R pred + t; positions are (N, 3)."""
    n = pred.shape[0]
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    P, G = pred - mu_p, gt - mu_g
    var_p = float((P * P).sum()) / n
    if var_p <= 1e-300:
        raise AlignmentError("predicted positions have zero spread")
    cov = G.T @ P / n
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D)) / var_p if with_scale else 1.0
    t = mu_g - s * R @ mu_p
    return R, t, s


def ate(pred: Any, gt: Any, rigid: bool = False) -> ATEResult:
    """RMSE of position residuals after similarity (or rigid) alignment."""
    p = _positions(pred)
    g = _positions(gt)
    if p.shape != g.shape:
        raise AlignmentError(f"trajectory lengths differ: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[0] < 3:
        raise AlignmentError(f"need at least 3 poses, got {p.shape[0]}")
    sv = np.linalg.svd(g - g.mean(axis=0), compute_uv=False)
    if sv[1] <= COLLINEAR_TOL * max(sv[0], 1e-300):
        raise AlignmentError("ground-truth positions are collinear")
    R, t, s = umeyama_alignment(p, g, with_scale=not rigid)
    aligned = s * p @ R.T + t
    err = np.sqrt(np.mean(np.sum((aligned - g) ** 2, axis=1)))
    return ATEResult(float(err), R, t, s, rigid, aligned)


def _positions(traj: Any) -> np.ndarray:
    if isinstance(traj, PoseSE3):
        return _numpy(traj.t)
    arr = _numpy(traj)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise RejectedInputError(f"expected (N, 3) positions, got {arr.shape}")
    return arr


def bbox_diagonal(traj: Any) -> float:
    p = _positions(traj)
    return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


# ===========================================================================
# Reports
# ===========================================================================


@dataclass(slots=True)
class MetricsReport:
    depth: DepthMetrics | None = None
    per_frame: list[DepthMetrics] = field(default_factory=list)
    ate_sim3: ATEResult | None = None
    ate_rigid: ATEResult | None = None
    bbox_diagonal: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def rows(self) -> list[dict[str, Any]]:
        """JSON-lines records, one per metric group."""
        out: list[dict[str, Any]] = []
        if self.depth is not None:
            out.append({"kind": "depth", "frames": len(self.per_frame), **self.depth.as_dict()})
        for name, res in (("ate", self.ate_sim3), ("ate_rigid", self.ate_rigid)):
            if res is not None:
                row = {"kind": name, **res.as_dict()}
                if self.bbox_diagonal:
                    row["bbox_diagonal"] = self.bbox_diagonal
                    row["ate_over_diagonal"] = res.ate_rmse / self.bbox_diagonal
                out.append(row)
        for row in out:
            row.update(self.extra)
        return out
