"""Self-supervised training of the adapted depth and pose networks, and evaluation.

Pairs are consecutive frames (s = i, t = i + 1). The depth network runs on
the source frame, the pose network on (source, target) and predicts the
camera motion from s to t. The target image is sampled at the source
pixels' reprojections and compared with the source image.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import logging
import queue
import threading

import torch

from adapters import CompressionScheme, rank_vector
from config import provenance
from geometry import PoseSE3, invert
from losses import LossBreakdown, LossConfig, reprojection_loss, tikhonov_regulariser, total_loss
from metrics import (
    ATEResult,
    MetricsReport,
    accumulate_trajectory,
    ate,
    bbox_diagonal,
    evaluate_depths,
)
from nets import (
    EndoFast,
    ModelConfig,
    ParamPartition,
    build_model,
    inject_adapters,
    partition_parameters,
)
from scene import SceneSequence
from util import ConfigError, np_substream, torch_dtype
from warp import Z_MIN, Intrinsics, synthesize_view


log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOSS_LOG_HEADER = ("step", "reproj", "tikhonov", "total", "learning_rate")


# ===========================================================================
# Configuration
# ===========================================================================


@dataclass(slots=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    lr_decay_unit: str = "epochs"
    batch_size: int = 4
    epochs: int = 10
    max_steps: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    rank_policy: str = "linear"
    z_min: float = Z_MIN
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ConfigError("lr_decay_factor must be > 0 and lr_decay_every >= 1")
        if self.lr_decay_unit not in ("epochs", "steps"):
            raise ConfigError(
                f"lr_decay_unit must be 'epochs' or 'steps', got {self.lr_decay_unit!r}"
            )
        if self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("batch_size and epochs must be >= 1, max_steps >= 0")
        torch_dtype(self.dtype)

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> TrainConfig:
        return cls(
            learning_rate=settings["learning_rate"],
            lr_decay_factor=settings["lr_decay_factor"],
            lr_decay_every=settings["lr_decay_every"],
            lr_decay_unit=settings["lr_decay_unit"],
            batch_size=settings["batch_size"],
            epochs=settings["epochs"],
            max_steps=settings["max_steps"],
            seed=settings["seed"],
            loss=LossConfig.from_settings(settings),
            rank_policy=settings["rank_policy"],
            z_min=settings["z_min"],
            dtype=settings["dtype"],
        )


def lr_schedule(index: int, cfg: TrainConfig) -> float:
    """learning_rate * decay_factor ** floor(index / decay_every).

    ``index`` is the epoch or the global step, per cfg.lr_decay_unit.
    """
    if index < 0:
        raise ConfigError(f"schedule index must be >= 0, got {index}")
    return cfg.learning_rate * cfg.lr_decay_factor ** (index // cfg.lr_decay_every)


# ===========================================================================
# Model Setup
# ===========================================================================


def build_adapted_model(settings: dict[str, Any]) -> tuple[EndoFast, ParamPartition]:
    """Seeded backbone, adapters per the settings, and the parameter partition."""
    dtype = torch_dtype(settings["dtype"])
    model = build_model(ModelConfig.from_settings(settings), settings["seed"], dtype)
    ranks = rank_vector(len(model.blocks()), settings["base_rank"], settings["rank_policy"])
    scheme = CompressionScheme(settings["compression"], settings["rotation_base"])
    inject_adapters(
        model,
        ranks,
        scheme,
        kind=settings["adapter_kind"],
        adapt_cross_attention=settings["adapt_cross_attention"],
        seed=settings["seed"],
    )
    return model, partition_parameters(model)


def make_optimizer(model: EndoFast, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError("model has no trainable parameters")
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


# ===========================================================================
# Steps
# ===========================================================================


Batch = tuple[torch.Tensor, torch.Tensor]


def compute_loss(
    batch: Batch,
    model: EndoFast,
    K: Intrinsics,
    cfg: TrainConfig,
    batch_index: int | None = None,
) -> LossBreakdown:
    source, target = batch
    depth = model.depth_net(source)
    motion = model.pose_net(source, target)
    # source-camera points -> target camera is the inverse of the camera motion
    warped, mask = synthesize_view(target, depth, K, invert(motion), cfg.z_min)
    reproj = reprojection_loss(source, warped, mask, cfg.loss)
    tikhonov = tikhonov_regulariser(depth, source, cfg.loss.smoothness_weight)
    return total_loss(reproj, tikhonov, batch_index)


def train_step(
    batch: Batch,
    model: EndoFast,
    optimizer: torch.optim.Optimizer,
    K: Intrinsics,
    cfg: TrainConfig,
    batch_index: int | None = None,
) -> LossBreakdown:
    """One Adam step on the trainable partition; returns the pre-step loss."""
    optimizer.zero_grad(set_to_none=True)
    parts = compute_loss(batch, model, K, cfg, batch_index)
    parts.total.backward()
    optimizer.step()
    return LossBreakdown(parts.reproj.detach(), parts.tikhonov.detach(), parts.total.detach())


def epoch_batches(num_pairs: int, epoch: int, cfg: TrainConfig) -> list[list[int]]:
    """Source indices per batch; a seeded permutation of pairs for this epoch."""
    order = np_substream(cfg.seed, f"epoch.{epoch}").permutation(num_pairs)
    return [
        [int(i) for i in order[k : k + cfg.batch_size]]
        for k in range(0, num_pairs, cfg.batch_size)
    ]


def prefetch(
    scene: SceneSequence, plan: Sequence[list[int]], dtype: torch.dtype
) -> Iterator[Batch]:
    """Assemble batches on a daemon thread through a two-slot queue."""
    slots: queue.Queue[Any] = queue.Queue(maxsize=2)
    stop = threading.Event()
    done = object()

    def put(item: Any) -> bool:
        while not stop.is_set():
            try:
                slots.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for idx in plan:
                src = scene.frames[idx].to(dtype)
                tgt = scene.frames[[i + 1 for i in idx]].to(dtype)
                if not put((src, tgt)):
                    return
        except Exception as e:
            put(e)
        put(done)

    threading.Thread(target=produce, daemon=True, name="prefetch").start()
    try:
        while (item := slots.get()) is not done:
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()


# ===========================================================================
# Training Loop
# ===========================================================================


@dataclass(slots=True)
class TrainResult:
    model: EndoFast
    partition: ParamPartition
    log_rows: list[tuple[Any, ...]]
    steps: int
    settings: dict[str, Any]

    def losses(self) -> list[float]:
        return [row[3] for row in self.log_rows]


def train(settings: dict[str, Any], scene: SceneSequence) -> TrainResult:
    """Run the full schedule on consecutive pairs of ``scene``."""
    cfg = TrainConfig.from_settings(settings)
    dtype = torch_dtype(cfg.dtype)
    if scene.height != settings["image_size"] or scene.width != settings["image_size"]:
        raise ConfigError(
            f"scene is {scene.width}x{scene.height}, "
            f"model expects image_size {settings['image_size']}"
        )
    model, partition = build_adapted_model(settings)
    log.info(
        "Trainable %d / %d parameters (%.1f%%), adapter kind %s",
        partition.trainable_count,
        partition.total_count,
        100.0 * partition.trainable_fraction,
        settings["adapter_kind"],
    )
    optimizer = make_optimizer(model, cfg.learning_rate)
    K = scene.intrinsics
    rows: list[tuple[Any, ...]] = []
    step = 0
    for epoch in range(cfg.epochs):
        plan = epoch_batches(len(scene) - 1, epoch, cfg)
        epoch_total = 0.0
        count = 0
        for batch in prefetch(scene, plan, dtype):
            index = epoch if cfg.lr_decay_unit == "epochs" else step
            lr = lr_schedule(index, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            parts = train_step(batch, model, optimizer, K, cfg, step)
            values = parts.as_floats()
            rows.append((step, values["reproj"], values["tikhonov"], values["total"], lr))
            log.debug("step %d: total=%.6f reproj=%.6f", step, values["total"], values["reproj"])
            epoch_total += values["total"]
            count += 1
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        mean = epoch_total / max(count, 1)
        log.info("Epoch %d: mean loss %.6f over %d steps", epoch, mean, count)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return TrainResult(model, partition, rows, step, settings)


# ===========================================================================
# Evaluation
# ===========================================================================


@torch.no_grad()
def predict_depths(
    model: EndoFast, frames: torch.Tensor, batch_size: int = 8
) -> list[torch.Tensor]:
    dtype = next(model.parameters()).dtype
    out: list[torch.Tensor] = []
    for k in range(0, frames.shape[0], batch_size):
        out.extend(model.depth_net(frames[k : k + batch_size].to(dtype)).double())
    return out


@torch.no_grad()
def predict_trajectory(model: EndoFast, frames: torch.Tensor, batch_size: int = 8) -> PoseSE3:
    """Relative motions over consecutive pairs, chained from identity."""
    dtype = next(model.parameters()).dtype
    Rs, ts = [], []
    for k in range(0, frames.shape[0] - 1, batch_size):
        src = frames[k : k + batch_size].to(dtype)
        tgt = frames[k + 1 : k + 1 + batch_size].to(dtype)
        src = src[: tgt.shape[0]]
        rel = model.pose_net(src, tgt)
        Rs.append(rel.R.double())
        ts.append(rel.t.double())
    return accumulate_trajectory(PoseSE3(torch.cat(Rs), torch.cat(ts)))


def evaluate(
    model: EndoFast, scene: SceneSequence, settings: dict[str, Any]
) -> tuple[MetricsReport, list[torch.Tensor], PoseSE3]:
    """Depth metrics per frame plus similarity and rigid ATE over the sequence."""
    preds = predict_depths(model, scene.frames)
    gts = list(scene.depths)
    depth_mean, per_frame = evaluate_depths(preds, gts, workers=settings["eval_workers"])
    traj = predict_trajectory(model, scene.frames)
    sim3: ATEResult = ate(traj, scene.poses)
    rigid: ATEResult = ate(traj, scene.poses, rigid=True)
    report = MetricsReport(
        depth=depth_mean,
        per_frame=per_frame,
        ate_sim3=sim3,
        ate_rigid=rigid,
        bbox_diagonal=bbox_diagonal(scene.poses),
        extra=provenance(settings),
    )
    return report, preds, traj
