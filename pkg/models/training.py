import copy
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

from config.config import Config, ExperimentConfig
from control.errors import NonFiniteLossError, RejectedInputError
from iodev.batch_stream import BatchStream, epoch_order
from iodev.csv_log import CsvLog
from models.manager import CheckpointManager
from models.pose_net import PoseNetwork, images_to_tensor
from predict.predictor import PosePredictor
from skeleton.heatmap import render_targets
from skeleton.metrics import pck
from skeleton.skeleton import SkeletonSpec

log = logging.getLogger("pretrain")

PRETRAIN_FIELDS = ["epoch", "loss", "lr", "source_pck"]


# ---------- Batches ----------

@dataclass
class LabeledBatch:
    images: torch.Tensor       # (B, 3, S, S)
    targets: torch.Tensor      # (B, K, Hh, Wh)
    mask: torch.Tensor         # (B, K) float, 1 = joint enters the loss
    poses: list = field(default_factory=list)


def labeled_batch(samples, sigma: float, heatmap_size: int, image_size: int) -> LabeledBatch:
    """Stack images and render ground-truth targets for a list of labeled Samples."""
    scale = image_size / heatmap_size
    coords = np.stack([s.pose.coords for s in samples])
    valid = np.stack([s.pose.valid_mask for s in samples])
    targets = render_targets(coords, valid, sigma, (heatmap_size, heatmap_size), scale)
    return LabeledBatch(images=images_to_tensor([s.image for s in samples]),
                        targets=torch.from_numpy(targets),
                        mask=torch.from_numpy(valid.astype(np.float32)),
                        poses=[s.pose for s in samples])


# ---------- Loss ----------

def heatmap_mse(pred: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Mean over batch, channels and cells of mask * (pred - target)^2.
    Masked joints contribute zero but still count in the denominator.
    """
    if pred.shape != targets.shape:
        raise RejectedInputError(f"prediction {tuple(pred.shape)} vs target {tuple(targets.shape)}")
    diff2 = (pred - targets.to(pred.dtype)) ** 2
    return (diff2 * mask.to(pred.dtype)[..., None, None]).mean()


def source_loss(net: PoseNetwork, batch: LabeledBatch) -> torch.Tensor:
    return heatmap_mse(net(batch.images), batch.targets, batch.mask)


def check_finite(term: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(term, float(value.detach().reshape(-1)[0]))


def milestone_epochs(epochs: int, fractions) -> list:
    """Decay epochs scaled from fractions of the run; at least 1, unique and increasing."""
    return sorted({max(1, int(round(f * epochs))) for f in fractions})


# ---------- Pretraining ----------

@dataclass
class PretrainResult:
    net: PoseNetwork
    rows: list
    best_pck: float
    best_epoch: int


def split_holdout(n: int, frac: float, seed: int):
    """Seeded (train, holdout) index split; holdout has at least one sample when frac > 0."""
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_hold = int(math.ceil(frac * n)) if frac > 0 else 0
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def evaluate_pck(net: PoseNetwork, samples, skel: SkeletonSpec, alpha: float, image_size: int,
                 batch_size: int = 32) -> float:
    if not samples:
        return float("nan")
    preds = PosePredictor(net, batch_size).predict([s.image for s in samples])
    result = pck([p for p, _ in preds], [s.pose for s in samples], alpha, image_size,
                 joints=skel.evaluated_joints)
    return result.mean


def pretrain_source(net: PoseNetwork, reader, cfg: ExperimentConfig, skel: SkeletonSpec,
                    out_dir: Optional[str] = None, seed: Optional[int] = None) -> PretrainResult:
    """
    Supervised heatmap regression on the labeled source split.
    - Adam, lr decayed by lr_decay at the configured fraction milestones
    - keeps the weights with the best held-out source PCK
    - raises NonFiniteLossError as soon as a batch loss is NaN/inf
    """
    seed = cfg.seed if seed is None else seed
    ncfg, dcfg = cfg.posenet, cfg.data
    train_idx, hold_idx = split_holdout(len(reader), ncfg.holdout_frac, seed)
    holdout = [reader.load(int(i)) for i in hold_idx]

    optimizer = Adam(net.parameters(), lr=ncfg.lr)
    scheduler = MultiStepLR(optimizer, milestone_epochs(ncfg.epochs, ncfg.milestones_frac), ncfg.lr_decay)

    csv_log = CsvLog(os.path.join(out_dir, "pretrain_metrics.csv"), PRETRAIN_FIELDS) if out_dir else None
    manager = CheckpointManager()
    rows = []
    best_pck, best_epoch, best_state = -1.0, -1, copy.deepcopy(net.state_dict())
    collate = lambda items: labeled_batch(items, dcfg.sigma, dcfg.heatmap_size, dcfg.image_size)
    quiet = logging.getLogger().getEffectiveLevel() > logging.INFO

    try:
        for epoch in range(ncfg.epochs):
            net.train()
            order = train_idx[epoch_order(len(train_idx), seed, epoch)]
            total, count = 0.0, 0
            lr = optimizer.param_groups[0]["lr"]
            n_batches = math.ceil(len(order) / ncfg.batch_size)
            with BatchStream(reader.load, order, ncfg.batch_size, collate, depth=Config.PREFETCH) as stream:
                for batch in tqdm(stream, total=n_batches, desc=f"pretrain {epoch}", leave=False, disable=quiet):
                    loss = source_loss(net, batch)
                    check_finite("source", loss)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    total += float(loss) * len(batch.poses)
                    count += len(batch.poses)
            scheduler.step()

            mean_loss = total / max(count, 1)
            held = evaluate_pck(net, holdout, skel, cfg.pck_alpha, dcfg.image_size, ncfg.batch_size)
            row = {"epoch": epoch, "loss": mean_loss, "lr": lr, "source_pck": held}
            rows.append(row)
            if csv_log:
                csv_log.write(row)
            log.info(f"epoch {epoch} loss={mean_loss:.6f} lr={lr:.2e} source_pck={held:.4f}")

            if not math.isnan(held) and held > best_pck:
                best_pck, best_epoch = held, epoch
                best_state = copy.deepcopy(net.state_dict())
                if out_dir:
                    manager.save(os.path.join(out_dir, "source_best.pt"), "posenet", net.architecture(), net,
                                 skel.skeleton_hash(), optimizer, scheduler,
                                 extra={"epoch": epoch, "source_pck": held, "seed": seed})
    finally:
        if csv_log:
            csv_log.close()

    # without a holdout the last epoch wins
    if best_epoch < 0:
        best_epoch = ncfg.epochs - 1
        best_state = copy.deepcopy(net.state_dict())
        if out_dir:
            manager.save(os.path.join(out_dir, "source_best.pt"), "posenet", net.architecture(), net,
                         skel.skeleton_hash(), optimizer, scheduler, extra={"epoch": best_epoch, "seed": seed})
    net.load_state_dict(best_state)
    log.info(f"best epoch {best_epoch} source_pck={best_pck:.4f}")
    return PretrainResult(net, rows, best_pck, best_epoch)
