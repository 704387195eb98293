import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

from adapt.augment import (AugmentationTransform, cells_inside, map_cells, unwarp_heatmaps, warp_images)
from adapt.losses import (CurriculumState, consistency_loss, occluded_source_loss, pseudo_label,
                          total_loss)
from adapt.mean_teacher import TeacherStudentPair, ema_update
from config.config import Config, ExperimentConfig
from control.errors import DatasetError
from control.evaluation import evaluate_samples, group_columns, row_from_pck, severity_rows
from iodev.batch_stream import BatchStream, epoch_order
from iodev.csv_log import CsvLog
from models.manager import CheckpointManager
from models.pose_net import images_to_tensor
from models.training import labeled_batch, milestone_epochs
from prior.anatomical import anatomical_loss
from prior.prior_model import freeze
from skeleton.skeleton import SkeletonSpec
from synth.generator import occlude_sample
from synth.segmenter import OracleSegmenter, Segmenter, visibility_scores
from synth.styles import OcclusionSpec

log = logging.getLogger("adapt")

STEP_FIELDS = ["epoch", "iteration", "step", "lr", "gamma", "total", "src_ocl", "ant", "pred_vis", "pred",
               "vis", "mask_frac", "zero_visibility", "degenerate_pose"]


@dataclass
class IterationBatch:
    student_in: torch.Tensor          # target images under A1 (strong)
    teacher_in: torch.Tensor          # target images under A2 (weak)
    a1: list                          # AugmentationTransform per sample
    a2: list
    visibility: torch.Tensor          # (B,)
    source: Optional[object] = None   # LabeledBatch of occluded source samples


@dataclass
class AdaptResult:
    pair: TeacherStudentPair
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_pck: float = float("nan")
    counter: Counter = field(default_factory=Counter)


class AdaptationBatches:
    """
    Builds the data of one adaptation iteration from the split readers.
    Everything random is drawn from generators seeded by (seed, epoch, iteration),
    so the batch content does not depend on which thread builds it.
    """
    def __init__(self, target_reader, source_reader, cfg: ExperimentConfig, seed: int,
                 segmenter: Segmenter):
        self.target = target_reader
        self.source = source_reader
        self.cfg = cfg
        self.seed = seed
        self.segmenter = segmenter
        a = cfg.adapt
        self.target_order = {}
        self.source_order = {}
        self.count = a.iterations_per_epoch * a.batch_size

    def orders(self, epoch: int):
        for name, reader in (("target_adapt", self.target), ("source", self.source)):
            if reader is not None and len(reader) == 0:
                raise DatasetError(f"{getattr(reader, 'dir', name)} holds no samples")
        self.target_order[epoch] = epoch_order(len(self.target), self.seed, epoch, self.count)
        if self.source is not None:
            self.source_order[epoch] = epoch_order(len(self.source), self.seed + 1, epoch, self.count)

    def build(self, key) -> IterationBatch:
        epoch, it = key
        a, d = self.cfg.adapt, self.cfg.data
        bs = a.batch_size
        idx = self.target_order[epoch][it * bs:(it + 1) * bs]
        targets = [self.target.load(int(i)) for i in idx]

        masks = [self.segmenter.segment(s.image, {"id": s.id, "silhouette": s.silhouette}) for s in targets]
        vis = torch.tensor(visibility_scores(masks), dtype=torch.float32)

        rng = np.random.default_rng([self.seed, 31, epoch, it])
        a1 = [AugmentationTransform.sample(a.strong_aug, rng, d.image_size, d.heatmap_size) for _ in targets]
        a2 = [AugmentationTransform.sample(a.weak_aug, rng, d.image_size, d.heatmap_size) for _ in targets]
        images = images_to_tensor([s.image for s in targets])
        batch = IterationBatch(warp_images(images, a1), warp_images(images, a2), a1, a2, vis)

        if self.source is not None and a.use_src_ocl:
            occ_rng = np.random.default_rng([self.seed, 21, epoch, it])
            src = []
            for i in self.source_order[epoch][it * bs:(it + 1) * bs]:
                s = self.source.load(int(i))
                occ = OcclusionSpec(severity=int(occ_rng.choice(a.source_severities)),
                                    patch_count=d.patch_count,
                                    fill=str(occ_rng.choice(["solid", "textured"])) if d.occluder_fill == "mixed"
                                    else d.occluder_fill,
                                    image_size=d.image_size)
                src.append(occlude_sample(s, occ, int(occ_rng.integers(2 ** 31))))
            batch.source = labeled_batch(src, d.sigma, d.heatmap_size, d.image_size)
        return batch


def valid_after_warp(rows: torch.Tensor, cols: torch.Tensor, a1: list, a2: list, grid: int) -> torch.Tensor:
    """
    Pseudo-label joints found in the teacher's (A2) frame stay in the loss only if they land
    on the grid in the original frame and in the student's (A1) frame.
    """
    cells = torch.stack([cols, rows], dim=-1).double().numpy()
    keep = np.zeros(cells.shape[:2], dtype=bool)
    for b in range(cells.shape[0]):
        orig = map_cells(cells[b], np.linalg.inv(a2[b].heatmap_matrix))
        stud = map_cells(orig, a1[b].heatmap_matrix)
        keep[b] = cells_inside(orig, grid) & cells_inside(stud, grid)
    return torch.from_numpy(keep)


def _pck_row(epoch: int, model: str, gamma: float, split: str, row) -> dict:
    out = {"epoch": epoch, "model": model, "gamma": gamma, "split": split, "n": row.n, "Avg": row.avg}
    out.update(row.values)
    return out


def adapt(pair: TeacherStudentPair, source_reader, target_reader, prior, cfg: ExperimentConfig,
          skel: SkeletonSpec, out_dir: Optional[str] = None, eval_samples: Optional[list] = None,
          seed: Optional[int] = None, segmenter: Optional[Segmenter] = None) -> AdaptResult:
    """
    Mean-teacher adaptation on the unlabeled target split.
    Per iteration: strong view to the student, weak view to the teacher, confidence-masked
    pseudo labels, occluded-source supervision, anatomical prior term, visibility curriculum,
    one student step, one EMA step.
    Per epoch: PCK of student and teacher on eval_samples; the teacher with the best mean PCK is kept.
    A non-finite loss aborts the run; checkpoints already on disk are left untouched.
    """
    seed = cfg.seed if seed is None else seed
    a, d = cfg.adapt, cfg.data
    segmenter = segmenter or OracleSegmenter()
    scale = d.image_size / d.heatmap_size
    prior = freeze(prior) if prior is not None else None
    manager = CheckpointManager()
    skel_hash = skel.skeleton_hash()
    student, teacher = pair.student, pair.teacher

    optimizer = Adam(student.parameters(), lr=a.lr)
    scheduler = MultiStepLR(optimizer, milestone_epochs(a.epochs, a.milestones_frac), a.lr_decay)
    batches = AdaptationBatches(target_reader, source_reader, cfg, seed, segmenter)
    result = AdaptResult(pair)
    counter = result.counter
    columns = group_columns(skel)
    quiet = logging.getLogger().getEffectiveLevel() > logging.INFO

    step_log = epoch_log = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg.snapshot(os.path.join(out_dir, "config.json"))
        step_log = CsvLog(os.path.join(out_dir, "adapt_steps.csv"), STEP_FIELDS)
        epoch_log = CsvLog(os.path.join(out_dir, "adapt_epochs.csv"),
                           ["epoch", "model", "gamma", "split", "n"] + columns + ["Avg"])
        # the starting point is the first "last good" teacher
        manager.save(os.path.join(out_dir, "teacher_last.pt"), "posenet", teacher.architecture(), teacher,
                     skel_hash, extra={"epoch": -1, "seed": seed})
    if eval_samples is None:
        log.warning("no labeled target eval split; per-epoch PCK and best-teacher selection are skipped")

    step = 0
    try:
        for epoch in range(a.epochs):
            state = CurriculumState(epoch, a.epochs, a.gamma_mode)
            gamma = state.gamma
            lr = optimizer.param_groups[0]["lr"]
            batches.orders(epoch)
            n_it = a.iterations_per_epoch
            build = lambda it, ep=epoch: batches.build((ep, it))
            with BatchStream(build, range(n_it), 1, lambda items: items[0], depth=Config.PREFETCH) as stream:
                for it, batch in enumerate(tqdm(stream, total=n_it, desc=f"adapt {epoch}",
                                                leave=False, disable=quiet)):
                    before = Counter(counter)
                    # teacher pseudo labels in the weak frame, mapped back to the original frame
                    teacher.eval()
                    with torch.no_grad():
                        h2 = teacher(batch.teacher_in)
                    t2, mask, rows, cols = pseudo_label(h2, a.tau, d.sigma)
                    targets = unwarp_heatmaps(t2, batch.a2)
                    mask = mask & valid_after_warp(rows, cols, batch.a1, batch.a2, d.heatmap_size)

                    student.train()
                    n_t = batch.student_in.shape[0]
                    if batch.source is not None:
                        out = student(torch.cat([batch.student_in, batch.source.images]))
                        h1, hs = out[:n_t], out[n_t:]
                        src_ocl = occluded_source_loss(hs, batch.source.targets, batch.source.mask)
                    else:
                        h1 = student(batch.student_in)
                        src_ocl = h1.sum() * 0.0
                    h1 = unwarp_heatmaps(h1, batch.a1)

                    zero = h1.sum() * 0.0
                    if a.use_pred:
                        pred = consistency_loss(h1, targets, mask, mode="plain")
                        pred_vis = consistency_loss(h1, targets, mask, batch.visibility, "weighted", counter)
                    else:
                        pred = pred_vis = zero
                    if prior is not None and a.lambda_a > 0:
                        ant = anatomical_loss(prior, h1, skel, scale, a.soft_argmax_temperature, counter)
                    else:
                        ant = zero

                    loss, parts = total_loss({"src_ocl": src_ocl, "ant": ant, "pred_vis": pred_vis,
                                              "pred": pred}, a, gamma)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    ema_update(pair)

                    row = {"epoch": epoch, "iteration": it, "step": step, "lr": lr,
                           "mask_frac": float(mask.float().mean()),
                           "zero_visibility": counter["zero_visibility"] - before["zero_visibility"],
                           "degenerate_pose": counter["degenerate_pose"] - before["degenerate_pose"]}
                    row.update(parts)
                    result.step_rows.append(row)
                    if step_log:
                        step_log.write(row)
                    step += 1
            scheduler.step()

            last = result.step_rows[-1] if result.step_rows else {}
            log.info(f"epoch {epoch} gamma={gamma:.4f} total={last.get('total', float('nan')):.6f} "
                     f"mask_frac={last.get('mask_frac', float('nan')):.3f}")

            if eval_samples is not None:
                for name, net in (("student", student), ("teacher", teacher)):
                    outcome = evaluate_samples(net, eval_samples, skel, cfg.pck_alpha, d.image_size, a.batch_size)
                    rows = [row_from_pck(name, "all", outcome.result, skel)] + severity_rows(outcome, name, skel)
                    for r in rows:
                        er = _pck_row(epoch, name, gamma, r.split, r)
                        result.epoch_rows.append(er)
                        if epoch_log:
                            epoch_log.write(er)
                    if name == "teacher":
                        avg = rows[0].avg
                        log.info(f"epoch {epoch} teacher PCK={avg:.2f}")
                        if not np.isnan(avg) and (result.best_epoch < 0 or avg > result.best_pck):
                            result.best_epoch, result.best_pck = epoch, avg
                            if out_dir:
                                manager.save(os.path.join(out_dir, "teacher_best.pt"), "posenet",
                                             teacher.architecture(), teacher, skel_hash,
                                             extra={"epoch": epoch, "pck": avg, "seed": seed})
            if out_dir:
                manager.save(os.path.join(out_dir, "teacher_last.pt"), "posenet", teacher.architecture(),
                             teacher, skel_hash, extra={"epoch": epoch, "seed": seed})
                manager.save(os.path.join(out_dir, "student_last.pt"), "posenet", student.architecture(),
                             student, skel_hash, optimizer, scheduler, extra={"epoch": epoch, "seed": seed})
    finally:
        if step_log:
            step_log.close()
        if epoch_log:
            epoch_log.close()

    if out_dir and eval_samples is None:
        # nothing to select on: the final teacher is the result
        manager.save(os.path.join(out_dir, "teacher_best.pt"), "posenet", teacher.architecture(), teacher,
                     skel_hash, extra={"epoch": a.epochs - 1, "seed": seed})
    return result


def load_eval_samples(reader_factory, split_dir: str) -> Optional[list]:
    """Labeled eval samples, or None (with a warning) when the label file is unavailable."""
    try:
        reader = reader_factory(split_dir)
    except DatasetError as e:
        log.warning(f"target eval split unavailable: {e}")
        return None
    return [reader.load(i) for i in range(len(reader))]
