# control/controller.py
import json
import logging
import os
import shutil
import sys
from collections import Counter
from typing import Optional

import numpy as np
import torch

from adapt.engine import adapt, load_eval_samples
from adapt.mean_teacher import TeacherStudentPair
from config.config import ExperimentConfig
from control.errors import CheckpointError, DatasetError, PoseAdaptError, RefusalError
from control.evaluation import (ResultTable, avg_from_records, evaluate_samples, group_columns, mean_error,
                                row_from_pck, sample_records, severity_rows, write_records)
from iodev.dataset_io import SplitReader, write_dataset
from models.manager import CheckpointManager, load_into
from models.pose_net import PoseNetwork, build_network
from models.training import pretrain_source
from predict.predictor import PosePredictor
from prior.negatives import load_samples, save_samples
from prior.training import build_prior_samples, load_prior, save_prior, train_prior
from skeleton.skeleton import SkeletonSpec
from synth.generator import generate_split
from synth.styles import SOURCE_STYLE, TARGET_STYLE
from ui.overlay import save_overlays

log = logging.getLogger("ctl")

# split name -> (style, severities or "target", label mode)
SPLITS = {
    "source": (SOURCE_STYLE, 0, "inline"),
    "source_occluded": (SOURCE_STYLE, "target", "inline"),
    "target_adapt": (TARGET_STYLE, "target", "none"),
    "target_eval": (TARGET_STYLE, "target", "eval_only"),
    "target_eval_clean": (TARGET_STYLE, 0, "eval_only"),
}
SWEEP_LEVELS = (1, 2, 3, 4, 5)


def sweep_split(severity: int) -> str:
    return f"target_eval_sev{severity}"


class ExperimentController:
    """
    Runs one CLI command at a time over an output root:
      data/<split>/                    generated datasets
      runs/seed<S>/pretrain|prior|adapt_<variant>/
      eval/<name>/, ablation/, report/
    State: idle -> running -> idle, or error (via raise_error).
    """
    def __init__(self, cfg: ExperimentConfig, out_root: Optional[str] = None, force: bool = False):
        self.cfg = cfg
        self.root = out_root or cfg.out_dir
        self.force = force
        self.skel = SkeletonSpec.load(cfg.skeleton_path)
        self.manager = CheckpointManager()

        # Current high-level state of the controller
        self.state = "idle"
        self.command: Optional[str] = None

        # Last error for diagnostics
        self._last_error: Optional[PoseAdaptError] = None

    # ---------- Paths ----------

    def data_dir(self, split: str) -> str:
        return os.path.join(self.root, "data", split)

    def run_dir(self, seed: int, stage: str) -> str:
        return os.path.join(self.root, "runs", f"seed{seed}", stage)

    def _claim(self, path: str):
        """Refuse to write into a non-empty directory unless --force was given."""
        if os.path.isdir(path) and os.listdir(path) and not self.force:
            raise RefusalError(f"{path} is not empty (use --force to overwrite)")
        os.makedirs(path, exist_ok=True)

    # ---------- Error handling ----------

    def raise_error(self, err: BaseException) -> int:
        """Central error handler: record, log, enter 'error', print one parsable line, return exit code."""
        if not isinstance(err, PoseAdaptError):
            wrapped = PoseAdaptError(f"{type(err).__name__}: {err}")
        else:
            wrapped = err
        try:
            self._last_error = wrapped
            log.error(str(wrapped))
            msg = str(wrapped).replace('"', "'").replace("\n", " ")
            print(f'error code={wrapped.code} command={self.command} message="{msg}"', file=sys.stderr)
        finally:
            self.state = "error"
        return wrapped.exit_code

    def run(self, command: str, **kwargs) -> int:
        """Dispatch a command; returns the process exit code."""
        handlers = {
            "generate": self.cmd_generate,
            "pretrain": self.cmd_pretrain,
            "train-prior": self.cmd_train_prior,
            "adapt": self.cmd_adapt,
            "evaluate": self.cmd_evaluate,
            "ablate": self.cmd_ablate,
            "report": self.cmd_report,
        }
        self.command = command
        if self.state == "error":
            return self._last_error.exit_code if self._last_error else 1
        self.state = "running"
        log.info(f"{command} start")
        try:
            handlers[command](**kwargs)
        except Exception as e:
            return self.raise_error(e)
        self.state = "idle"
        log.info(f"{command} done")
        return 0

    # ---------- Commands ----------

    def cmd_generate(self, severity_sweep: bool = False):
        d = self.cfg.data
        data_root = os.path.join(self.root, "data")
        self._claim(data_root)
        if self.force:
            # a forced run replaces the whole data tree, stale sweep splits included
            shutil.rmtree(data_root)
            os.makedirs(data_root)
        counts = {"source": d.n_source, "source_occluded": d.n_source_occluded,
                  "target_adapt": d.n_target_adapt, "target_eval": d.n_target_eval,
                  "target_eval_clean": d.n_target_eval_clean}
        plan = [(name, *SPLITS[name], counts[name], k) for k, name in enumerate(SPLITS)]
        if severity_sweep:
            # every sweep split reuses one seed block, so level k+1 hides a superset of level k
            plan += [(sweep_split(s), TARGET_STYLE, s, "eval_only", d.n_sweep_eval, len(SPLITS))
                     for s in SWEEP_LEVELS]

        for name, style, sev, labels, n, k in plan:
            severities = list(d.target_severities) if sev == "target" else sev
            base_seed = (self.cfg.seed * 16 + k) * d.split_seed_stride
            samples = generate_split(n, base_seed, style, severities, d.patch_count, d.occluder_fill,
                                     d.image_size, self.skel, prefix=f"{name}_")
            generator = {"style": style.to_dict(), "severities": severities, "base_seed": base_seed,
                         "patch_count": d.patch_count, "occluder_fill": d.occluder_fill,
                         "image_size": d.image_size}
            write_dataset(samples, self.data_dir(name), name, self.skel, labels, generator,
                          self.cfg.config_hash())

    def _source_reader(self) -> SplitReader:
        reader = SplitReader(self.data_dir("source"), labels=True)
        self._check_skeleton(reader.skeleton_hash, self.data_dir("source"))
        return reader

    def _check_skeleton(self, other_hash: str, where: str):
        if other_hash != self.skel.skeleton_hash():
            raise RefusalError(f"skeleton hash mismatch between config skeleton and {where}")

    def load_network(self, path: str) -> PoseNetwork:
        ckpt = self.manager.load(path, kind="posenet")
        if ckpt.skeleton_hash != self.skel.skeleton_hash():
            raise RefusalError(f"skeleton hash mismatch between checkpoint {path} and the configured skeleton")
        net = PoseNetwork.from_architecture(ckpt.architecture)
        return load_into(net, ckpt, path).eval()

    def cmd_pretrain(self, seed: Optional[int] = None):
        seed = self.cfg.seed if seed is None else seed
        out = self.run_dir(seed, "pretrain")
        self._claim(out)
        self.cfg.snapshot(os.path.join(out, "config.json"))
        torch.manual_seed(seed)
        net = build_network(self.skel.num_joints, self.cfg.data, self.cfg.posenet)
        log.info(f"pose network with {net.param_count()} parameters")
        pretrain_source(net, self._source_reader(), self.cfg, self.skel, out, seed)

    def cmd_train_prior(self, seed: Optional[int] = None):
        seed = self.cfg.seed if seed is None else seed
        out = self.run_dir(seed, "prior")
        self._claim(out)
        self.cfg.snapshot(os.path.join(out, "config.json"))
        reader = self._source_reader()
        source = [reader.load(i) for i in range(len(reader))]
        net = self.load_network(os.path.join(self.run_dir(seed, "pretrain"), "source_best.pt"))
        counter = Counter()
        samples = build_prior_samples(source, PosePredictor(net, self.cfg.posenet.batch_size), self.skel,
                                      self.cfg.prior, seed, self.cfg.data.patch_count, counter)
        save_samples(os.path.join(out, "negatives.jsonl"), samples)
        # train from the cache so a run can be repeated from the file alone
        samples = load_samples(os.path.join(out, "negatives.jsonl"))
        result = train_prior(samples, self.skel, self.cfg.prior, seed, out)
        save_prior(os.path.join(out, "prior.pt"), result, self.skel,
                   extra={"holdout_mse": result.holdout_mse, "holdout_var": result.holdout_var,
                          "skipped_negative": counter["skipped_negative"], "seed": seed})

    def variant_config(self, variant: str) -> ExperimentConfig:
        """Ablation switches for one adaptation variant."""
        cfg = ExperimentConfig.from_dict(self.cfg.to_dict())
        a = cfg.adapt
        if variant == "mt_ocl":
            a.lambda_a, a.gamma_mode = 0.0, "zero"
        elif variant == "prior":
            a.gamma_mode = "zero"
        elif variant != "full":
            raise RefusalError(f"unknown adaptation variant '{variant}'")
        return cfg

    def cmd_adapt(self, seed: Optional[int] = None, variant: str = "full"):
        seed = self.cfg.seed if seed is None else seed
        cfg = self.variant_config(variant)
        out = self.run_dir(seed, f"adapt_{variant}")
        self._claim(out)

        torch.manual_seed(seed)
        net = self.load_network(os.path.join(self.run_dir(seed, "pretrain"), "source_best.pt"))
        pair = TeacherStudentPair.from_network(net, cfg.adapt.alpha)
        prior = None
        if cfg.adapt.lambda_a > 0:
            prior = load_prior(os.path.join(self.run_dir(seed, "prior"), "prior.pt"), self.skel)

        target = SplitReader(self.data_dir("target_adapt"), labels=False)
        self._check_skeleton(target.skeleton_hash, self.data_dir("target_adapt"))
        source = self._source_reader() if cfg.adapt.use_src_ocl else None
        eval_samples = load_eval_samples(lambda p: SplitReader(p, labels=True), self.data_dir("target_eval"))
        result = adapt(pair, source, target, prior, cfg, self.skel, out, eval_samples, seed)
        log.info(f"best teacher epoch {result.best_epoch} PCK={result.best_pck:.2f}")

    def _eval_splits(self, split: Optional[str]) -> list:
        if split:
            return [split]
        names = ["target_eval", "target_eval_clean"] + [sweep_split(s) for s in SWEEP_LEVELS]
        return [n for n in names if os.path.isdir(self.data_dir(n))]

    def evaluate_checkpoint(self, checkpoint: str, name: str, split: Optional[str] = None,
                            out: Optional[str] = None, overlays: bool = True) -> ResultTable:
        """Table rows per split (and per severity inside mixed splits) for one checkpoint."""
        net = self.load_network(checkpoint)
        table = ResultTable(group_columns(self.skel))
        splits = self._eval_splits(split)
        if not splits:
            raise DatasetError(f"no evaluation split found under {os.path.join(self.root, 'data')}")
        for sp in splits:
            reader = SplitReader(self.data_dir(sp), labels=True)
            if reader.skeleton_hash != self.skel.skeleton_hash():
                raise RefusalError(f"skeleton hash mismatch between checkpoint {checkpoint} and split {sp}")
            samples = [reader.load(i) for i in range(len(reader))]
            outcome = evaluate_samples(net, samples, self.skel, self.cfg.pck_alpha, self.cfg.data.image_size,
                                       self.cfg.posenet.batch_size)
            table.add(row_from_pck(name, sp, outcome.result, self.skel))
            if len(set(outcome.severities.tolist())) > 1:
                for r in severity_rows(outcome, name, self.skel, prefix=f"{sp}:severity="):
                    table.add(r)
            if sp.startswith("target_eval_sev"):
                r = row_from_pck(name, f"severity={sp[len('target_eval_sev'):]}", outcome.result, self.skel)
                table.add(r)
            if out:
                records = sample_records(outcome)
                write_records(os.path.join(out, f"{sp}_records.jsonl"), records)
                recomputed = avg_from_records(records)
                if abs(recomputed - table.get(name, sp).avg) > 1e-9:
                    raise PoseAdaptError(f"Avg {table.get(name, sp).avg} disagrees with records ({recomputed})")
                if overlays and self.cfg.overlay_n > 0:
                    self._overlays(os.path.join(out, "overlays", sp), samples, outcome, records)
        return table

    def _overlays(self, out: str, samples: list, outcome, records: list):
        n = self.cfg.overlay_n
        order = np.argsort([mean_error(r) for r in records], kind="stable")
        picks = [("best", i) for i in order[:n]] + [("worst", i) for i in order[::-1][:n]]
        items = []
        for tag, i in picks:
            items.append((f"{tag}_{records[i]['id']}", samples[i].image, outcome.preds[i], outcome.gts[i],
                          f"sev {records[i]['severity']}  err {mean_error(records[i]):.1f}px"))
        save_overlays(out, items, self.skel)

    def cmd_evaluate(self, checkpoint: str, split: Optional[str] = None, name: Optional[str] = None):
        name = name or os.path.splitext(os.path.basename(checkpoint))[0]
        out = os.path.join(self.root, "eval", name)
        self._claim(out)
        table = self.evaluate_checkpoint(checkpoint, name, split, out)
        table.write_csv(os.path.join(out, "table.csv"))
        table.write_text(os.path.join(out, "table.txt"))
        with open(os.path.join(out, "checkpoint.json"), "w", encoding="utf-8") as f:
            json.dump({"checkpoint": os.path.abspath(checkpoint)}, f, indent=2)
        print(table.to_text())

    def cmd_ablate(self, seeds: Optional[list] = None):
        from control.ablation import run_ablation
        run_ablation(self, seeds or list(self.cfg.seeds))

    def cmd_report(self, run_dirs: Optional[list] = None):
        from control.report import build_report
        build_report(self.root, run_dirs or [], os.path.join(self.root, "report"))

    # ---------- Helpers for the ablation ----------

    def ensure_stage(self, seed: int, stage: str, **kwargs):
        """Run a prerequisite stage for `seed` if its output is missing."""
        marker = {"pretrain": "source_best.pt", "prior": "prior.pt"}.get(stage, "teacher_best.pt")
        path = os.path.join(self.run_dir(seed, stage), marker)
        if os.path.exists(path):
            return path
        log.info(f"seed {seed}: running missing stage {stage}")
        force, self.force = self.force, True
        try:
            if stage == "pretrain":
                self.cmd_pretrain(seed)
            elif stage == "prior":
                self.cmd_train_prior(seed)
            else:
                self.cmd_adapt(seed, **kwargs)
        finally:
            self.force = force
        if not os.path.exists(path):
            raise CheckpointError(f"stage {stage} for seed {seed} did not produce {path}")
        return path
