import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch.optim import Adam
from tqdm import tqdm

from config.config import PriorConfig
from control.errors import ConfigError
from iodev.csv_log import CsvLog
from models.manager import CheckpointManager, load_into
from models.training import check_finite, split_holdout
from prior.negatives import (model_prediction_negative, positive, sample_kappa,
                             vonmises_negative)
from prior.prior_model import PriorModel, prior_regression_loss
from skeleton.skeleton import SkeletonSpec
from synth.generator import occlude_sample
from synth.styles import OcclusionSpec

log = logging.getLogger("prior")

PRIOR_FIELDS = ["epoch", "loss", "holdout_mse", "holdout_var"]
MIN_PROVENANCE_SHARE = 0.25


@dataclass
class PriorTrainResult:
    model: PriorModel
    rows: list
    holdout_mse: float
    holdout_var: float


def _stack(samples: list):
    vectors = torch.tensor(np.stack([s.theta.vectors for s in samples]), dtype=torch.float32)
    d = torch.tensor([s.d for s in samples], dtype=torch.float32)
    return vectors, d


def check_provenance(samples: list):
    """Both d = 0 and d > 0 samples must make up at least a quarter of the set."""
    if not samples:
        raise ConfigError("prior training set is empty")
    zero = sum(1 for s in samples if s.d == 0.0) / len(samples)
    if zero < MIN_PROVENANCE_SHARE or 1.0 - zero < MIN_PROVENANCE_SHARE:
        raise ConfigError(
            f"prior training set needs >= {MIN_PROVENANCE_SHARE:.0%} plausible and implausible samples, "
            f"got {zero:.1%} plausible")


def train_prior(samples: list, skel: SkeletonSpec, pcfg: PriorConfig, seed: int = 0,
                out_dir: Optional[str] = None) -> PriorTrainResult:
    """
    Regress the prior onto target distances with a mean squared error.
    Reports the held-out MSE next to the held-out variance of d.
    """
    check_provenance(samples)
    torch.manual_seed(seed)
    model = PriorModel(skel, pcfg.feature_dim, pcfg.hidden_dim)
    train_idx, hold_idx = split_holdout(len(samples), pcfg.holdout_frac, seed)
    x_tr, d_tr = _stack([samples[i] for i in train_idx])
    x_ho, d_ho = _stack([samples[i] for i in hold_idx]) if len(hold_idx) else (None, None)
    optimizer = Adam(model.parameters(), lr=pcfg.lr)

    csv_log = CsvLog(os.path.join(out_dir, "prior_metrics.csv"), PRIOR_FIELDS) if out_dir else None
    rows = []
    holdout_mse = holdout_var = float("nan")
    quiet = logging.getLogger().getEffectiveLevel() > logging.INFO
    n = len(train_idx)
    try:
        for epoch in tqdm(range(pcfg.epochs), desc="prior", leave=False, disable=quiet):
            model.train()
            order = torch.from_numpy(np.random.default_rng([seed, 3, epoch]).permutation(n))
            total = 0.0
            for start in range(0, n, pcfg.batch_size):
                idx = order[start:start + pcfg.batch_size]
                loss = prior_regression_loss(model, x_tr[idx], d_tr[idx])
                check_finite("prior", loss)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss) * len(idx)

            if x_ho is not None:
                model.eval()
                with torch.no_grad():
                    holdout_mse = float(prior_regression_loss(model, x_ho, d_ho))
                holdout_var = float(d_ho.var(unbiased=False))
            row = {"epoch": epoch, "loss": total / n, "holdout_mse": holdout_mse, "holdout_var": holdout_var}
            rows.append(row)
            if csv_log:
                csv_log.write(row)
    finally:
        if csv_log:
            csv_log.close()

    model.eval()
    log.info(f"trained on {n} samples: loss={rows[-1]['loss']:.6f} "
             f"holdout_mse={holdout_mse:.6f} holdout_var={holdout_var:.6f}")
    return PriorTrainResult(model, rows, holdout_mse, holdout_var)


def build_prior_samples(source_samples: list, predictor, skel: SkeletonSpec, pcfg: PriorConfig,
                        seed: int = 0, patch_count: int = 2, counter: Optional[Counter] = None) -> list:
    """
    Assemble the prior's training set from labeled clean source samples:
      - every source pose as a ground_truth sample
      - vonmises_per_pose Von-Mises negatives per pose (kappa log-uniform in kappa_range)
      - n_model_negatives source-only predictions on occluded copies, severities cycling 1..5
    """
    counter = counter if counter is not None else Counter()
    rng = np.random.default_rng([seed, 5])
    out = [positive(s.pose, skel) for s in source_samples]
    for s in source_samples:
        for _ in range(pcfg.vonmises_per_pose):
            out.append(vonmises_negative(s.pose, skel, sample_kappa(rng, pcfg.kappa_range),
                                         pcfg.max_bones_perturbed, rng, mode=pcfg.negative_mode))

    if predictor is not None and source_samples:
        quiet = logging.getLogger().getEffectiveLevel() > logging.INFO
        occ_rng = np.random.default_rng([seed, 6])
        for i in tqdm(range(pcfg.n_model_negatives), desc="negatives", leave=False, disable=quiet):
            s = source_samples[i % len(source_samples)]
            occ = OcclusionSpec(severity=1 + i % 5, patch_count=patch_count,
                                fill="solid" if i % 2 == 0 else "textured", image_size=s.image.shape[0])
            neg = model_prediction_negative(predictor, occlude_sample(s, occ, int(occ_rng.integers(2 ** 31))), skel,
                                            pcfg.relabel_threshold, counter)
            if neg is not None:
                out.append(neg)

    kinds = Counter(s.provenance for s in out)
    log.info(f"prior samples: {dict(sorted(kinds.items()))}, skipped={counter['skipped_negative']}")
    return out


def save_prior(path: str, result: PriorTrainResult, skel: SkeletonSpec, extra: Optional[dict] = None):
    CheckpointManager().save(path, "prior", result.model.architecture(), result.model,
                             skel.skeleton_hash(), extra=extra)


def load_prior(path: str, skel: SkeletonSpec) -> PriorModel:
    ckpt = CheckpointManager().load(path, kind="prior", skeleton_hash=skel.skeleton_hash())
    model = PriorModel(skel, **ckpt.architecture)
    load_into(model, ckpt, path)
    model.eval()
    return model
