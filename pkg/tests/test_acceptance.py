"""
Long runs on the default desk-scale benchmark. Skipped unless pytest is given --runslow.
"""
import os

import numpy as np
import pytest
import torch
from scipy import stats

from config.config import ExperimentConfig, PriorConfig
from control.controller import SWEEP_LEVELS, ExperimentController
from control.evaluation import read_table_csv
from iodev.csv_log import read_csv
from prior.negatives import positive, vonmises_negative
from prior.prior_model import PriorModel
from prior.training import build_prior_samples, train_prior
from synth.generator import generate_split
from synth.styles import SOURCE_STYLE

pytestmark = pytest.mark.slow


def prior_outputs(model: PriorModel, samples) -> np.ndarray:
    x = torch.tensor(np.stack([s.theta.vectors for s in samples]), dtype=torch.float32)
    with torch.no_grad():
        return model(x).numpy()


class TestPriorSuite:

    @pytest.fixture(scope="class")
    def trained(self, skel):
        train_poses = generate_split(2000, 10_000, SOURCE_STYLE, 0, 1, "solid", 64, skel)
        pcfg = PriorConfig()
        samples = build_prior_samples(train_poses, None, skel, pcfg, seed=0)
        result = train_prior(samples, skel, pcfg, seed=0)
        held_out = [s.pose for s in generate_split(1000, 20_000, SOURCE_STYLE, 0, 1, "solid", 64, skel)]
        return result, held_out

    def test_plausible_poses_sit_near_zero(self, skel, trained):
        result, held_out = trained
        model = result.model
        out = prior_outputs(model, [positive(p, skel) for p in held_out])
        assert out.mean() < 0.05

    def test_separation_from_half_radian_negatives(self, skel, trained):
        result, held_out = trained
        model = result.model
        rng = np.random.default_rng(1)
        negatives = [vonmises_negative(p, skel, 1.0, None, rng,
                                       angles=0.5 * rng.choice([-1.0, 1.0], size=skel.num_bones))
                     for p in held_out[:500]]
        assert np.mean([s.d for s in negatives]) == pytest.approx(0.5, abs=0.05)
        plausible = prior_outputs(model, [positive(p, skel) for p in held_out[:500]]).mean()
        assert prior_outputs(model, negatives).mean() >= 5.0 * plausible

    def test_monotone_in_target_distance(self, skel, trained):
        result, held_out = trained
        model = result.model
        rng = np.random.default_rng(2)
        negatives = []
        for p in held_out:
            kappa = float(np.exp(rng.uniform(np.log(0.5), np.log(50.0))))
            s = vonmises_negative(p, skel, kappa, None, rng)
            if s.d > 0:
                negatives.append(s)
        d = np.array([s.d for s in negatives])
        out = prior_outputs(model, negatives)
        edges = np.quantile(d, np.linspace(0.0, 1.0, 11))
        bins = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, 9)
        means = [out[bins == b].mean() for b in range(10) if np.any(bins == b)]
        rho = stats.spearmanr(np.arange(len(means)), means).correlation
        assert rho >= 0.9

    def test_holdout_error_below_tenth_of_spread(self, trained):
        result, _ = trained
        assert result.holdout_mse < 0.1 * result.holdout_var

    def test_non_negative_on_random_inputs(self, skel, trained):
        model = trained[0].model
        x = torch.randn(10_000, skel.num_bones, 2, generator=torch.Generator().manual_seed(3)) * 2.0
        with torch.no_grad():
            assert int((model(x) < 0).sum()) == 0


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Default config, three seeds: data with the sweep, then the four-variant ablation."""
    cfg = ExperimentConfig(out_dir=str(tmp_path_factory.mktemp("bench") / "out"))
    ctl = ExperimentController(cfg)
    assert ctl.run("generate", severity_sweep=True) == 0
    assert ctl.run("ablate", seeds=[0, 1, 2]) == 0
    return ctl


def avg(rows, variant, split) -> float:
    return float(next(r["Avg"] for r in rows if r["variant"] == variant and r["split"] == split))


class TestEndToEnd:

    def test_adaptation_beats_source_only_on_every_seed(self, benchmark):
        ctl = benchmark
        for seed in (0, 1, 2):
            source = ctl.evaluate_checkpoint(os.path.join(ctl.run_dir(seed, "pretrain"), "source_best.pt"),
                                             "source_only", split="target_eval", overlays=False)
            full = ctl.evaluate_checkpoint(os.path.join(ctl.run_dir(seed, "adapt_full"), "teacher_best.pt"),
                                           "full", split="target_eval", overlays=False)
            gain = full.get("full", "target_eval").avg - source.get("source_only", "target_eval").avg
            assert gain >= 5.0, f"seed {seed}: gain {gain:.2f}"

    def test_ablation_ordering(self, benchmark):
        rows = read_table_csv(os.path.join(benchmark.root, "ablation", "table.csv"))
        assert all(r["status"] == "ok" for r in rows)
        chain = [avg(rows, v, "target_eval") for v in ("source_only", "mt_ocl", "prior", "full")]
        for lower, higher in zip(chain, chain[1:]):
            assert higher >= lower - 0.5, chain

    def test_severity_sweep(self, benchmark):
        rows = read_table_csv(os.path.join(benchmark.root, "ablation", "table.csv"))
        curves = {v: [avg(rows, v, f"severity={s}") for s in SWEEP_LEVELS] for v in ("source_only", "full")}
        for variant, curve in curves.items():
            for a, b in zip(curve, curve[1:]):
                assert b <= a + 1.0, (variant, curve)
        gap = [f - s for f, s in zip(curves["full"], curves["source_only"])]
        assert gap[-1] >= gap[0] - 2.0

    def test_pretraining_converges(self, benchmark):
        rows = read_csv(os.path.join(benchmark.run_dir(0, "pretrain"), "pretrain_metrics.csv"))
        losses = [float(r["loss"]) for r in rows]
        assert losses[-1] <= 0.5 * losses[0]
        assert max(float(r["source_pck"]) for r in rows) >= 0.90
