import math
from collections import Counter

import numpy as np
import pytest
import torch

from config.config import PriorConfig
from control.errors import ConfigError, RejectedInputError
from models.training import split_holdout
from prior.anatomical import anatomical_loss
from prior.negatives import (PriorSample, load_samples, positive, prediction_negative, save_samples,
                             vonmises_negative)
from prior.prior_model import PriorModel, freeze, prior_distance, prior_regression_loss
from prior.training import build_prior_samples, check_provenance, load_prior, save_prior, train_prior
from skeleton.heatmap import render_targets
from skeleton.skeleton import BoneVectorSet, Pose, bone_vectors
from synth.generator import generate_split
from synth.styles import SOURCE_STYLE


@pytest.fixture
def poses13(skel13):
    return [s.pose for s in generate_split(20, 40, SOURCE_STYLE, 0, 1, "solid", 256, skel13, prefix="p_")]


def leaf_bone(skel) -> int:
    parents = {p for p, _ in skel.bones}
    return next(m for m, (_, c) in enumerate(skel.bones) if c not in parents)


class TestPriorModel:

    def test_untrained_output_is_non_negative(self, skel13):
        torch.manual_seed(0)
        prior = PriorModel(skel13, feature_dim=8, hidden_dim=16)
        x = torch.randn(10_000, skel13.num_bones, 2) * 3.0
        with torch.no_grad():
            out = prior(x)
        assert out.shape == (10_000,)
        assert int((out < 0).sum()) == 0
        assert torch.isfinite(out).all()

    def test_rejects_wrong_shape_and_non_finite(self, skel13):
        prior = PriorModel(skel13, 8, 16)
        with pytest.raises(RejectedInputError):
            prior(torch.zeros(2, skel13.num_bones + 1, 2))
        with pytest.raises(RejectedInputError):
            prior_distance(prior, BoneVectorSet(np.full((skel13.num_bones, 2), np.nan)))

    def test_translation_leaves_distance_unchanged(self, skel13, poses13):
        prior = PriorModel(skel13, 8, 16)
        pose = Pose(np.round(poses13[0].coords))
        a = prior_distance(prior, bone_vectors(pose, skel13))
        b = prior_distance(prior, bone_vectors(pose.translated(17.0, -5.0), skel13))
        assert a == b

    def test_freeze_keeps_input_gradient(self, skel13):
        prior = freeze(PriorModel(skel13, 8, 16))
        x = torch.randn(3, skel13.num_bones, 2, requires_grad=True)
        prior(x).sum().backward()
        assert x.grad is not None
        assert all(p.grad is None for p in prior.parameters())
        assert not prior.training


class TestVonMisesNegative:

    def test_no_perturbation_is_identity(self, skel13, poses13):
        rng = np.random.default_rng(0)
        s = vonmises_negative(poses13[0], skel13, 4.0, 0, rng)
        assert s.d == 0.0 and s.provenance == "ground_truth"
        np.testing.assert_allclose(s.theta.vectors, bone_vectors(poses13[0], skel13).vectors)

    def test_single_forced_rotation(self, skel13, poses13):
        angles = np.zeros(12)
        angles[4] = 0.6
        s = vonmises_negative(poses13[1], skel13, 4.0, None, np.random.default_rng(0), angles=angles)
        assert s.provenance == "vonmises"
        assert s.d == pytest.approx(0.05, abs=1e-9)

    def test_rotation_preserves_bone_lengths(self, skel13, poses13):
        base = bone_vectors(poses13[2], skel13)
        s = vonmises_negative(poses13[2], skel13, 1.0, None, np.random.default_rng(3))
        ratio = np.linalg.norm(s.theta.vectors, axis=1) * s.theta.scale / (
            np.linalg.norm(base.vectors, axis=1) * base.scale)
        np.testing.assert_allclose(ratio, 1.0, atol=1e-9)

    def test_high_concentration_gives_small_deviation(self, skel13, poses13):
        rng = np.random.default_rng(7)
        ds = [vonmises_negative(poses13[i % 20], skel13, 1000.0, 3, rng).d for i in range(1000)]
        assert np.mean(ds) < 0.01

    def test_position_mode_moves_children(self, skel13, poses13):
        s = vonmises_negative(poses13[3], skel13, 2.0, None, np.random.default_rng(1), mode="position")
        assert s.d > 0 and s.provenance == "vonmises"

    def test_rejects_bad_kappa(self, skel13, poses13):
        with pytest.raises(RejectedInputError):
            vonmises_negative(poses13[0], skel13, 0.0, None, np.random.default_rng(0))


class TestPredictionNegative:

    def test_exact_prediction_is_plausible(self, skel13, poses13):
        s = prediction_negative(poses13[0], poses13[0], skel13)
        assert s.d == 0.0 and s.provenance == "ground_truth"

    def test_flipped_bone(self, skel13, poses13):
        gt = poses13[4]
        m = leaf_bone(skel13)
        p, c = skel13.bones[m]
        coords = gt.coords.copy()
        coords[c] = coords[p] - (coords[c] - coords[p])
        s = prediction_negative(Pose(coords), gt, skel13)
        assert s.provenance == "occluded_prediction"
        assert s.d == pytest.approx(math.pi / 12, rel=1e-9)

    def test_small_error_relabelled(self, skel13, poses13):
        gt = poses13[5]
        s = prediction_negative(Pose(gt.coords + 0.01), gt, skel13, threshold=0.02)
        assert s.d == 0.0 and s.provenance == "ground_truth"

    def test_degenerate_prediction_skipped(self, skel13, poses13):
        counter = Counter()
        assert prediction_negative(Pose(np.zeros((13, 2))), poses13[0], skel13, counter=counter) is None
        assert counter["skipped_negative"] == 1


class TestPriorSamples:

    def test_provenance_must_match_d(self, skel13, poses13):
        theta = bone_vectors(poses13[0], skel13)
        with pytest.raises(RejectedInputError):
            PriorSample(theta, 0.0, "vonmises")
        with pytest.raises(RejectedInputError):
            PriorSample(theta, 0.3, "ground_truth")

    def test_single_provenance_rejected(self, skel13, poses13):
        with pytest.raises(ConfigError):
            check_provenance([positive(p, skel13) for p in poses13])

    def test_cache_round_trip(self, skel13, poses13, tmp_path):
        rng = np.random.default_rng(0)
        samples = [positive(poses13[0], skel13), vonmises_negative(poses13[1], skel13, 2.0, None, rng)]
        save_samples(str(tmp_path / "neg.jsonl"), samples)
        again = load_samples(str(tmp_path / "neg.jsonl"))
        assert [s.provenance for s in again] == [s.provenance for s in samples]
        assert [s.d for s in again] == [s.d for s in samples]

    def test_build_without_predictor(self, skel13):
        source = generate_split(5, 0, SOURCE_STYLE, 0, 1, "solid", 64, skel13)
        cfg = PriorConfig(vonmises_per_pose=2)
        samples = build_prior_samples(source, None, skel13, cfg, seed=0)
        kinds = Counter(s.provenance for s in samples)
        assert kinds["ground_truth"] >= 5
        assert kinds["ground_truth"] + kinds["vonmises"] == 15


class TestTrainPrior:

    def toy_set(self, skel13, poses13):
        rng = np.random.default_rng(0)
        angles = np.zeros(12)
        angles[:] = 0.5
        neg = [vonmises_negative(p, skel13, 1.0, None, rng, angles=angles * s)
               for p, s in ((poses13[2], 1.0), (poses13[3], -1.0))]
        return [positive(poses13[0], skel13), positive(poses13[1], skel13)] + neg

    def test_overfits_four_samples(self, skel13, poses13):
        samples = self.toy_set(skel13, poses13)
        assert [round(s.d, 6) for s in samples] == [0.0, 0.0, 0.5, 0.5]
        cfg = PriorConfig(feature_dim=16, hidden_dim=32, epochs=2000, batch_size=4, holdout_frac=0.0)
        result = train_prior(samples, skel13, cfg, seed=0)
        assert result.rows[-1]["loss"] < 1e-4

    def test_duplicated_set_has_same_initial_loss(self, skel13, poses13):
        samples = self.toy_set(skel13, poses13)
        torch.manual_seed(0)
        prior = PriorModel(skel13, 8, 16)
        x = torch.tensor(np.stack([s.theta.vectors for s in samples]), dtype=torch.float32)
        d = torch.tensor([s.d for s in samples])
        once = float(prior_regression_loss(prior, x, d))
        twice = float(prior_regression_loss(prior, torch.cat([x, x]), torch.cat([d, d])))
        assert once == pytest.approx(twice, rel=1e-6)

    def test_regression_gradient(self, skel13, poses13, fd_check):
        samples = self.toy_set(skel13, poses13)
        torch.manual_seed(0)
        prior = PriorModel(skel13, 8, 16).double()
        x = torch.tensor(np.stack([s.theta.vectors for s in samples]))
        d = torch.tensor([s.d for s in samples], dtype=torch.float64)
        weight = prior.decoder[0].weight
        assert fd_check(lambda: prior_regression_loss(prior, x, d), weight) <= 1e-3

    def test_holdout_error_reported_against_holdout_spread(self, skel13, poses13):
        rng = np.random.default_rng(4)
        samples = [positive(p, skel13) for p in poses13]
        samples += [vonmises_negative(p, skel13, 2.0, None, rng) for p in poses13]
        cfg = PriorConfig(feature_dim=8, hidden_dim=16, epochs=3, batch_size=8, holdout_frac=0.25)
        result = train_prior(samples, skel13, cfg, seed=2)

        _train, hold = split_holdout(len(samples), cfg.holdout_frac, 2)
        x = torch.tensor(np.stack([samples[i].theta.vectors for i in hold]), dtype=torch.float32)
        d = torch.tensor([samples[i].d for i in hold], dtype=torch.float32)
        with torch.no_grad():
            assert result.holdout_mse == pytest.approx(float(prior_regression_loss(result.model, x, d)), rel=1e-5)
        assert result.holdout_var == pytest.approx(float(d.var(unbiased=False)), rel=1e-5)
        assert result.rows[-1]["holdout_mse"] == result.holdout_mse

    def test_checkpoint_round_trip(self, skel13, poses13, tmp_path):
        samples = self.toy_set(skel13, poses13)
        cfg = PriorConfig(feature_dim=8, hidden_dim=16, epochs=2, batch_size=4, holdout_frac=0.25)
        result = train_prior(samples, skel13, cfg, seed=1, out_dir=str(tmp_path))
        save_prior(str(tmp_path / "prior.pt"), result, skel13)
        loaded = load_prior(str(tmp_path / "prior.pt"), skel13)
        theta = samples[2].theta
        assert prior_distance(loaded, theta) == prior_distance(result.model, theta)
        assert (tmp_path / "prior_metrics.csv").exists()


class TestAnatomicalLoss:

    @pytest.fixture
    def heatmaps(self, skel13, poses13):
        coords = np.stack([p.coords for p in poses13[:2]])
        h = render_targets(coords, np.ones(coords.shape[:2], bool), 2.0)
        return torch.from_numpy(h).double()

    def test_constant_zero_prior(self, skel13, heatmaps):
        loss = anatomical_loss(lambda v: torch.zeros(v.shape[0], dtype=v.dtype), heatmaps, skel13, 4.0)
        assert float(loss) == 0.0

    def test_singleton_mean(self, skel13, heatmaps):
        loss = anatomical_loss(lambda v: torch.full((v.shape[0],), 0.3, dtype=v.dtype), heatmaps[:1], skel13, 4.0)
        assert float(loss) == pytest.approx(0.3)

    def test_batch_mean(self, skel13, heatmaps):
        loss = anatomical_loss(lambda v: torch.tensor([0.2, 0.6], dtype=v.dtype), heatmaps, skel13, 4.0)
        assert float(loss) == pytest.approx(0.4)

    def test_degenerate_pose_contributes_zero(self, skel13, heatmaps):
        counter = Counter()
        batch = torch.cat([heatmaps[:1], torch.zeros_like(heatmaps[:1])])
        loss = anatomical_loss(lambda v: torch.ones(v.shape[0], dtype=v.dtype), batch, skel13, 4.0,
                               counter=counter)
        assert float(loss) == pytest.approx(0.5)
        assert counter["degenerate_pose"] == 1

    def test_gradient_reaches_heatmaps_not_prior(self, skel13, heatmaps, fd_check):
        torch.manual_seed(0)
        prior = freeze(PriorModel(skel13, 8, 16).double())
        before = [p.detach().clone() for p in prior.parameters()]
        h = (heatmaps + 0.05 * torch.rand_like(heatmaps)).requires_grad_(True)
        flat = h.detach().reshape(h.shape[0], h.shape[1], -1)
        peak = torch.zeros_like(flat, dtype=torch.bool)
        peak.scatter_(-1, flat.argmax(dim=-1, keepdim=True), True)
        # the peak cell sets the (detached) temperature, so it is left out of the probe
        err = fd_check(lambda: anatomical_loss(prior, h, skel13, 4.0), h, n_probe=16, where=~peak.view_as(h))
        assert err <= 1e-3
        assert all(torch.equal(a, b) for a, b in zip(before, prior.parameters()))
        assert all(p.grad is None for p in prior.parameters())
