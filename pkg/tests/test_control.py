import json
import math
import os
from collections import defaultdict

import numpy as np
import pytest
import torch
import torch.nn as nn

from adapt.engine import STEP_FIELDS
from conftest import tiny_config, tiny_network
from control.ablation import FLAG_COLUMNS, aggregate_rows, run_ablation
from control.controller import SPLITS, SWEEP_LEVELS, ExperimentController, sweep_split
from control.errors import CheckpointError, NonFiniteLossError, PoseAdaptError
from control.evaluation import (ResultRow, ResultTable, avg_from_records, evaluate_samples, group_columns,
                                row_from_pck, sample_records)
from control.report import build_report, gamma_schedule, winners
from iodev.csv_log import CsvLog, read_csv
from iodev.dataset_io import EVAL_LABELS, MANIFEST
from main import main
from models.manager import CheckpointManager
from skeleton.heatmap import render_targets
from synth.generator import generate_split
from synth.styles import TARGET_STYLE
from ui import plots


def write_config(cfg, path) -> str:
    cfg.snapshot(str(path))
    return str(path)


def last_error_line(capsys) -> str:
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("error ")]
    return lines[-1] if lines else ""


class OracleNet(nn.Module):
    """Looks every input image up in a table of rendered ground-truth heatmaps."""

    def __init__(self, samples, skel, image_size: int = 64, heatmap_size: int = 16):
        super().__init__()
        self.image_size, self.heatmap_size, self.num_joints = image_size, heatmap_size, skel.num_joints
        scale = image_size / heatmap_size
        self.table = {}
        for s in samples:
            h = render_targets(s.pose.coords, np.ones(skel.num_joints, bool), 1.0,
                               (heatmap_size, heatmap_size), scale)
            self.table[s.image.tobytes()] = torch.from_numpy(h)

    def forward(self, x):
        images = (x.permute(0, 2, 3, 1) * 255.0).round().to(torch.uint8).numpy()
        return torch.stack([self.table[im.tobytes()] for im in images])


# ---------- generate ----------

class TestGenerate:

    def test_writes_every_split_and_refuses_rerun(self, cfg, tmp_path, capsys):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        assert ctl.run("generate") == 0
        for name in SPLITS:
            assert os.path.exists(os.path.join(ctl.data_dir(name), MANIFEST)), name

        again = ExperimentController(cfg, str(tmp_path / "out"))
        assert again.run("generate") == 2
        assert again.state == "error"
        assert last_error_line(capsys).startswith("error code=refusal_error command=generate")
        assert ExperimentController(cfg, str(tmp_path / "out"), force=True).run("generate") == 0

    def test_force_clears_stale_sweep_splits(self, cfg, tmp_path):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        assert ctl.run("generate", severity_sweep=True) == 0
        assert os.path.isdir(ctl.data_dir(sweep_split(SWEEP_LEVELS[0])))

        forced = ExperimentController(cfg, str(tmp_path / "out"), force=True)
        assert forced.run("generate") == 0
        assert not any(os.path.exists(forced.data_dir(sweep_split(s))) for s in SWEEP_LEVELS)
        assert forced._eval_splits(None) == ["target_eval", "target_eval_clean"]

    def test_same_seed_same_data(self, cfg, tmp_path):
        for root in ("a", "b"):
            assert ExperimentController(cfg, str(tmp_path / root)).run("generate") == 0
        for name in SPLITS:
            with open(tmp_path / "a" / "data" / name / MANIFEST) as fa, open(tmp_path / "b" / "data" / name / MANIFEST) as fb:
                assert json.load(fa) == json.load(fb)
            with open(tmp_path / "a" / "data" / name / "annotations.jsonl", "rb") as fa, \
                    open(tmp_path / "b" / "data" / name / "annotations.jsonl", "rb") as fb:
                assert fa.read() == fb.read()

    def test_severity_sweep_shares_figures(self, cfg, tmp_path):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        assert ctl.run("generate", severity_sweep=True) == 0
        seeds, histograms = set(), []
        for s in SWEEP_LEVELS:
            with open(os.path.join(ctl.data_dir(sweep_split(s)), MANIFEST)) as f:
                m = json.load(f)
            seeds.add(m["generator"]["base_seed"])
            histograms.append(m["severity_histogram"])
        assert len(seeds) == 1
        assert histograms[0] == {"1": cfg.data.n_sweep_eval}

    def test_split_seeds_do_not_collide(self, cfg, tmp_path):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        assert ctl.run("generate") == 0
        bases = []
        for name in SPLITS:
            with open(os.path.join(ctl.data_dir(name), MANIFEST)) as f:
                bases.append(json.load(f)["generator"]["base_seed"])
        assert len(set(bases)) == len(SPLITS)


# ---------- evaluation ----------

class TestEvaluation:

    def test_oracle_scores_full_marks(self, skel):
        samples = generate_split(6, 77, TARGET_STYLE, [1, 5], 1, "mixed", 64, skel)
        outcome = evaluate_samples(OracleNet(samples, skel), samples, skel, 0.05, 64)
        row = row_from_pck("oracle", "all", outcome.result, skel)
        assert row.avg == 100.0
        assert all(v == 100.0 for v in row.values.values())

    def test_records_reproduce_avg(self, skel, tiny_net):
        samples = generate_split(6, 78, TARGET_STYLE, [1, 5], 1, "mixed", 64, skel)
        outcome = evaluate_samples(tiny_net, samples, skel, 0.05, 64)
        assert avg_from_records(sample_records(outcome)) == pytest.approx(100.0 * outcome.result.mean, abs=1e-9)

    def test_skeleton_mismatch_refused(self, cfg, tmp_path, skel5, capsys):
        net = tiny_network(skel5.num_joints)
        path = str(tmp_path / "toy.pt")
        CheckpointManager().save(path, "posenet", net.architecture(), net, skel5.skeleton_hash())
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        assert ctl.run("evaluate", checkpoint=path) == 2
        assert "skeleton hash mismatch" in last_error_line(capsys)

    def test_missing_checkpoint(self, cfg, tmp_path):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        assert ctl.run("evaluate", checkpoint=str(tmp_path / "absent.pt")) == CheckpointError.exit_code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> pretrain -> train-prior -> adapt on the tiny config, shared by the tests below."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = tiny_config(str(root / "out"))
    ctl = ExperimentController(cfg)
    for command, kwargs in (("generate", {"severity_sweep": True}), ("pretrain", {}), ("train-prior", {}),
                            ("adapt", {"variant": "full"})):
        assert ctl.run(command, **kwargs) == 0, command
    return cfg, ctl


class TestPipeline:

    def test_stage_outputs(self, pipeline):
        _, ctl = pipeline
        assert os.path.exists(os.path.join(ctl.run_dir(0, "pretrain"), "source_best.pt"))
        prior_dir = ctl.run_dir(0, "prior")
        assert os.path.exists(os.path.join(prior_dir, "prior.pt"))
        with open(os.path.join(prior_dir, "negatives.jsonl")) as f:
            kinds = {json.loads(line)["provenance"] for line in f}
        assert "ground_truth" in kinds and len(kinds) > 1
        assert os.path.exists(os.path.join(ctl.run_dir(0, "adapt_full"), "teacher_best.pt"))

    def test_evaluate_twice_gives_identical_tables(self, pipeline, tmp_path):
        cfg, ctl = pipeline
        ckpt = os.path.join(ctl.run_dir(0, "adapt_full"), "teacher_best.pt")
        tables = []
        for _ in range(2):
            again = ExperimentController(cfg, ctl.root, force=True)
            assert again.run("evaluate", checkpoint=ckpt, name="twice") == 0
            with open(os.path.join(ctl.root, "eval", "twice", "table.csv"), "rb") as f:
                tables.append(f.read())
        assert tables[0] == tables[1]

        rows = read_csv(os.path.join(ctl.root, "eval", "twice", "table.csv"))
        splits = {r["split"] for r in rows}
        assert {"target_eval", "target_eval_clean"} <= splits
        assert {f"severity={s}" for s in SWEEP_LEVELS} <= splits
        with open(os.path.join(ctl.root, "eval", "twice", "target_eval_records.jsonl")) as f:
            records = [json.loads(line) for line in f]
        avg = float(next(r["Avg"] for r in rows if r["split"] == "target_eval"))
        assert avg_from_records(records) == pytest.approx(avg, abs=1e-9)

    def test_eval_labels_never_reach_training(self, pipeline, tmp_path):
        """Removing the eval label file leaves the adaptation loss log unchanged."""
        cfg, ctl = pipeline
        steps = os.path.join(ctl.run_dir(0, "adapt_full"), "adapt_steps.csv")
        before = read_csv(steps)
        labels = os.path.join(ctl.data_dir("target_eval"), EVAL_LABELS)
        kept = labels + ".bak"
        os.rename(labels, kept)
        try:
            assert ExperimentController(cfg, ctl.root, force=True).run("adapt", variant="full") == 0
        finally:
            os.rename(kept, labels)
        assert read_csv(steps) == before

    def test_report_over_the_run(self, pipeline):
        _, ctl = pipeline
        assert ExperimentController(ctl.cfg, ctl.root, force=True).run("report") == 0
        out = os.path.join(ctl.root, "report")
        for name in ("seed0_adapt_full_pck_epoch.png", "seed0_adapt_full_losses.png",
                     "seed0_adapt_full_gamma.png", "summary.txt"):
            assert os.path.exists(os.path.join(out, name)), name


# ---------- ablation ----------

class TestAblation:

    def table(self, variant, avg, columns):
        t = ResultTable(columns)
        t.add(ResultRow(variant, "target_eval", {c: avg for c in columns}, avg, n=4))
        return t

    def test_mean_and_sample_std(self, skel):
        columns = group_columns(skel)
        rows = aggregate_rows("full", [self.table("full", 50.0, columns), self.table("full", 70.0, columns)],
                              columns, {"L_vis": True})
        assert len(rows) == 1
        assert rows[0].avg == pytest.approx(60.0)
        assert rows[0].std["Avg"] == pytest.approx(math.sqrt(200.0))
        assert rows[0].flags == {"L_vis": True}

    def test_single_seed_has_zero_std(self, skel):
        columns = group_columns(skel)
        rows = aggregate_rows("full", [self.table("full", 50.0, columns)], columns, {})
        assert rows[0].std["Avg"] == 0.0

    def test_failed_variant_kept_in_table(self, cfg, tmp_path, skel, monkeypatch):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        columns = group_columns(skel)
        calls = defaultdict(int)

        def ensure_stage(seed, stage, **kwargs):
            if stage == "adapt_prior":
                raise NonFiniteLossError("ant", float("nan"))
            return f"{stage}-{seed}.pt"

        def evaluate_checkpoint(ckpt, name, split=None, out=None, overlays=True):
            calls[name] += 1
            return self.table(name, 50.0 if calls[name] == 1 else 70.0, columns)

        monkeypatch.setattr(ctl, "ensure_stage", ensure_stage)
        monkeypatch.setattr(ctl, "evaluate_checkpoint", evaluate_checkpoint)
        table = run_ablation(ctl, [0, 1])

        assert table.get("prior", "target_eval").status == "failed"
        assert table.get("full", "target_eval").avg == pytest.approx(60.0)
        rows = read_csv(os.path.join(ctl.root, "ablation", "table.csv"))
        assert [r["variant"] for r in rows] == ["source_only", "mt_ocl", "prior", "full"]
        failed = next(r for r in rows if r["variant"] == "prior")
        assert failed["Avg"] == "failed"
        full = next(r for r in rows if r["variant"] == "full")
        assert [full[f] for f in FLAG_COLUMNS] == ["x", "x", "x", "x"]
        assert float(full["Avg_std"]) == pytest.approx(math.sqrt(200.0))

    def test_unexpected_exception_marks_row_failed(self, cfg, tmp_path, skel, monkeypatch):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        columns = group_columns(skel)

        def ensure_stage(seed, stage, **kwargs):
            if stage == "adapt_prior":
                raise RuntimeError("mat1 and mat2 shapes cannot be multiplied")
            return f"{stage}-{seed}.pt"

        monkeypatch.setattr(ctl, "ensure_stage", ensure_stage)
        monkeypatch.setattr(ctl, "evaluate_checkpoint",
                            lambda ckpt, name, split=None, out=None, overlays=True: self.table(name, 50.0, columns))
        table = run_ablation(ctl, [0])

        assert table.get("prior", "target_eval").status == "failed"
        assert table.get("full", "target_eval").status == "ok"
        rows = read_csv(os.path.join(ctl.root, "ablation", "table.csv"))
        assert [r["variant"] for r in rows] == ["source_only", "mt_ocl", "prior", "full"]

    def test_variant_switches(self, cfg, tmp_path):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        mt = ctl.variant_config("mt_ocl").adapt
        assert (mt.lambda_a, mt.gamma_mode) == (0.0, "zero")
        assert ctl.variant_config("prior").adapt.gamma_mode == "zero"
        assert ctl.variant_config("full").adapt.gamma_mode == "schedule"
        with pytest.raises(PoseAdaptError):
            ctl.variant_config("bogus")


# ---------- report ----------

class TestReport:

    def test_gamma_trace_endpoints(self):
        xs, gammas = gamma_schedule(70)
        assert xs[0] == 0 and xs[-1] == 70
        assert gammas[0] == 1.0
        assert gammas[-1] == pytest.approx(math.exp(-1), abs=1e-12)
        assert all(a > b for a, b in zip(gammas, gammas[1:]))
        assert set(gamma_schedule(5, "zero")[1]) == {0.0}

    def test_winners_skip_failed_rows(self):
        rows = [{"variant": "source_only", "split": "target_eval", "Avg": "41.0", "status": "ok"},
                {"variant": "full", "split": "target_eval", "Avg": "55.5", "status": "ok"},
                {"variant": "prior", "split": "target_eval", "Avg": "failed", "status": "failed"},
                {"variant": "mt_ocl", "split": "severity=5", "Avg": "", "status": "ok"}]
        assert winners(rows) == {"target_eval": ("full", 55.5)}

    def test_severity_plot_has_five_ticks(self, tmp_path):
        rows = [{"variant": v, "split": f"severity={s}", "Avg": str(80 - 10 * s + b), "status": "ok"}
                for v, b in (("source_only", 0), ("full", 5)) for s in SWEEP_LEVELS]
        _, ax = plots.pck_vs_severity(rows, str(tmp_path / "sev.png"))
        assert list(ax.get_xticks()) == [1, 2, 3, 4, 5]
        assert len(ax.get_lines()) == 2

    def test_build_report_from_files(self, tmp_path, skel):
        root = tmp_path / "out"
        run = root / "runs" / "seed0" / "adapt_full"
        tiny_config(str(root)).snapshot(str(run / "config.json"))
        columns = group_columns(skel)
        with CsvLog(str(run / "adapt_epochs.csv"), ["epoch", "model", "gamma", "split", "n"] + columns + ["Avg"]) as log:
            for e in range(2):
                for model in ("student", "teacher"):
                    log.write({"epoch": e, "model": model, "gamma": math.exp(-e / 2), "split": "all", "n": 4,
                               "Avg": 40.0 + e})
        with CsvLog(str(run / "adapt_steps.csv"), STEP_FIELDS) as log:
            for step in range(4):
                log.write({k: 0.0 for k in STEP_FIELDS} | {"step": step, "total": 1.0 / (step + 1)})

        table = ResultTable(columns, FLAG_COLUMNS)
        for variant, base in (("source_only", 30.0), ("full", 45.0)):
            table.add(ResultRow(variant, "target_eval", {}, base))
            for s in SWEEP_LEVELS:
                table.add(ResultRow(variant, f"severity={s}", {}, base + 10 - 2 * s))
        table.write_csv(str(root / "ablation" / "table.csv"))

        best = build_report(str(root), [], str(root / "report"))
        assert best["target_eval"] == ("full", 45.0)
        for name in ("seed0_adapt_full_pck_epoch.png", "seed0_adapt_full_losses.png",
                     "seed0_adapt_full_gamma.png", "pck_severity.png"):
            assert (root / "report" / name).exists(), name
        summary = (root / "report" / "summary.txt").read_text().splitlines()
        assert summary[0] == "split  winner  Avg"
        assert "target_eval  full  45.00" in summary

    def test_missing_inputs_only_drop_figures(self, tmp_path):
        run = tmp_path / "runs" / "seed0" / "adapt_full"
        run.mkdir(parents=True)
        assert build_report(str(tmp_path), [str(run)], str(tmp_path / "report")) == {}
        assert (tmp_path / "report" / "summary.txt").read_text().strip().endswith("(no results)")


# ---------- CLI ----------

class TestMain:

    def test_generate_then_refuse(self, cfg, tmp_path, capsys):
        path = write_config(cfg, tmp_path / "cfg.json")
        out = str(tmp_path / "out")
        assert main(["generate", "--config", path, "--out", out]) == 0
        assert main(["generate", "--config", path, "--out", out]) == 2
        assert last_error_line(capsys).startswith("error code=refusal_error")
        assert main(["generate", "--config", path, "--out", out, "--force"]) == 0

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"adapt": {"tau": 2.0}}))
        assert main(["generate", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
        assert last_error_line(capsys).startswith("error code=config_error command=generate")
        assert main(["generate", "--config", str(tmp_path / "absent.json")]) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"adapt": {"tau": 0.5, "momentum": 0.9}}))
        assert main(["pretrain", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
        assert "momentum" in last_error_line(capsys)

    def test_missing_data_exit_code(self, cfg, tmp_path, capsys):
        path = write_config(cfg, tmp_path / "cfg.json")
        assert main(["pretrain", "--config", path, "--out", str(tmp_path / "out")]) == 3
        assert last_error_line(capsys).startswith("error code=dataset_error command=pretrain")

    def test_non_finite_loss_exit_code(self, cfg, tmp_path, capsys):
        ctl = ExperimentController(cfg, str(tmp_path / "out"))
        ctl.command = "adapt"
        assert ctl.raise_error(NonFiniteLossError("pred_vis", float("inf"))) == 4
        line = last_error_line(capsys)
        assert line.startswith("error code=non_finite_loss_error command=adapt")
        assert "pred_vis" in line
