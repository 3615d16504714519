"""Stage orchestration, caching, checkpoint reload, and the CLI."""

import dataclasses
import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from visdecode.cli import main
from visdecode.pipeline import (STAGES, ExperimentConfig, MissingArtifactError,
                                PipelineError, Run)


def micro_config(**kw):
    """A configuration small enough to run every stage in seconds."""
    defaults = dict(
        seed=42, n_parcels=32, n_classes=6, latent_dim=16, n_informative=4,
        n_train=18, n_test=6, n_scenarios=6, n_repeats=2,
        model_dim=16, n_layers=1, n_heads=2,
        ssl_steps=10, align_steps=30, contrast_steps=30, prior_steps=30,
        decoder_steps=50, n_tokens=4, sample_steps=3, best_of=1,
        n_way=4, n_trials=50, n_perm=200, n_clusters=3, elbow_max_k=4)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    run = Run(tmp_path_factory.mktemp("run") / "r0", micro_config())
    statuses = run.run_all()
    return run, statuses


class TestRunAll:
    def test_all_stages_done(self, finished_run):
        _, statuses = finished_run
        assert statuses == {stage: "done" for stage in STAGES}

    def test_expected_artifacts(self, finished_run):
        run, _ = finished_run
        for name in ["dataset/manifest.json", "scenarios.json",
                     "preproc_train", "network_map.tsv",
                     "checkpoints/contrastive.blob", "checkpoints/prior.blob",
                     "checkpoints/decoder.blob", "recon", "report.json",
                     "clusters.tsv", "elbow.csv", "saliency.csv",
                     "ablation.csv", "zeroshot.json", "report_table.csv"]:
            assert (run.dir / name).exists(), name

    def test_rerun_is_cached(self, finished_run):
        run, _ = finished_run
        again = Run(run.dir, micro_config())
        assert again.run_all() == {stage: "cached" for stage in STAGES}

    def test_config_change_invalidates_cache(self, finished_run):
        run, _ = finished_run
        changed = Run(run.dir, micro_config(n_trials=60))
        assert not changed._done("synth")

    def test_report_json_structure(self, finished_run):
        run, _ = finished_run
        report = json.loads((run.dir / "report.json").read_text())
        for key in ["low/pixcorr", "low/ssim", "high/alexnet2",
                    "high/alexnet5", "high/inception", "high/clip",
                    "high/eff", "high/swav", "semantic/top1", "dist/fid",
                    "retrieval/brain_vision", "retrieval/brain_language"]:
            assert key in report["metrics"], key

    def test_checkpoint_reload_reproduces_latents(self, finished_run):
        run, _ = finished_run
        reloaded = Run(run.dir, micro_config())
        trials = reloaded._load_trials("test")
        a = run.pipeline()
        b = reloaded.pipeline()
        clips_a = [a.condition_trial(t) for t in trials[:3]]
        clips_b = [b.condition_trial(t) for t in trials[:3]]
        np.testing.assert_array_equal(a.encode_clips(clips_a),
                                      b.encode_clips(clips_b))

    def test_reconstruction_deterministic(self, finished_run):
        run, _ = finished_run
        pipe = Run(run.dir, micro_config()).pipeline()
        trials = run._load_trials("test")
        clips = [pipe.condition_trial(trials[0])]
        r1 = pipe.reconstruct_clips(clips)[0]
        r2 = pipe.reconstruct_clips(clips)[0]
        np.testing.assert_array_equal(r1, r2)


class TestStageGuards:
    def test_unknown_stage(self, tmp_path):
        run = Run(tmp_path / "r", micro_config())
        with pytest.raises(PipelineError):
            run.run_stage("nope")

    def test_missing_dependency(self, tmp_path):
        run = Run(tmp_path / "r", micro_config())
        with pytest.raises(MissingArtifactError):
            run.run_stage("contrastive")

    def test_synth_runs_first(self, tmp_path):
        run = Run(tmp_path / "r", micro_config(n_train=6, n_test=2,
                                               n_scenarios=4))
        assert run.run_stage("synth") == "done"
        assert run.run_stage("synth") == "cached"


class TestConfig:
    def test_universal_mode_scales_steps(self):
        cfg = micro_config(mode="universal", n_subjects=3)
        assert cfg.training_steps(100) == 300
        assert micro_config().training_steps(100) == 100

    def test_yaml_roundtrip(self, tmp_path):
        cfg = micro_config(lr=5e-4)
        cfg.to_yaml(tmp_path / "c.yaml")
        back = ExperimentConfig.from_yaml(tmp_path / "c.yaml")
        assert back == cfg

    def test_from_yaml_with_overrides(self, tmp_path):
        micro_config().to_yaml(tmp_path / "c.yaml")
        cfg = ExperimentConfig.from_yaml(tmp_path / "c.yaml",
                                         {"n_train": 99})
        assert cfg.n_train == 99

    def test_informative_set_inside_visual_band(self):
        cfg = micro_config()
        from visdecode.preproc import make_network_map
        nm = make_network_map(cfg.n_parcels, cfg.informative_set())
        visual = set(nm.parcels_of("visual"))
        assert set(cfg.informative_set()) <= visual


class TestCli:
    def test_synth_stage_exit_zero(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VISDECODE_RUN_ROOT", str(tmp_path))
        result = CliRunner().invoke(main, [
            "synth", "--run-dir", "r1",
            "--set", "n_parcels=32", "--set", "n_classes=6",
            "--set", "latent_dim=16", "--set", "n_informative=4",
            "--set", "n_train=6", "--set", "n_test=2",
            "--set", "n_scenarios=4", "--set", "n_repeats=2",
            "--set", "model_dim=16", "--set", "n_layers=1",
            "--set", "n_heads=2", "--set", "n_tokens=4"])
        assert result.exit_code == 0, result.output
        assert "synth: done" in result.output
        assert (tmp_path / "r1" / "dataset" / "manifest.json").exists()

    def test_missing_artifact_exit_three(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VISDECODE_RUN_ROOT", str(tmp_path))
        result = CliRunner().invoke(main, ["evaluate", "--run-dir", "r2"])
        assert result.exit_code == 3
        assert "missing artifact" in result.output

    def test_bad_config_file_exit_two(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VISDECODE_RUN_ROOT", str(tmp_path))
        bad = tmp_path / "bad.yaml"
        bad.write_text("no_such_field: 1\n")
        result = CliRunner().invoke(main, ["synth", "--config", str(bad)])
        assert result.exit_code == 2
        assert "config error" in result.output

    def test_unknown_override_key(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VISDECODE_RUN_ROOT", str(tmp_path))
        result = CliRunner().invoke(main, ["synth", "--set", "bogus=1"])
        assert result.exit_code != 0

    def test_show_config_is_valid_yaml(self):
        result = CliRunner().invoke(main, ["show-config"])
        assert result.exit_code == 0
        parsed = yaml.safe_load(result.output)
        assert parsed == dataclasses.asdict(ExperimentConfig())
