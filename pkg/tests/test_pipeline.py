"""Pipeline orchestration: config files, artifacts, provenance, ablation, CLI."""

import dataclasses

import pytest

from serft.cli import main as cli_main
from serft.corpus import SyntheticCorpusSpec
from serft.encoder import EncoderConfig, load_checkpoint
from serft.errors import ConfigError
from serft.evaluation import EvalReport
from serft.pipeline import (
    AblationGrid,
    PipelineConfig,
    ProvenanceError,
    load_config,
    parse_config_text,
    run_ablation,
    run_pipeline,
    verify_fold_chain,
    write_config,
)
from serft.pseudolabels import ClusterConfig, read_codebooks, read_pseudo_labels


def _tiny_config(**overrides):
    base = dict(
        synthetic=SyntheticCorpusSpec(
            n_utterances=80, n_speakers=10, feature_dim=12,
            frame_range=(8, 14), separability=6.0, seed=2,
        ),
        encoder=EncoderConfig(input_dim=12, n_layers=2, model_dim=16, n_heads=2, ff_dim=24),
        cluster=ClusterConfig(scales=(4, 8), tap=-1),
        lr=1e-3,
        stage1_epochs=2,
        stage2_epochs=2,
        stage3_epochs=3,
        seed=0,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = _tiny_config()
    report = run_pipeline(cfg, out)
    return cfg, report, out


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = _tiny_config()
        write_config(cfg, tmp_path / "cfg.txt")
        back = load_config(tmp_path / "cfg.txt")
        assert back == cfg

    def test_defaults_parse(self):
        cfg = parse_config_text("")
        assert cfg.synthetic is not None
        assert cfg.cluster.scales == (8, 32, 128)
        assert cfg.cluster.tap == -3
        assert cfg.ams.m == 0.2 and cfg.ams.s == 30.0
        assert cfg.joint.alpha_e == 0.9

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("nonsense.key=1")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("train.lr=not_a_number")
        with pytest.raises(ConfigError):
            parse_config_text("mode.use_gender=maybe")

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("mode.finetune_mode=banana")

    def test_comments_ignored(self):
        cfg = parse_config_text("# a comment\n\njoint.alpha_e=0.5\n")
        assert cfg.joint.alpha_e == 0.5


class TestPipelineArtifacts:
    def test_fold_trees_complete(self, tiny_run):
        _, _, out = tiny_run
        assert (out / "report.txt").exists()
        assert (out / "config.txt").exists()
        for k in range(1, 6):
            fold = out / f"fold_{k}"
            for name in (
                "stage1.ckpt", "stage2.ckpt", "stage3.ckpt",
                "stage1.ckpt.meta", "stage2.ckpt.meta", "stage3.ckpt.meta",
                "stage1_log.csv", "stage2_log.csv", "stage3_log.csv",
                "codebooks.cbk", "codebooks.cbk.meta", "predictions.tsv",
            ):
                assert (fold / name).exists(), f"missing fold_{k}/{name}"
            assert list((fold / "gmp").glob("*.gmp"))

    def test_report_mean_line_matches(self, tiny_run):
        _, report, out = tiny_run
        assert report.summary_line() in (out / "report.txt").read_text()

    def test_label_files_round_trip(self, tiny_run):
        _, _, out = tiny_run
        path = next(iter((out / "fold_1" / "gmp").glob("*.gmp")))
        ls = read_pseudo_labels(path)
        assert ls.scales == (4, 8)
        assert ls.n_frames >= 1

    def test_checkpoint_chain_hashes(self, tiny_run):
        from serft.encoder import checkpoint_hash

        _, _, out = tiny_run
        s1 = load_checkpoint(out / "fold_2" / "stage1.ckpt")
        s2 = load_checkpoint(out / "fold_2" / "stage2.ckpt")
        s3 = load_checkpoint(out / "fold_2" / "stage3.ckpt")
        cb = read_codebooks(out / "fold_2" / "codebooks.cbk")
        verify_fold_chain(s1, cb.provenance, s2, s3)
        assert s2.metadata["upstream_hash"] == checkpoint_hash(s1)

    def test_codebooks_exclude_test_session(self, tiny_run):
        _, _, out = tiny_run
        for k in range(1, 6):
            cb = read_codebooks(out / f"fold_{k}" / "codebooks.cbk")
            sessions = cb.provenance["session_ids"].split(",")
            test_session = f"Ses{k:02d}"
            assert test_session not in sessions
            assert len(sessions) == 4

    def test_rerun_reproduces_full_report(self, tiny_run):
        cfg, report, _ = tiny_run
        again = run_pipeline(cfg)
        assert again.to_text() == report.to_text()

    def test_crossvalidate_on_prebuilt_records(self, tiny_run):
        from serft.pipeline import crossvalidate

        cfg, report, _ = tiny_run
        records = cfg.load_corpus()
        direct = crossvalidate(records, cfg)
        assert direct.summary_line() == report.summary_line()

    def test_chain_verification_rejects_mismatch(self, tiny_run):
        _, _, out = tiny_run
        s1 = load_checkpoint(out / "fold_1" / "stage1.ckpt")
        s2 = load_checkpoint(out / "fold_1" / "stage2.ckpt")
        s3 = load_checkpoint(out / "fold_1" / "stage3.ckpt")
        cb = read_codebooks(out / "fold_1" / "codebooks.cbk")
        tampered = dict(cb.provenance, checkpoint_hash="0" * 16)
        with pytest.raises(ProvenanceError):
            verify_fold_chain(s1, tampered, s2, s3)
        s2_bad = dataclasses.replace(s2, metadata=dict(s2.metadata, upstream_hash="f" * 16))
        with pytest.raises(ProvenanceError):
            verify_fold_chain(s1, cb.provenance, s2_bad, s3)

    def test_ce_ft_mode_artifacts(self, tmp_path):
        cfg = _tiny_config(finetune_mode="ce_ft", stage1_epochs=1, stage2_epochs=1, stage3_epochs=1)
        run_pipeline(cfg, tmp_path / "ce_run")
        log_header = (tmp_path / "ce_run" / "fold_1" / "stage3_log.csv").read_text().splitlines()[0]
        assert "ce_loss" in log_header
        assert "ams_loss" not in log_header
        meta = (tmp_path / "ce_run" / "fold_1" / "stage3.ckpt.meta").read_text()
        assert "finetune_mode=ce" in meta
        assert "ams_m" not in meta


class TestAblation:
    def _stub_reports(self, monkeypatch):
        calls = []

        def fake_run_pipeline(cfg, out_dir=None):
            calls.append((cfg, out_dir))
            # Score varies with config so rows are distinguishable.
            score = 0.5 + 0.1 * cfg.use_gender + 0.05 * (cfg.finetune_mode == "hybrid_ft")
            return EvalReport(folds=[], mean_war=score, mean_uar=score)

        import serft.pipeline as pl

        monkeypatch.setattr(pl, "run_pipeline", fake_run_pipeline)
        return calls

    def test_four_row_structure(self, monkeypatch, tmp_path):
        calls = self._stub_reports(monkeypatch)
        grid = AblationGrid(
            use_gender=[False, True], finetune_mode=["ce_ft", "hybrid_ft"], seeds=[0, 1]
        )
        rows = run_ablation(grid, _tiny_config(), tmp_path / "abl")
        assert [tuple(r.axes.values()) for r in rows] == [
            (False, "ce_ft"), (False, "hybrid_ft"), (True, "ce_ft"), (True, "hybrid_ft"),
        ]
        assert all(r.n_seeds == 2 for r in rows)
        assert len(calls) == 8
        table = (tmp_path / "abl" / "ablation_rows.tsv").read_text()
        assert len(table.strip().splitlines()) == 4

    def test_tap_sweep_structure(self, monkeypatch, tmp_path):
        self._stub_reports(monkeypatch)
        grid = AblationGrid(tap=[-1, -2, -3, -4, -5, -6], seeds=[0])
        base = _tiny_config(encoder=EncoderConfig(input_dim=12, n_layers=6, model_dim=16, n_heads=2, ff_dim=24))
        rows = run_ablation(grid, base, tmp_path / "taps")
        assert [r.axes["tap"] for r in rows] == [-1, -2, -3, -4, -5, -6]

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            AblationGrid(seeds=[0]).validate()
        with pytest.raises(ConfigError):
            AblationGrid(tap=[-1], seeds=[]).validate()

    def test_partial_rows_flushed_per_cell(self, monkeypatch, tmp_path):
        import serft.pipeline as pl

        seen = []

        def fake_run_pipeline(cfg, out_dir=None):
            seen.append(cfg.seed)
            if len(seen) == 2:
                raise ConfigError("synthetic failure")
            return EvalReport(folds=[], mean_war=0.5, mean_uar=0.5)

        monkeypatch.setattr(pl, "run_pipeline", fake_run_pipeline)
        grid = AblationGrid(tap=[-1, -2], seeds=[0])
        base = _tiny_config()
        with pytest.raises(ConfigError):
            run_ablation(grid, base, tmp_path / "abl")
        table = (tmp_path / "abl" / "ablation_rows.tsv").read_text()
        assert len(table.strip().splitlines()) == 1  # first cell survived


class TestCLI:
    def test_synth_and_stagewise_flow(self, tmp_path, capsys):
        cfg = _tiny_config(
            synthetic=SyntheticCorpusSpec(
                n_utterances=30, n_speakers=10, feature_dim=12,
                frame_range=(6, 10), separability=6.0, seed=3,
            ),
            batch_size=30,
            stage1_epochs=1, stage2_epochs=1, stage3_epochs=1,
        )
        write_config(cfg, tmp_path / "cfg.txt")
        assert cli_main(["synth", "--config", str(tmp_path / "cfg.txt"), "--out-dir", str(tmp_path / "data")]) == 0
        manifest = tmp_path / "data" / "manifest.tsv"
        assert manifest.exists()

        args = ["--config", str(tmp_path / "cfg.txt"), "--manifest", str(manifest)]
        assert cli_main(["train-stage1", *args, "--out", str(tmp_path / "s1.ckpt")]) == 0
        assert cli_main([
            "extract-gmp", *args, "--checkpoint", str(tmp_path / "s1.ckpt"),
            "--out-dir", str(tmp_path / "labels"),
        ]) == 0
        assert cli_main([
            "train-stage2", *args, "--checkpoint", str(tmp_path / "s1.ckpt"),
            "--gmp-dir", str(tmp_path / "labels" / "gmp"), "--out", str(tmp_path / "s2.ckpt"),
        ]) == 0
        assert cli_main([
            "train-stage3", *args, "--checkpoint", str(tmp_path / "s2.ckpt"),
            "--out", str(tmp_path / "s3.ckpt"),
        ]) == 0
        assert cli_main([
            "evaluate", *args, "--checkpoint", str(tmp_path / "s3.ckpt"),
        ]) == 0
        out = capsys.readouterr().out
        assert "UAR=" in out

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("nonsense.key=1\n")
        assert cli_main(["crossval", "--config", str(bad)]) == 2
        assert cli_main(["crossval", "--config", str(tmp_path / "missing.txt")]) == 2

    def test_data_error_exit_code(self, tmp_path):
        cfg = _tiny_config(stage1_epochs=1)
        write_config(cfg, tmp_path / "cfg.txt")
        # Manifest pointing nowhere -> data error (3).
        missing = tmp_path / "nope.tsv"
        missing.write_text("u1\tmissing.ftm\tangry\tmale\tspkA\tSes01\n")
        code = cli_main([
            "train-stage1", "--config", str(tmp_path / "cfg.txt"),
            "--manifest", str(missing), "--out", str(tmp_path / "x.ckpt"),
        ])
        assert code == 3

    def test_training_divergence_exit_code(self, tmp_path, monkeypatch):
        from serft.errors import TrainingDivergedError
        import serft.cli as cli

        def explode(cfg, out_dir=None):
            raise TrainingDivergedError("non-finite loss during stage 1")

        monkeypatch.setattr(cli, "run_pipeline", explode)
        cfg = _tiny_config()
        write_config(cfg, tmp_path / "cfg.txt")
        assert cli_main(["crossval", "--config", str(tmp_path / "cfg.txt")]) == 4

    def test_feature_dim_mismatch_is_config_error(self, tmp_path):
        # Manifest features are 12-dim but the config's encoder expects 40.
        cfg = _tiny_config(stage1_epochs=1)
        write_config(cfg, tmp_path / "cfg.txt")
        small = _tiny_config(
            synthetic=SyntheticCorpusSpec(
                n_utterances=10, n_speakers=10, feature_dim=12,
                frame_range=(5, 8), separability=1.0, seed=0,
            )
        )
        from serft.corpus import write_manifest

        write_manifest(small.load_corpus(), tmp_path / "m.tsv", tmp_path / "features")
        wide = parse_config_text("stage1.epochs=1\n")  # encoder.input_dim default 40
        write_config(wide, tmp_path / "wide.txt")
        code = cli_main([
            "train-stage1", "--config", str(tmp_path / "wide.txt"),
            "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "s1.ckpt"),
        ])
        assert code == 2

    def test_artifact_root_env(self, tmp_path, monkeypatch):
        from serft.pipeline import resolve_artifact_dir

        monkeypatch.setenv("SERFT_ARTIFACT_ROOT", str(tmp_path / "root"))
        assert resolve_artifact_dir("runs/a") == tmp_path / "root" / "runs" / "a"
        assert resolve_artifact_dir(tmp_path / "abs") == tmp_path / "abs"
