import json

import numpy as np
import pytest

from agekin.cli import main

TINY_VC = {"vc": {"gan": {"base_channels": 8, "n_res_blocks": 1,
                          "tfan_hidden": 4, "disc_channels": 8},
                  "steps": 2, "batch_size": 2}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full pipeline run on a small synthetic corpus."""
    wd = tmp_path_factory.mktemp("pipeline")
    cfg = wd / "cfg.json"
    cfg.write_text(json.dumps(TINY_VC))
    steps = [
        ("--workdir", wd, "--seed", 1, "synth-corpus", "--families", 8,
         "--clips-per-speaker", 2, "--duration", 1.0),
        ("--workdir", wd, "preprocess", "--duration", 1.0),
        ("--workdir", wd, "--seed", 1, "--config", cfg, "train-vc"),
        ("--workdir", wd, "--seed", 1, "convert", "--duration", 1.0),
        ("--workdir", wd, "embed", "--dataset", "original"),
        ("--workdir", wd, "embed", "--dataset", "converted"),
        ("--workdir", wd, "--seed", 1, "train-kv", "--dataset", "original",
         "--epochs", 2),
        ("--workdir", wd, "--seed", 1, "eval", "--dataset", "original"),
        ("--workdir", wd, "--seed", 1, "train-kv", "--dataset", "converted",
         "--epochs", 2),
        ("--workdir", wd, "--seed", 1, "eval", "--dataset", "converted"),
        ("--workdir", wd, "project", "--dataset", "original",
         "--method", "pca"),
        ("--workdir", wd, "report"),
    ]
    for step in steps:
        assert run(*step) == 0, f"pipeline step failed: {step}"
    return wd


class TestPipelineArtifacts:
    def test_corpus_and_mels(self, pipeline):
        assert (pipeline / "corpus" / "manifest.jsonl").exists()
        assert (pipeline / "norm_stats.json").exists()
        bins = list((pipeline / "mels").glob("*.bin"))
        assert len(bins) >= 10

    def test_vc_checkpoints_and_history(self, pipeline):
        for direction in ("y2m", "o2m"):
            d = pipeline / "vc" / direction
            assert (d / "G" / "manifest.json").exists()
            lines = (d / "loss_history.csv").read_text().splitlines()
            assert lines[0].startswith("step,")
            assert len(lines) == 3  # header + 2 steps

    def test_converted_manifest_revalidates(self, pipeline):
        from agekin.corpus import load_manifest
        m = load_manifest(pipeline / "converted" / "manifest.jsonl")
        assert len(m.speakers) >= 16

    def test_embeddings_tables(self, pipeline):
        from agekin.embeddings import load_external_embeddings
        orig = load_external_embeddings(pipeline / "emb_original.tsv",
                                        "baseline_stats")
        conv = load_external_embeddings(pipeline / "emb_converted.tsv",
                                        "baseline_stats")
        assert set(orig) == set(conv)

    def test_kv_outputs(self, pipeline):
        d = pipeline / "kv_original"
        assert (d / "verifier.npz").exists()
        thr = json.loads((d / "threshold.json").read_text())
        assert np.isfinite(thr["threshold"])
        part = json.loads((d / "partition.json").read_text())
        assert not set(part["train"]) & set(part["test"])

    def test_eval_reports(self, pipeline):
        from agekin.kinship import EvalReport
        for ds in ("original", "converted"):
            rep = EvalReport.from_json((pipeline / f"eval_{ds}.json").read_text())
            assert 0.0 <= rep.overall_weighted <= 100.0
            assert rep.per_relation_accuracy

    def test_projection_csv(self, pipeline):
        lines = (pipeline / "proj_original.csv").read_text().splitlines()
        assert lines[0] == "clip_id,x,y,source,age_group"
        assert len(lines) > 10

    def test_report_table(self, pipeline):
        doc = json.loads((pipeline / "report.json").read_text())
        assert "original" in doc["overall"] and "converted" in doc["overall"]
        assert "compactness" in doc
        assert doc["table"].startswith("Dataset")

    def test_run_records_written(self, pipeline):
        rec = json.loads((pipeline / "run_synth_corpus.json").read_text())
        assert rec["command"] == "synth-corpus"
        assert rec["version"].startswith("agekin-")
        assert len(rec["config_hash"]) == 16


class TestOverwriteGuard:
    def test_refuses_then_forces(self, pipeline, capsys):
        rc = run("--workdir", pipeline, "--seed", 1, "synth-corpus",
                 "--families", 8, "--clips-per-speaker", 2, "--duration", 1.0)
        assert rc == 1
        assert "--force" in capsys.readouterr().err

    def test_embed_rerun_deterministic_with_force(self, pipeline):
        before = (pipeline / "emb_original.tsv").read_bytes()
        assert run("--workdir", pipeline, "--force", "embed",
                   "--dataset", "original") == 0
        assert (pipeline / "emb_original.tsv").read_bytes() == before


class TestMissingArtifactErrors:
    def test_preprocess_before_corpus(self, tmp_path, capsys):
        rc = run("--workdir", tmp_path, "preprocess")
        assert rc == 1
        assert "synth-corpus" in capsys.readouterr().err

    def test_train_vc_before_preprocess(self, tmp_path, capsys):
        assert run("--workdir", tmp_path, "--seed", 0, "synth-corpus",
                   "--families", 2, "--clips-per-speaker", 1,
                   "--duration", 0.5) == 0
        rc = run("--workdir", tmp_path, "train-vc")
        assert rc == 1
        assert "preprocess" in capsys.readouterr().err

    def test_eval_before_train_kv(self, pipeline, tmp_path, capsys):
        # borrow the pipeline corpus but a fresh workdir without kv outputs
        import shutil
        wd = tmp_path / "wd"
        wd.mkdir()
        shutil.copytree(pipeline / "corpus", wd / "corpus")
        shutil.copy(pipeline / "emb_original.tsv", wd / "emb_original.tsv")
        rc = run("--workdir", wd, "eval", "--dataset", "original")
        assert rc == 1
        assert "train-kv" in capsys.readouterr().err

    def test_unknown_external_config(self, tmp_path, capsys):
        assert run("--workdir", tmp_path, "--config",
                   tmp_path / "nope.json", "train-vc") == 1
        assert "config" in capsys.readouterr().err


class TestExternalEmbeddingPath:
    def test_embed_external_missing_clips(self, pipeline, tmp_path, capsys):
        ext = tmp_path / "ext.tsv"
        vals = ",".join(["0.0"] * 400)
        ext.write_text(f"only_one\tivector\t400\t{vals}\n")
        rc = run("--workdir", pipeline, "--force", "embed",
                 "--dataset", "original", "--kind", "ivector",
                 "--external", ext)
        assert rc == 1
        assert "missing" in capsys.readouterr().err
