"""End-to-end command-line checks: artifacts, precedence, exit codes."""

import json
import shutil

import numpy as np
import pytest

from mulcom.cli import main
from mulcom.data import Dataset, load_dataset, save_dataset
from mulcom.graph import EntityMentions, FeatureDoc
from mulcom.model import ModelConfig, build_model, load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    base = tmp_path_factory.mktemp("ds")
    rc = main([
        "synth", "--out", str(base), "--docs", "30", "--vocab", "24",
        "--d-w", "6", "--d-s", "5", "--seed", "5",
    ])
    assert rc == 0
    return str(base / "manifest.json")


TINY_TRAIN = [
    "--d-f", "8", "--d-a", "8", "--d-h", "8",
    "--reasoner-steps", "2", "--reasoner-heads", "2",
]


class TestSynth:
    def test_writes_loadable_dataset(self, tiny_manifest):
        ds = load_dataset(tiny_manifest)
        assert ds.num_tropes == 8
        assert len(ds.split("train")) == 24
        assert len(ds.split("val")) == 6

    def test_flag_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "docs": 25, "vocab": 24, "d_w": 4, "d_s": 4,
            "token_tropes": 1, "motif_tropes": 1,
        }))
        rc = main([
            "synth", "--config", str(cfg), "--out", str(tmp_path / "ds"),
            "--docs", "10",
        ])
        assert rc == 0
        ds = load_dataset(str(tmp_path / "ds" / "manifest.json"))
        assert sum(len(v) for v in ds.splits.values()) == 10
        assert ds.num_tropes == 2


class TestTrain:
    def test_epochs_zero_checkpoint_equals_init(self, tiny_manifest, tmp_path):
        rc = main([
            "train", "--data", tiny_manifest, "--out", str(tmp_path),
            "--epochs", "0", "--seed", "7", "--streams", "word", *TINY_TRAIN,
        ])
        assert rc == 0
        got = load_checkpoint(str(tmp_path / "checkpoint.json"))
        fresh = build_model(got.cfg, seed=7)
        for name, t in fresh.named_parameters().items():
            np.testing.assert_array_equal(t.data, got.named_parameters()[name].data)
        report = json.loads((tmp_path / "train_report.json").read_text())
        assert report["result"]["epochs_run"] == 0
        assert report["result"]["epoch_losses"] == []
        assert report["seed"] == 7
        assert report["config"]["streams"] == ["word"]

    def test_identical_runs_byte_identical_artifacts(self, tiny_manifest, tmp_path):
        out = tmp_path / "run"
        argv = [
            "train", "--data", tiny_manifest, "--out", str(out),
            "--epochs", "1", "--seed", "3", "--streams", "word,relation",
            *TINY_TRAIN,
        ]
        assert main(argv) == 0
        stash = tmp_path / "stash"
        shutil.copytree(out, stash)
        assert main(argv) == 0
        for fname in ("checkpoint.json", "train_report.json"):
            assert (out / fname).read_bytes() == (stash / fname).read_bytes()

    def test_bad_stream_name_is_usage_error(self, tiny_manifest, tmp_path):
        rc = main([
            "train", "--data", tiny_manifest, "--out", str(tmp_path),
            "--streams", "word,telepathy", *TINY_TRAIN,
        ])
        assert rc == 2


class TestEval:
    def test_perfect_prediction_reports_100(self, tmp_path):
        # Bias-only predictor that always fires, on all-positive labels.
        rng = np.random.default_rng(0)
        docs = [
            FeatureDoc(
                doc_id=f"d{i}",
                word_feats=rng.standard_normal((3, 4)),
                sent_feats=rng.standard_normal((2, 4)),
                entities=[EntityMentions("a", (0,))],
                labels=(0, 1),
            )
            for i in range(4)
        ]
        ds = Dataset(trope_names=["t0", "t1"], splits={"test": docs})
        manifest = save_dataset(ds, str(tmp_path / "ds"))
        cfg = ModelConfig(num_tropes=2, d_w=4, d_s=4, d_f=8, d_a=8, d_h=8,
                          reasoner_steps=1, reasoner_heads=1,
                          streams=("word",))
        model = build_model(cfg, seed=0)
        last = model.predictor.layers[-1]
        last.w.data[:] = 0.0
        last.b.data[:] = 10.0
        ckpt = tmp_path / "ckpt.json"
        save_checkpoint(model, str(ckpt))
        rc = main([
            "eval", "--data", manifest, "--checkpoint", str(ckpt),
            "--out", str(tmp_path), "--split", "test",
        ])
        assert rc == 0
        report = json.loads((tmp_path / "eval_report.json").read_text())
        assert report["report"]["micro_f1"] == 100.0
        assert report["report"]["macro_f1"] == 100.0
        assert report["report"]["mAP"] == 100.0
        assert report["config"]["split"] == "test"
        assert report["model_config"]["streams"] == ["word"]

    def test_trope_count_mismatch_is_runtime_error(self, tiny_manifest, tmp_path):
        cfg = ModelConfig(num_tropes=3, d_w=6, d_s=5, d_f=8, d_a=8, d_h=8,
                          reasoner_steps=1, reasoner_heads=1, streams=("word",))
        ckpt = tmp_path / "ckpt.json"
        save_checkpoint(build_model(cfg, seed=0), str(ckpt))
        rc = main([
            "eval", "--data", tiny_manifest, "--checkpoint", str(ckpt),
            "--out", str(tmp_path),
        ])
        assert rc == 1


class TestStatsAndCooccur:
    def test_stats_report_shape(self, tiny_manifest, tmp_path):
        rc = main(["stats", "--data", tiny_manifest, "--out", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "stats_report.json").read_text())
        assert set(report["stats"]) == {"train", "val"}
        train = report["stats"]["train"]
        assert set(train) == {"tropes", "words", "sentences", "roles", "corefs"}
        assert set(train["tropes"]) == {"median", "average", "min", "max", "std"}
        assert len(report["prevalence"]["train"]) == 8
        assert set(report["prevalence_summary"]["train"]) == {"median", "max", "min"}

    def test_cooccur_top_limit_and_order(self, tiny_manifest, tmp_path):
        rc = main([
            "cooccur", "--data", tiny_manifest, "--out", str(tmp_path),
            "--top", "5",
        ])
        assert rc == 0
        report = json.loads((tmp_path / "cooccur_report.json").read_text())
        assert len(report["pairs"]) == 5
        ious = [p["iou"] for p in report["pairs"]]
        assert ious == sorted(ious, reverse=True)


class TestGradcheckCommand:
    def test_default_passes(self, tmp_path):
        rc = main([
            "gradcheck", "--max-coords", "3", "--out", str(tmp_path),
        ])
        assert rc == 0
        report = json.loads((tmp_path / "gradcheck_report.json").read_text())
        names = [c["name"] for c in report["checks"]]
        assert "full_model" in names and "message_mlp" in names
        assert all(c["ok"] for c in report["checks"])

    def test_unreachable_tolerance_fails(self):
        rc = main(["gradcheck", "--max-coords", "2", "--tolerance", "1e-18"])
        assert rc == 1


class TestExitCodes:
    def test_missing_required_flag(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tiny_manifest, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"bogus": 1}')
        rc = main([
            "stats", "--config", str(cfg), "--data", tiny_manifest,
            "--out", str(tmp_path),
        ])
        assert rc == 2

    def test_config_file_not_json(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("not json {")
        assert main(["stats", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_missing_dataset_is_runtime_error(self, tmp_path):
        rc = main([
            "stats", "--data", str(tmp_path / "gone.json"),
            "--out", str(tmp_path),
        ])
        assert rc == 1

    def test_bad_threads_value(self, tiny_manifest, tmp_path):
        rc = main([
            "stats", "--data", tiny_manifest, "--out", str(tmp_path),
            "--threads", "0",
        ])
        assert rc == 2
