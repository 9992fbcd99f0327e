import json
import os

import numpy as np
import pytest

from rcmcl.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    main,
)
from rcmcl.config import ConfigError, load_config, parse_config
from rcmcl.data import load_manifest
from rcmcl.model import load_checkpoint

CONFIG = {
    "seed": 0,
    "n_per_class": 6,
    "train_fraction": 0.5,
    "generator": {"num_classes": 3, "frames": 4, "joints": 4,
                  "points_per_frame": 8, "rgbd_dim": 10},
    "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 6,
              "feature_dim": 8, "proj_dim": 4, "hidden_dim": 8,
              "probe_epochs": 40, "finetune_epochs": 1},
    "robustness": {"sjn_grid": [0.1], "pcs_grid": [0.5], "seeds": [0]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared config + generated data + pretrained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    data = str(root / "data")
    run = str(root / "run")
    assert main(["gen-data", "--config", str(cfg_path), "--out", data]) == EXIT_OK
    assert main(["pretrain", "--config", str(cfg_path), "--data", data,
                 "--out", run]) == EXIT_OK
    return {"root": root, "config": str(cfg_path), "data": data, "run": run,
            "checkpoint": os.path.join(run, "checkpoint.rcmc")}


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = parse_config({})
        assert cfg.seed == 0
        assert cfg.train.loss.temperature == 0.07
        assert cfg.robustness.seeds == (0, 1, 2)

    def test_digest_stable_and_seed_sensitive(self):
        a = parse_config(CONFIG)
        b = parse_config(CONFIG)
        c = parse_config(CONFIG, seed_override=5)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()
        assert c.seed == 5 and c.generator.seed == 5 and c.train.seed == 5

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            parse_config({"bogus": 1})
        with pytest.raises(ConfigError, match="train section"):
            parse_config({"train": {"bogus": 1}})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"train_fraction": 1.5})
        with pytest.raises(ConfigError):
            parse_config({"loss": {"temperature": -1}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "nope.json"))

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(str(p))


class TestGenData:
    def test_outputs_and_split(self, workspace):
        manifest = load_manifest(workspace["data"])
        ids = manifest["split"]
        n = CONFIG["n_per_class"] * CONFIG["generator"]["num_classes"]
        assert sorted(ids["train"] + ids["test"]) == list(range(n))
        assert manifest["config_digest"] == \
            load_config(workspace["config"]).digest()

    def test_rerun_byte_identical(self, workspace, tmp_path):
        out2 = str(tmp_path / "data2")
        assert main(["gen-data", "--config", workspace["config"],
                     "--out", out2]) == EXIT_OK
        for name in ("rgbd.bin", "skeleton.bin", "points.bin", "labels.bin",
                     "manifest.json"):
            a = open(os.path.join(workspace["data"], name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b, name

    def test_threads_flag_is_result_invariant(self, workspace, tmp_path):
        out2 = str(tmp_path / "data_t4")
        assert main(["gen-data", "--config", workspace["config"],
                     "--out", out2, "--threads", "4"]) == EXIT_OK
        a = open(os.path.join(workspace["data"], "rgbd.bin"), "rb").read()
        b = open(os.path.join(out2, "rgbd.bin"), "rb").read()
        assert a == b

    def test_bad_threads_value(self, workspace, tmp_path):
        assert main(["gen-data", "--config", workspace["config"],
                     "--out", str(tmp_path / "x"),
                     "--threads", "0"]) == EXIT_CONFIG


class TestPretrainCommand:
    def test_artifacts(self, workspace):
        assert os.path.exists(workspace["checkpoint"])
        history = open(os.path.join(workspace["run"],
                                    "loss_history.csv")).read()
        lines = history.strip().split("\n")
        assert lines[0] == "epoch,l_cm,l_im,l_deg,l_fusion,l_total,lr"
        assert len(lines) == CONFIG["train"]["epochs"] + 1

    def test_checkpoint_metadata(self, workspace):
        _, meta = load_checkpoint(workspace["checkpoint"])
        assert meta["phase"] == "pretrain"
        assert meta["config_digest"] == \
            load_config(workspace["config"]).digest()

    def test_rerun_byte_identical(self, workspace, tmp_path):
        out2 = str(tmp_path / "run2")
        assert main(["pretrain", "--config", workspace["config"],
                     "--data", workspace["data"], "--out", out2,
                     "--threads", "8"]) == EXIT_OK
        a = open(workspace["checkpoint"], "rb").read()
        b = open(os.path.join(out2, "checkpoint.rcmc"), "rb").read()
        assert a == b


class TestProbeCommand:
    def test_probe_outputs(self, workspace, tmp_path):
        out = str(tmp_path / "probe")
        assert main(["probe", "--config", workspace["config"],
                     "--data", workspace["data"],
                     "--checkpoint", workspace["checkpoint"],
                     "--out", out]) == EXIT_OK
        report = json.loads(open(os.path.join(out, "accuracy.json")).read())
        assert report["phase"] == "probe"
        assert 0.0 <= report["test_accuracy"] <= 100.0
        assert os.path.exists(os.path.join(out, "probe_checkpoint.rcmc"))

    def test_digest_mismatch_rejected(self, workspace, tmp_path):
        other = dict(CONFIG, seed=9)
        cfg2 = tmp_path / "other.json"
        cfg2.write_text(json.dumps(other))
        rc = main(["probe", "--config", str(cfg2),
                   "--data", workspace["data"],
                   "--checkpoint", workspace["checkpoint"],
                   "--out", str(tmp_path / "p")])
        assert rc == EXIT_CONFIG

    def test_digest_mismatch_override(self, workspace, tmp_path):
        other = dict(CONFIG, seed=9)
        cfg2 = tmp_path / "other.json"
        cfg2.write_text(json.dumps(other))
        rc = main(["probe", "--config", str(cfg2),
                   "--data", workspace["data"],
                   "--checkpoint", workspace["checkpoint"],
                   "--out", str(tmp_path / "p"),
                   "--allow-digest-mismatch"])
        assert rc == EXIT_OK


class TestFinetuneCommand:
    def test_outputs(self, workspace, tmp_path):
        out = str(tmp_path / "ft")
        assert main(["finetune", "--config", workspace["config"],
                     "--data", workspace["data"],
                     "--checkpoint", workspace["checkpoint"],
                     "--out", out]) == EXIT_OK
        report = json.loads(open(os.path.join(out, "accuracy.json")).read())
        assert report["phase"] == "finetune"
        assert os.path.exists(os.path.join(out, "finetune_checkpoint.rcmc"))


class TestRobustnessCommand:
    def test_reports_and_tables(self, workspace, tmp_path):
        out = str(tmp_path / "rob")
        assert main(["robustness", "--config", workspace["config"],
                     "--data", workspace["data"],
                     "--checkpoint", workspace["checkpoint"],
                     "--out", out]) == EXIT_OK
        dropout = json.loads(
            open(os.path.join(out, "dropout_report.json")).read())
        assert dropout["version"] == 1
        assert set(dropout["rdp"]) == {"r_missing", "s_missing", "p_missing",
                                       "rp_missing"}
        assert dropout["rdp_headline"] == dropout["rdp"]["rp_missing"]
        corruption = json.loads(
            open(os.path.join(out, "corruption_report.json")).read())
        assert set(corruption["rdp"]) == {"sjn_0.1", "pcs_0.5"}
        table = open(os.path.join(out, "dropout_table.csv")).read()
        header = table.split("\n")[0].split(",")
        assert header == ["method", "all_three", "r_missing", "s_missing",
                          "p_missing", "rp_missing", "rdp_headline"]


class TestAblateCommand:
    def test_outputs(self, workspace, tmp_path):
        out = str(tmp_path / "abl")
        assert main(["ablate", "--config", workspace["config"],
                     "--data", workspace["data"], "--out", out]) == EXIT_OK
        rows = json.loads(
            open(os.path.join(out, "ablation.json")).read())["rows"]
        configs = {r["config"] for r in rows}
        assert "7_full_rcmcl" in configs and "1_supervised_average" in configs
        csv = open(os.path.join(out, "ablation.csv")).read()
        assert csv.startswith("config,seed,clean_acc,rdp_headline")


class TestExportCommand:
    def test_embeddings_and_trace(self, workspace, tmp_path):
        out = str(tmp_path / "emb")
        assert main(["export-embeddings", "--config", workspace["config"],
                     "--data", workspace["data"],
                     "--checkpoint", workspace["checkpoint"],
                     "--out", out]) == EXIT_OK
        lines = open(os.path.join(out, "embeddings.csv")).read().strip() \
            .split("\n")
        n = CONFIG["n_per_class"] * CONFIG["generator"]["num_classes"]
        assert len(lines) == 3 * n + 1
        assert lines[0].startswith("sample_id,modality,label,h0")
        # embedding rows are unit-norm
        coords = np.array([float(v) for v in lines[1].split(",")[3:]])
        assert abs(np.linalg.norm(coords) - 1.0) < 1e-6
        trace = open(os.path.join(out, "gate_trace.csv")).read()
        assert trace.startswith("window_start,g_r,g_s,g_p,degenerate")


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "no.json"),
                     "--out", str(tmp_path / "d")]) == EXIT_CONFIG

    def test_missing_dataset_dir(self, workspace, tmp_path):
        rc = main(["pretrain", "--config", workspace["config"],
                   "--data", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_IO

    def test_missing_checkpoint(self, workspace, tmp_path):
        rc = main(["probe", "--config", workspace["config"],
                   "--data", workspace["data"],
                   "--checkpoint", str(tmp_path / "no.rcmc"),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_IO

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
