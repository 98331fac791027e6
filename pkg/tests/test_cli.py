import json

import numpy as np
import pytest

from featref.cli import main
from featref.flow import read_flow


def run_cli(*argv):
    return main(list(argv))


def tree_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    code = run_cli("gen-synth", "--out", str(root / "data"), "--subjects", "3",
                   "--clips-per-subject", "4", "--classes", "3", "--frame-size", "48",
                   "--frames-per-clip", "6", "--noise-sigma", "0.01", "--seed", "5")
    assert code == 0
    code = run_cli("flow", "--manifest", str(root / "data" / "manifest.jsonl"),
                   "--cache", str(root / "flows"))
    assert code == 0
    return root


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert run_cli("frobnicate") == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_is_usage_error(self):
        assert run_cli() == 1

    def test_missing_required_flag_is_usage_error(self):
        assert run_cli("apex") == 1

    def test_bad_manifest_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert run_cli("apex", "--manifest", str(bad)) == 2
        assert "error" in capsys.readouterr().err


class TestParams:
    def test_basic_count_near_anchor(self, capsys):
        assert run_cli("params", "--variant", "basic", "--k", "3") == 0
        count = int(capsys.readouterr().out.strip())
        assert abs(count - 6_480_300) / 6_480_300 < 0.02

    def test_flag_overrides_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"variant": "basic", "n_classes": 3}}))
        run_cli("params", "--config", str(cfg))
        base = int(capsys.readouterr().out.strip())
        run_cli("params", "--config", str(cfg), "--k", "4")
        overridden = int(capsys.readouterr().out.strip())
        assert overridden != base

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"bogus": 1}}))
        assert run_cli("params", "--config", str(cfg)) == 2


class TestGenSynth:
    def test_same_seed_identical_trees(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("gen-synth", "--out", str(tmp_path / name), "--subjects", "2",
                           "--clips-per-subject", "2", "--classes", "2",
                           "--frame-size", "24", "--frames-per-clip", "4",
                           "--seed", "7") == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


class TestApexAndFlow:
    def test_apex_lists_every_clip(self, cli_corpus, capsys):
        assert run_cli("apex", "--manifest", str(cli_corpus / "data" / "manifest.jsonl")) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        assert len(lines) == 12
        for line in lines:
            clip_id, idx = line.split("\t")
            assert int(idx) >= 1

    def test_flow_cache_files_written(self, cli_corpus):
        flows = sorted((cli_corpus / "flows").glob("*.frflow"))
        assert len(flows) == 12
        f = read_flow(flows[0])
        assert f.shape == (48, 48)

    def test_flow_skips_cached(self, cli_corpus, capsys):
        assert run_cli("flow", "--manifest", str(cli_corpus / "data" / "manifest.jsonl"),
                       "--cache", str(cli_corpus / "flows")) == 0
        assert "computed 0 flows" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(cli_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r1"
    code = run_cli("train", "--protocol", "cde", "--scheme", "cde3",
                   "--manifest", str(cli_corpus / "data" / "manifest.jsonl"),
                   "--cache", str(cli_corpus / "flows"), "--out", str(out),
                   "--variant", "basic", "--shared-dim", "16",
                   "--detector-hidden", "8", "--classifier-hidden", "8",
                   "--epochs", "2", "--seed", "0", "--workers", "1")
    assert code == 0
    return out


class TestTrainEvalReport:

    def test_report_has_metric_keys(self, run_dir):
        report = json.loads((run_dir / "report.json").read_text())
        for key in ("acc", "uf1", "uar"):
            assert key in report
            assert 0.0 <= report[key] <= 1.0

    def test_config_written_before_results(self, run_dir):
        cfg = json.loads((run_dir / "config.json").read_text())
        assert cfg["model"]["variant"] == "basic"
        assert cfg["train"]["epochs"] == 2

    def test_fold_artifacts_exist(self, run_dir):
        folds = sorted(p.name for p in (run_dir / "folds").iterdir())
        assert len(folds) == 3
        for key in folds:
            assert (run_dir / "folds" / key / "confusion.csv").is_file()
            assert (run_dir / "folds" / key / "checkpoint").is_file()

    def test_eval_checkpoint(self, cli_corpus, run_dir, tmp_path, capsys):
        fold = sorted((run_dir / "folds").iterdir())[0]
        out = tmp_path / "eval.json"
        code = run_cli("eval", "--checkpoint", str(fold / "checkpoint"),
                       "--manifest", str(cli_corpus / "data" / "manifest.jsonl"),
                       "--cache", str(cli_corpus / "flows"), "--scheme", "cde3",
                       "--out", str(out))
        assert code == 0
        payload = json.loads(out.read_text())
        assert "confusion" in payload and "uf1" in payload
        assert np.asarray(payload["confusion"]).sum() == 12

    def test_eval_feature_export(self, cli_corpus, run_dir, tmp_path):
        fold = sorted((run_dir / "folds").iterdir())[0]
        feat = tmp_path / "features.bin"
        code = run_cli("eval", "--checkpoint", str(fold / "checkpoint"),
                       "--manifest", str(cli_corpus / "data" / "manifest.jsonl"),
                       "--cache", str(cli_corpus / "flows"), "--scheme", "cde3",
                       "--out", str(tmp_path / "e.json"),
                       "--export-features", str(feat))
        assert code == 0
        assert feat.read_bytes()[:8] == b"FRFEAT1\x00"

    def test_report_reaggregates_identically(self, run_dir, capsys):
        before = json.loads((run_dir / "report.json").read_text())
        assert run_cli("report", "--run", str(run_dir)) == 0
        after = json.loads((run_dir / "report.json").read_text())
        for key in ("acc", "uf1", "uar"):
            assert after[key] == pytest.approx(before[key], abs=1e-12)

    def test_train_twice_same_seed_byte_identical(self, cli_corpus, tmp_path):
        outs = []
        for name in ("x", "y"):
            out = tmp_path / name
            assert run_cli("train", "--protocol", "cde", "--scheme", "cde3",
                           "--manifest", str(cli_corpus / "data" / "manifest.jsonl"),
                           "--cache", str(cli_corpus / "flows"), "--out", str(out),
                           "--variant", "basic", "--shared-dim", "16",
                           "--detector-hidden", "8", "--classifier-hidden", "8",
                           "--epochs", "1", "--seed", "3", "--workers", "1") == 0
            outs.append(out)
        assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
