import json

import pytest

from mafbench import cli
from mafbench.synthworld import WorldConfig


def dispatch(*argv):
    return cli.parse_and_dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"samples_per_modality": 200, "seed": 5}))
    assert dispatch("gen-world", "--config", cfg, "--out", out) == 0
    return out


class TestConfig:
    def test_empty_object_gives_defaults(self):
        cfg, world = cli.parse_config({})
        assert cfg == cli.CliConfig() and world == WorldConfig()

    def test_world_override(self):
        assert cli.parse_config({"essence_dim": 8, "trials": 2})[1].essence_dim == 8

    def test_unknown_key_named(self):
        with pytest.raises(cli.UsageError, match="essence_dmi"):
            cli.parse_config({"essence_dmi": 8})

    def test_type_mismatch_named(self):
        with pytest.raises(cli.UsageError, match="trials"):
            cli.parse_config({"trials": "9"})

    def test_invalid_protocol(self):
        with pytest.raises(cli.UsageError, match="tm, loo, oracle"):
            cli.parse_config({"protocol": "peek"})


class TestCommands:
    def test_gen_world_outputs(self, world_dir):
        assert json.loads((world_dir / "world.json").read_text())["samples_per_modality"] == 200
        manifest = json.loads((world_dir / "manifest.json").read_text())
        assert manifest["runs"] == [] and "world.json" in manifest["files"]
        assert cli.verify_manifest(world_dir) == []

    def test_invalid_protocol_flag(self, world_dir, tmp_path, capsys):
        code = dispatch("sweep", "--world", world_dir / "world.json", "--protocol", "peek", "--out", tmp_path)
        assert code == 1
        assert "valid protocols" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path):
        assert dispatch("gen-world", "--out", tmp_path, "--bogus") == 1

    def test_no_command(self):
        assert dispatch() == 1

    def test_missing_world_file(self, tmp_path):
        assert dispatch("run", "--world", tmp_path / "nope.json", "--algorithm", "erm", "--out", tmp_path) == 1

    def test_sweep_rerun_byte_identical_and_tamper(self, world_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = dispatch("sweep", "--world", world_dir / "world.json", "--algorithms", "erm,concat",
                            "--trials", 2, "--seeds", 1, "--steps", 60, "--out", out)
            assert code == 0
            outs.append(out)
        for f in ("runs.jsonl", "report.csv", "manifest.json"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        assert b"\r\n" not in (outs[0] / "runs.jsonl").read_bytes()
        assert dispatch("report", "--out", outs[0], "--verify") == 0
        with open(outs[0] / "report.csv", "a") as fh:
            fh.write("x\n")
        assert dispatch("report", "--out", outs[0], "--verify") == 2

    def test_run_then_select(self, world_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert dispatch("run", "--world", world_dir / "world.json", "--algorithm", "irm", "--steps", 60,
                        "--out", run_dir) == 0
        rec = json.loads((run_dir / "runs.jsonl").read_text().splitlines()[0])
        assert rec["algorithm"] == "irm" and rec["protocol"] == "oracle"
        sel_dir = tmp_path / "sel"
        assert dispatch("select", "--runs", run_dir / "runs.jsonl", "--out", sel_dir) == 0
        assert (sel_dir / "report.csv").read_text().startswith("setting,")

    def test_analyze(self, world_dir, tmp_path):
        assert dispatch("analyze", "--world", world_dir / "world.json", "--steps", 40, "--out", tmp_path) == 0
        data = json.loads((tmp_path / "analysis.json").read_text())
        assert {"kl", "k95", "r2"} <= set(data)
        assert dispatch("analyze", "--world", world_dir / "world.json", "--layer", 9, "--out", tmp_path) == 1

    def test_ablate(self, world_dir, tmp_path):
        assert dispatch("ablate", "--world", world_dir / "world.json", "--modes", "single_modality",
                        "--seeds", 1, "--steps", 40, "--out", tmp_path) == 0
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("single_modality")
