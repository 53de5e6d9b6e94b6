import json

from bevfuse import tensorio
from bevfuse.harness.cli import main


def test_gen_then_run_from_scene(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert main(["gen", "--config", "small", "--seed", "3", "--out", str(scene)]) == 0
    out = tmp_path / "out"
    assert main(["run", "--config", "small", "--scene", str(scene), "--out", str(out), "--dump-intermediate"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["dispatches"] == {"total": 8, "per_block": [2, 2, 2, 2], "expected": {"parallel": 8, "serial": 10}}
    dumps = sorted(p.name for p in out.glob("tokens_*.utr"))
    assert dumps == ["tokens_0_intra.utr", "tokens_1_inter2d.utr", "tokens_2_inter2d.utr", "tokens_3_inter3d.utr"]
    bev = tensorio.load(out / "bev.utr")
    assert bev["features"].shape == (160, 160, 32)
    assert int(bev["mask"].sum()) == man["bev_occupied"]
    assert "per_block_seconds" in json.loads((out / "timings.json").read_text())


def test_serial_flag_counts(tmp_path, capsys):
    assert main(["run", "--config", "small", "--serial", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["serial"] is True and man["dispatches"]["total"] == 10


def test_blocks_override(tmp_path, capsys):
    assert main(["run", "--config", "small", "--blocks", "intra,inter3d", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["blocks"] == ["intra", "inter3d"] and man["dispatches"]["total"] == 4


def test_table_caches(tmp_path, capsys):
    assert main(["table", "--config", "small", "--out", str(tmp_path)]) == 0
    assert "built table" in capsys.readouterr().out
    assert main(["table", "--config", "small", "--out", str(tmp_path)]) == 0
    assert "is valid" in capsys.readouterr().out


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"base": "small", "run": {"seed": 4}}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 4
    cfg.write_text(json.dumps({"base": "small", "partition": {"tua": 4}}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["run", "--config", "no-such-preset"]) == 2


def test_check_subset_exit_codes(capsys):
    assert main(["check", "--only", "partition", "--quick"]) == 0
    assert "PASS partition.slot_oracle" in capsys.readouterr().out
    assert main(["check", "--only", "nothing-matches"]) == 2
