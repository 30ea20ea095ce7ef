import json
import subprocess
import sys

import pytest

from hcpn.cli import main

TINY = {"channels": [4, 8], "levels": 2, "decoder_width": 4, "batch": 2, "iters": 2}


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def data(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--seqs", "2", "--frames", "4", "--size", "16",
                 "--seed", "3"]) == 0
    return tmp_path / "d"


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return path


def test_synth_counts_and_determinism(tmp_path, capsys):
    args = ["synth", "--seqs", "3", "--frames", "8", "--size", "32", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip().endswith("index.json")
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = tree(tmp_path / "a")
    assert a == tree(tmp_path / "b")
    assert sum(k.endswith(".flo") for k in a) == 21
    assert len({k.split("/")[0] for k in a if "/" in k}) == 3


@pytest.mark.parametrize("args", [["--seqs", "0"], ["--attributes", "XX"], ["--frames", "1"]])
def test_synth_usage_errors(tmp_path, args):
    assert main(["synth", "--out", str(tmp_path / "x")] + args) == 2


def test_argparse_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_verify(data, capsys):
    assert main(["verify", "--data", str(data)]) == 0
    f = data / "seq_001" / "frames" / "00000.ppm"
    f.write_bytes(f.read_bytes() + b"x")
    assert main(["verify", "--data", str(data)]) == 4
    assert "checksum mismatch" in capsys.readouterr().out


def test_eval_ground_truth_is_perfect(data, tmp_path):
    assert main(["eval", "--data", str(data), "--report", str(tmp_path / "r")]) == 0
    rows = (tmp_path / "r" / "frames.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 4
    assert all(r.endswith("1.000000,1.000000") for r in rows[1:])
    summary = (tmp_path / "r" / "summary.md").read_text()
    assert "| **mean** | 1.000 | 1.000 | 0.000 | 1.000 | 1.000 | 0.000 | 0.000 |" in summary
    assert (tmp_path / "r" / "j_per_frame.svg").exists()


def test_train_infer_round_trip(data, config, tmp_path):
    ckpt = tmp_path / "m.hcpn"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config),
                 "--log", str(tmp_path / "log.csv"), "--seed", "1"]) == 0
    first = ckpt.read_bytes()
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config), "--seed", "1"]) == 0
    assert ckpt.read_bytes() == first
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 3
    assert main(["infer", "--model", str(ckpt), "--data", str(data), "--out", str(tmp_path / "p"),
                 "--report", str(tmp_path / "r"), "--probs"]) == 0
    masks = sorted((tmp_path / "p" / "seq_000").glob("0000?.pgm"))
    assert len(masks) == 4 and masks[0].read_bytes().startswith(b"P5\n16 16\n255\n")
    assert (tmp_path / "p" / "seq_000" / "00000_prob.pgm").read_bytes().startswith(b"P5\n16 16\n65535\n")
    assert len((tmp_path / "r" / "frames.csv").read_text().splitlines()) == 9
    assert main(["eval", "--data", str(data), "--pred", str(tmp_path / "p"), "--report", str(tmp_path / "r2")]) == 0


def test_flags_override_config_file(data, config, tmp_path):
    ckpt = tmp_path / "m.hcpn"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config), "--iters", "1",
                 "--fusion", "add"]) == 0
    run = json.loads((tmp_path / "m.hcpn.json").read_text())["run_config"]
    assert run["iters"] == 1 and run["batch"] == 2 and run["fusion"] == "add"


def test_train_rejects_corrupt_manifest(data, config, tmp_path):
    (data / "seq_000" / "manifest.json").write_text("{broken")
    ckpt = tmp_path / "m.hcpn"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config)]) == 3
    assert not ckpt.exists()


def test_infer_shape_mismatch_is_configuration_error(data, config, tmp_path, capsys):
    ckpt = tmp_path / "m.hcpn"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config), "--iters", "0"]) == 0
    meta = json.loads((tmp_path / "m.hcpn.json").read_text())
    meta["model_config"]["decoder_width"] = 6
    (tmp_path / "m.hcpn.json").write_text(json.dumps(meta))
    assert main(["infer", "--model", str(ckpt), "--data", str(data), "--out", str(tmp_path / "p")]) == 2
    assert "dec." in capsys.readouterr().err


def test_missing_flow_directory(data, config, tmp_path):
    ckpt = tmp_path / "m.hcpn"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config), "--iters", "0"]) == 0
    for p in (data / "seq_000" / "flow").iterdir():
        p.unlink()
    (data / "seq_000" / "flow").rmdir()
    assert main(["infer", "--model", str(ckpt), "--data", str(data), "--out", str(tmp_path / "p")]) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--modules", "bridge_gac,tensor_core", "--seed", "2"]) == 0
    first = capsys.readouterr().out
    assert "bridge_gac" in first and "all modules pass" in first
    assert main(["gradcheck", "--modules", "bridge_gac,tensor_core", "--seed", "2"]) == 0
    assert capsys.readouterr().out.split("\n")[0].split("(")[0] == first.split("\n")[0].split("(")[0]
    assert main(["gradcheck", "--modules", "bridge_gac,tensor_core", "--fault-op", "tanh",
                 "--fault-module", "bridge_gac"]) == 4
    out = capsys.readouterr().out
    assert "failed: bridge_gac" in out and "tensor_core    max_rel_err" in out


def test_gradcheck_unknown_module():
    assert main(["gradcheck", "--modules", "nope"]) == 2


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "hcpn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "flags override" in out.stdout and "Exit codes" in out.stdout
