"""Command-line behaviour and exit codes."""
import re
import struct

import numpy as np
import pytest

from gcnet import cli, weights


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def _totals(out):
    p = re.search(r"total params: [\d,]+\s+\(([\d.]+)M\)", out).group(1)
    m = re.search(r"total MACs \(often quoted as FLOPs\): [\d,]+\s+\(([\d.]+)G\)", out).group(1)
    return float(p), float(m)


@pytest.mark.parametrize(
    "argv,want",
    [
        (["--arch", "tsn", "--p", "1", "--frames", "8", "--res", "224", "--classes", "174"], (25.1, 33.3)),
        (["--arch", "tsn", "--p", "0"], (23.9, 32.9)),
        (["--arch", "gst", "--p", "0", "--frames", "8"], (21.0, 29.2)),
    ],
)
def test_summary_examples(capsys, argv, want):
    code, out, _ = run(capsys, "summary", *argv)
    assert code == 0
    assert out.startswith("config: ")
    assert _totals(out) == want


def test_summary_prints_raw_and_rounded(capsys):
    _, out, _ = run(capsys, "summary", "--p", "1", "--brief")
    assert "25,133,358  (25.1M)" in out
    assert "overhead: params +5.32%  MACs +1.31%" in out


def test_summary_csv(capsys, tmp_path):
    path = tmp_path / "r.csv"
    code, _, _ = run(capsys, "summary", "--p", "1/2", "--placement", "loop", "--csv", str(path))
    assert code == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,params,macs"
    assert lines[-2].startswith("TOTAL,")


@pytest.mark.parametrize("argv", [["--p", "1/3"], ["--p", "2"], ["--mask", "11"], ["--mask", "1x11"], ["--p", "3/8", "--placement", "loop"], ["--frames", "0"], ["--bogus"]])
def test_summary_illegal_input_exit_2(capsys, argv):
    code, _, err = run(capsys, "summary", *argv)
    assert code == 2
    assert "error" in err


def test_unknown_command(capsys):
    assert run(capsys, "frobnicate")[0] == 2


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    last = out.strip().splitlines()[-1]
    k = int(last.split()[1].split("/")[0])
    assert last == f"PASS {k}/{k}"
    assert "1.47%" in out and "5.88%" in out


def test_selftest_failure_exit_1(capsys, monkeypatch):
    from gcnet import selftest

    monkeypatch.setattr(selftest, "SUITES", [lambda: [("always wrong", False, "")]])
    code, out, _ = run(capsys, "selftest")
    assert code == 1
    assert "FAIL  always wrong" in out


@pytest.fixture(scope="module")
def untrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert cli.main(["train-toy", "--steps", "0", "--seed", "0", "--out", str(out)]) == 0
    return out


def test_train_zero_steps_writes_init(untrained):
    assert (untrained / "log.csv").read_text() == "step,loss,acc\n"
    state = weights.load(untrained / "weights.gcw")
    assert "fc.weight" in state and "gc.0.ECalG.weight" in state
    assert "depth=micro" in (untrained / "model.cfg").read_text()


def test_eval_untrained_near_chance(capsys, untrained):
    code, out, _ = run(capsys, "eval", "--weights", str(untrained / "weights.gcw"))
    assert code == 0
    acc = float(re.search(r"accuracy ([\d.]+)", out).group(1))
    assert abs(acc - 0.125) <= 3 * np.sqrt(0.125 * 0.875 / 800)


def test_gates_zero_calibrators(capsys, untrained, tmp_path):
    state = weights.load(untrained / "weights.gcw")
    for k in state:
        if k.startswith("gc.") and not k.endswith(("running_var", "gamma")):
            state[k] = np.zeros_like(state[k])
    d = tmp_path / "zero"
    d.mkdir()
    weights.save(d / "weights.gcw", state)
    (d / "model.cfg").write_text((untrained / "model.cfg").read_text())
    code, _, _ = run(capsys, "gates", "--weights", str(d / "weights.gcw"), "--out", str(d / "g.csv"))
    assert code == 0
    rows = (d / "g.csv").read_text().strip().splitlines()
    assert rows[0] == "site,calibrator,class,mean_logit"
    assert len(rows) == 1 + 3 * 4 * 8
    assert {float(r.split(",")[3]) for r in rows[1:]} == {0.0}


def test_missing_weights_exit_2(capsys, tmp_path):
    assert run(capsys, "eval", "--weights", str(tmp_path / "none.gcw"))[0] == 2


@pytest.mark.parametrize("damage", ["truncate", "version", "magic"])
def test_corrupt_weights_exit_2(capsys, untrained, tmp_path, damage):
    blob = bytearray((untrained / "weights.gcw").read_bytes())
    if damage == "truncate":
        blob = blob[: len(blob) // 2]
    elif damage == "version":
        blob[4:8] = struct.pack("<I", 7)
    else:
        blob[:4] = b"XXXX"
    (tmp_path / "weights.gcw").write_bytes(bytes(blob))
    (tmp_path / "model.cfg").write_text((untrained / "model.cfg").read_text())
    code, _, err = run(capsys, "eval", "--weights", str(tmp_path / "weights.gcw"))
    assert code == 2
    assert "error" in err


def test_config_mismatch_exit_2(capsys, untrained, tmp_path):
    (tmp_path / "weights.gcw").write_bytes((untrained / "weights.gcw").read_bytes())
    (tmp_path / "model.cfg").write_text((untrained / "model.cfg").read_text().replace("p=1", "p=0"))
    assert run(capsys, "eval", "--weights", str(tmp_path / "weights.gcw"))[0] == 2


def test_train_short_run_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        assert cli.main(["train-toy", "--steps", "3", "--per-class", "8", "--seed", "4", "--out", str(tmp_path / name)]) == 0
        outs.append(tuple((tmp_path / name / f).read_bytes() for f in ("weights.gcw", "log.csv", "model.cfg")))
    assert outs[0] == outs[1]


def test_thread_cap_env(capsys, monkeypatch):
    monkeypatch.setenv("GC_THREADS", "1")
    assert run(capsys, "summary", "--brief")[0] == 0
