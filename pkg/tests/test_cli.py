import csv
import io
import json

import pytest

from hbmflow.cli import main
from hbmflow.planner import parse_plan

SMALL = """network small
layer 0 kind=standard-conv kh=3 kw=3 ci=3 co=32 stride=1 in=16x16 out=16x16
layer 1 kind=standard-conv kh=3 kw=3 ci=32 co=64 stride=2 in=16x16 out=8x8
layer 2 kind=standard-conv kh=3 kw=3 ci=64 co=256 stride=1 in=8x8 out=8x8
layer 3 kind=standard-conv kh=3 kw=3 ci=256 co=256 stride=1 in=8x8 out=8x8
"""


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("HBMFLOW_OUT", str(tmp_path))
    return tmp_path


def test_plan_builtin(out, capsys):
    assert main(["plan", "--builtin", "resnet50", "--onchip-mb", "140"]) == 0
    plan = parse_plan((out / "plan-resnet50.plan").read_text())
    assert plan.offloaded and plan.onchip_bits_used <= 140_000_000
    assert (out / "plan-resnet50.net").is_file()
    text = capsys.readouterr().out
    assert "onchip_bits_used" in text and "last_stage_words     512" in text


def test_plan_infeasible_exit(out, capsys):
    assert main(["plan", "--builtin", "vgg16", "--onchip-mb", "0", "--pcs", "31"]) == 4
    assert "INFEASIBLE: on-chip demand exceeds budget" in capsys.readouterr().out


def test_missing_file_is_usage_error(out, capsys):
    assert main(["plan", str(out / "nope.net")]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_flag_is_usage_error(out):
    with pytest.raises(SystemExit) as err:
        main(["plan", "--burst", "7"])
    assert err.value.code == 2


def test_bound_text_and_csv(out, capsys):
    assert main(["bound", "--builtin", "resnet50"]) == 0
    text = capsys.readouterr().out
    value = float(text.split("all_hbm_bound_im_s")[1].split()[0])
    assert value == pytest.approx(1100, rel=0.10)
    assert main(["bound", "--builtin", "resnet50", "--format", "csv"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["layer", "bound_im_s", "kind"]


def test_bound_empty_network(out):
    empty = out / "empty.net"
    empty.write_text("# nothing here\n")
    assert main(["bound", str(empty)]) == 2


def test_bound_with_plan_file(out):
    net_file = out / "small.net"
    net_file.write_text(SMALL)
    assert main(["plan", str(net_file), "--pcs", "2", "--out", str(out / "small.plan")]) == 0
    assert main(["bound", str(net_file), "--plan", str(out / "small.plan")]) == 0


def test_simulate_scenario_exit_codes(out, capsys):
    assert main(["simulate", "--scenario", "shared", "--flow", "ready-valid"]) == 3
    report = (out / "sim-shared.txt").read_text()
    assert "DEADLOCK" in report and "head_of_line_owner   2" in report
    assert main(["simulate", "--scenario", "shared", "--flow", "credit"]) == 0


def test_simulate_same_seed_same_bytes(out):
    a, b = out / "a.txt", out / "b.txt"
    main(["simulate", "--scenario", "shared", "--seed", "7", "--out", str(a)])
    main(["simulate", "--scenario", "shared", "--seed", "7", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_simulate_planned_network(out):
    net_file = out / "small.net"
    net_file.write_text(SMALL)
    plan_file = out / "small.plan"
    assert main(["plan", str(net_file), "--pcs", "2", "--out", str(plan_file)]) == 0
    trace = out / "trace.csv"
    assert main(["simulate", str(plan_file.with_suffix(".net")), "--plan", str(plan_file),
                 "--pcs", "2", "--images", "2", "--trace", str(trace)]) == 0
    assert trace.read_text().startswith("cycle,resource,event\n")


def test_simulate_needs_plan(out):
    assert main(["simulate", "--builtin", "resnet18"]) == 2


def test_characterize(out, capsys):
    assert main(["characterize", "--bl", "8", "--txns", "10000", "--seed", "1"]) == 0
    text = capsys.readouterr().out
    eff = float(text.split("efficiency")[1].split()[0])
    assert eff == pytest.approx(0.83, abs=0.02)
    assert main(["characterize", "--bl", "32", "--format", "csv", "--txns", "2000"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header.split(",")[0] == "efficiency"


def test_sweep_small_network(out, capsys):
    net_file = out / "small.net"
    net_file.write_text(SMALL)
    assert main(["sweep", str(net_file), "--burst", "8,16", "--mode", "hybrid,all-hbm",
                 "--images", "3", "--tensor-blocks", "120"]) == 0
    text = (out / "sweep-small.csv").read_text()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    assert rows[0][:3] == ["mode", "burst", "throughput_im_s"]
    assert len(rows) == 5
    for r in rows[1:]:
        assert float(r[2]) <= float(r[4]) * (1 + 1e-9)
    assert "# recommended burst length (hybrid):" in text


def test_sweep_bad_burst(out):
    assert main(["sweep", "--builtin", "resnet18", "--burst", "eight"]) == 2


def test_manifest_contents_and_rerun(out):
    assert main(["bound", "--builtin", "vgg16"]) == 0
    report = out / "bound-vgg16.txt"
    manifest = json.loads((out / "bound-vgg16.txt.manifest.json").read_text())
    assert manifest["command"] == "bound"
    assert manifest["outputs"] == [str(report)]
    assert manifest["config"]["core_clock_hz"] == 300_000_000
    original = report.read_bytes()
    report.unlink()
    assert main(["rerun", str(out / "bound-vgg16.txt.manifest.json")]) == 0
    assert report.read_bytes() == original


def test_manifest_records_input_hash(out):
    net_file = out / "small.net"
    net_file.write_text(SMALL)
    main(["bound", str(net_file)])
    manifest = json.loads((out / "bound-small.txt.manifest.json").read_text())
    assert list(manifest["inputs"]) == [str(net_file)]
    assert len(manifest["inputs"][str(net_file)]) == 64


def test_rerun_missing_manifest(out):
    assert main(["rerun", str(out / "missing.json")]) == 2
