import csv
import hashlib
import json
import shutil
from pathlib import Path

import pytest

from alphamine.cli import main

TINY = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.ini")
# digest of the tiny synthetic panel at seed 0 (regression pin)
TINY_PANEL_SHA256 = "7074649bcd20d23dc0267fdfc1ae96ad854b455b458c2ba378990709d8f5aaca"


def run(*args):
    return main([*args])


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def mined(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert run("synth", "--config", TINY, "--out", str(out)) == 0
    assert run("mine", "both", "--config", TINY, "--out", str(out)) == 0
    return out


def test_synth_is_deterministic(tmp_path):
    assert run("synth", "--config", TINY, "--out", str(tmp_path / "a")) == 0
    assert run("synth", "--config", TINY, "--out", str(tmp_path / "b")) == 0
    assert sha(tmp_path / "a" / "panel.csv") == sha(tmp_path / "b" / "panel.csv") == TINY_PANEL_SHA256
    assert run("synth", "--config", TINY, "--out", str(tmp_path / "c"), "--seed", "1") == 0
    assert sha(tmp_path / "c" / "panel.csv") != TINY_PANEL_SHA256


def test_unwritable_output_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--config", TINY, "--out", str(blocker / "sub")) == 1


def test_missing_config_exits_1(tmp_path):
    assert run("synth", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)) == 1


def test_mine_both_writes_three_manifests(mined):
    f = mined / "factors"
    for name in ("adnn", "gp", "gp_adnn"):
        assert (f / f"{name}.jsonl").is_file()
    adnn = [json.loads(x) for x in (f / "adnn.jsonl").read_text().splitlines()]
    assert [r["name"] for r in adnn] == ["MA(5)", "EMA(12)", "DC(5)"]
    gp = [json.loads(x) for x in (f / "gp.jsonl").read_text().splitlines()]
    assert len(gp) == 3 and all(r["kind"] == "expr" and {"train_ic", "val_ic", "test_ic"} <= set(r["metrics"]) for r in gp)
    seeded = [json.loads(x) for x in (f / "gp_adnn.jsonl").read_text().splitlines()]
    assert [r["provenance"]["prior"] for r in seeded] == [r["expr"] for r in gp]


def test_adnn_catalog_of_two(tmp_path, mined):
    ini = tmp_path / "two.ini"
    ini.write_text(Path(TINY).read_text().replace("entries = MA(5), EMA(12), DC(5)", "entries = MA(5), DC(5)"))
    shutil.copy(mined / "panel.csv", tmp_path / "panel.csv")
    assert run("mine", "adnn", "--config", str(ini), "--out", str(tmp_path)) == 0
    assert sorted(p.name for p in (tmp_path / "factors").glob("*.model")) == ["adnn_000.model", "adnn_001.model"]


def test_eval_single_manifest_and_diversity_guard(mined, tmp_path):
    out = tmp_path / "ev"
    shutil.copytree(mined, out)
    assert run("eval", str(out / "factors" / "gp.jsonl"), "--config", TINY, "--out", str(out), "--no-diversity") == 0
    table = rows(out / "eval" / "schemes.csv")
    assert len(table) == 1 and table[0]["factors"] == "3"
    (out / "factors" / "one.jsonl").write_text((out / "factors" / "gp.jsonl").read_text().splitlines()[0] + "\n")
    assert run("eval", str(out / "factors" / "one.jsonl"), "--config", TINY, "--out", str(out)) == 1


def test_eval_default_pools(mined, tmp_path):
    out = tmp_path / "ev"
    shutil.copytree(mined, out)
    assert run("eval", "--config", TINY, "--out", str(out)) == 0
    pools = [r["pool"] for r in rows(out / "eval" / "schemes.csv")]
    assert pools == ["PK", "GP", "ADNN", "GP&ADNN"]
    assert (out / "eval" / "clusters.svg").read_text().startswith("<svg")


def _perturb_after(panel_csv: Path, first_date: str, factor: float):
    lines = panel_csv.read_text().splitlines()
    out = [lines[0]]
    for line in lines[1:]:
        parts = line.split(",")
        if parts[0] >= first_date:
            parts[2:7] = [repr(float(v) * factor) for v in parts[2:7]]
        out.append(",".join(parts))
    panel_csv.write_text("\n".join(out) + "\n")


def test_backtest_outputs_and_withheld_test_data(mined, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    shutil.copytree(mined, a)
    shutil.copytree(mined, b)
    dates = sorted({r["date"] for r in rows(a / "panel.csv")})
    # tiny split: train 200 days, then val, then test
    _perturb_after(b / "panel.csv", dates[230], 1.5)
    for d in (a, b):
        assert run("backtest", "pk", "combined", "--config", TINY, "--out", str(d)) == 0
    summary = rows(a / "backtest" / "summary.csv")
    assert [r["pool"] for r in summary] == ["pk", "combined"]
    assert summary[0]["factors"] == "3"  # PK is the configured catalog
    assert summary[1]["factors"] == "6"
    for r in summary:
        assert float(r["max_drawdown"]) >= 0
    assert sha(a / "backtest" / "features_combined.csv") == sha(b / "backtest" / "features_combined.csv")
    nav = rows(a / "backtest" / "nav_pk.csv")
    assert nav[0]["date"] == dates[230] and float(nav[0]["strategy"]) == 1.0


def test_backtest_unknown_pool_exits_1(mined, tmp_path):
    out = tmp_path / "x"
    shutil.copytree(mined, out)
    assert run("backtest", "bogus", "--config", TINY, "--out", str(out)) == 1


def test_full_pipeline_is_deterministic(mined, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        shutil.copytree(mined, out)
        assert run("eval", "--config", TINY, "--out", str(out)) == 0
        assert run("backtest", "--config", TINY, "--out", str(out)) == 0
        assert run("report", "--config", TINY, "--out", str(out)) == 0
        outs.append(out)
    for rel in ("eval/schemes.csv", "eval/factors.csv", "backtest/summary.csv", "backtest/nav_combined.csv", "report.md"):
        assert sha(outs[0] / rel) == sha(outs[1] / rel), rel
