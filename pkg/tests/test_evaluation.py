import csv
import json

import numpy as np
import pytest

from stemmark.audio import SegmentLocator
from stemmark.attacks import AttackSpec
from stemmark.evaluation import (ALL_CATEGORIES, CSV_FIELDS, STAGES, EvalConfig, EvalError, _extract_locator,
                                 emit_report, format_table, item_seed, load_report, load_stem_pairs,
                                 run_separation_first_eval)
from stemmark.synth import SyntheticStemSet, synth_item
from stemmark.wavio import write_wav


@pytest.fixture(scope="module")
def small_run():
    stages = []
    cfg = EvalConfig(items_per_category=2, master_seed=5)
    report = run_separation_first_eval(cfg, stage_hook=lambda c, i, s: stages.append((c, i, s)))
    return cfg, report, stages


def test_report_shape_and_identity_marker(small_run):
    _, report, _ = small_run
    assert set(report.aggregates) == {"stem1", "stem2"}
    for stem in ("stem1", "stem2"):
        assert list(report.aggregates[stem]) == list(ALL_CATEGORIES)
        assert all(v["count"] == 2 for v in report.aggregates[stem].values())
    assert len(report.records) == 2 * 4 * 2
    for r in report.records:
        assert 0.0 <= r["ber"] <= 100.0
        assert (r["attack"] == "identity") == (r["category"] == "Origin")


def test_aggregates_are_means_of_records(small_run):
    _, report, _ = small_run
    for stem, cats in report.aggregates.items():
        for c, agg in cats.items():
            vals = [r["ber"] for r in report.records if r["stem"] == stem and r["category"] == c]
            assert abs(agg["mean_ber"] - np.mean(vals)) <= 1e-9


def test_stage_order_per_item(small_run):
    _, _, stages = small_run
    by_key = {}
    for c, i, s in stages:
        by_key.setdefault((c, i), []).append(s)
    assert len(by_key) == 8
    assert all(tuple(v) == STAGES for v in by_key.values())


def test_extraction_alignment(small_run):
    _, report, _ = small_run
    for r in report.records:
        kind = None if r["attack"] == "identity" else r["attack"]["kind"]
        if kind not in ("SPD", "SPCH"):
            assert r["extract_locator"] == r["locator"]
    loc = SegmentLocator(44100, 88200)
    spec = AttackSpec("SPD", {"speed": 1.1})
    assert _extract_locator(loc, spec, 240000).start == round(44100 / 1.1)
    assert _extract_locator(loc, spec, 100000).start == 100000 - 88200


def test_json_and_csv_round_trip(small_run, tmp_path):
    _, report, _ = small_run
    emit_report(report, "json", tmp_path / "report.json")
    back = load_report(tmp_path / "report.json")
    assert back.to_dict() == report.to_dict()
    assert json.loads((tmp_path / "report.json").read_text())["schema_version"] == 1
    emit_report(report, "csv", tmp_path / "report.csv")
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert list(rows[0]) == list(CSV_FIELDS)
    items = [r for r in rows if r["row"] == "item"]
    aggs = [r for r in rows if r["row"] == "aggregate"]
    assert len(items) == 16 and len(aggs) == 8
    for a in aggs:
        vals = [float(r["ber"]) for r in items if r["stem"] == a["stem"] and r["category"] == a["category"]]
        assert abs(float(a["ber"]) - np.mean(vals)) <= 1e-9
    with pytest.raises(EvalError):
        emit_report(report, "json", tmp_path / "missing_dir" / "r.json")


def test_determinism_and_job_independence(small_run, tmp_path):
    cfg, report, _ = small_run
    again = run_separation_first_eval(cfg, jobs=2)
    emit_report(report, "json", tmp_path / "a.json")
    emit_report(again, "json", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_table_columns(small_run):
    text = format_table(small_run[1])
    header = text.splitlines()[0].split()
    assert header == ["Stem", "Origin", "Basic/Noise", "Filter", "Time/Pitch"]


def test_item_seeds_are_order_free():
    assert item_seed(3, 1, 2, 5) == item_seed(3, 1, 2, 5)
    assert item_seed(3, 1, 2, 5) != item_seed(3, 1, 2, 6)
    assert 0 <= item_seed(2**63, 0, 0) < 2**64


def test_directory_dataset(tmp_path):
    it = synth_item(SyntheticStemSet(carrier_seconds=2.5), 0)
    write_wav(it.stem_a, tmp_path / "song.stem1.wav")
    write_wav(it.stem_b, tmp_path / "song.stem2.wav")
    cfg = EvalConfig(dataset=str(tmp_path), items_per_category=1, categories=("Origin",))
    report = run_separation_first_eval(cfg)
    assert [r["id"] for r in report.records] == ["song", "song"]
    (tmp_path / "lonely.stem1.wav").write_bytes((tmp_path / "song.stem1.wav").read_bytes())
    with pytest.raises(EvalError):
        load_stem_pairs(tmp_path)


def test_config_errors(tmp_path):
    with pytest.raises(ValueError):
        EvalConfig(items_per_category=0)
    with pytest.raises(ValueError):
        EvalConfig(categories=("Codec",))
    with pytest.raises(ValueError):
        EvalConfig(dataset=str(tmp_path / "nope"))
    with pytest.raises(ValueError):
        EvalConfig(separator=str(tmp_path / "nope.ckpt"))
    with pytest.raises(EvalError):
        load_stem_pairs(tmp_path)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    with pytest.raises(EvalError):
        run_separation_first_eval(EvalConfig(separator=str(bad), items_per_category=1))
    with pytest.raises(EvalError):
        run_separation_first_eval(EvalConfig(codec=str(bad), items_per_category=1))
