from __future__ import annotations

import json
import math

import pytest

from metastack.metrics import MetricsRecord, MetricsWriter, read_metrics, series, write_manifest


def test_nan_written_as_null_and_read_back():
    rec = MetricsRecord(3, 1, loss_task=0.5, gate_means={"scaling": math.nan})
    raw = json.loads(rec.to_json())
    assert raw["loss_virtual"] is None and raw["gate_means"]["scaling"] is None
    back = MetricsRecord.from_json(rec.to_json())
    assert back.loss_task == 0.5 and math.isnan(back.loss_virtual) and math.isnan(back.gate_means["scaling"])


def test_unknown_field_rejected():
    with pytest.raises(ValueError):
        MetricsRecord.from_json('{"step": 0, "level": 1, "mystery": 2}')


def test_writer_roundtrip_and_order(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as w:
        w.write(MetricsRecord(0, 1, loss_meta=1.0))
        w.write(MetricsRecord(0, 2, loss_meta=2.0))
        w.write(MetricsRecord(1, 1, loss_meta=0.5))
        with pytest.raises(ValueError):
            w.write(MetricsRecord(0, 1))
    recs = read_metrics(path)
    assert [r.loss_meta for r in recs] == [1.0, 2.0, 0.5]
    with MetricsWriter(path, append=True) as w:
        w.write(MetricsRecord(2, 1))
    assert len(read_metrics(path)) == 4


def test_malformed_line_reports_position(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(MetricsRecord(0, 1).to_json() + "\nnot json\n")
    with pytest.raises(ValueError, match=":2:"):
        read_metrics(path)


def test_series_split():
    recs = [MetricsRecord(0, 1, loss_task=1.0, gate_means={"a": 0.2}), MetricsRecord(1, 1, loss_task=0.5)]
    s = series(recs)
    assert s["loss_task"] == [(0, 1.0), (1, 0.5)]
    assert s["gate_a"][0] == (0, 0.2) and math.isnan(s["gate_a"][1][1])


def test_manifest(tmp_path):
    write_manifest(tmp_path / "manifest.json", "abc", 4, "0.1.0", {"K": 2})
    assert json.loads((tmp_path / "manifest.json").read_text()) == {"config_sha256": "abc", "seed": 4, "version": "0.1.0", "K": 2}
