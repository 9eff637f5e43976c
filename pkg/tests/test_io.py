import json
import math

import numpy as np
import pytest

from msrl.errors import DimensionError, MalformedFileError, MSRLError, SchemaVersionError, UsageError, ValidationError
from msrl.io import (
    catalog_from_json,
    catalog_to_json,
    export_metrics,
    load_checkpoint,
    load_config,
    load_dataset,
    load_metrics,
    metrics_csv,
    output_lock,
    parse_config,
    parse_metrics_csv,
    save_checkpoint,
    save_dataset,
)
from msrl.metrics import MetricsSnapshot
from msrl.trainer import Trainer, TrainerConfig

from conftest import small_world


def minimal_dataset():
    def pair(k):
        return {
            "region": {
                "region_id": f"r{k}", "image_id": f"i{k}",
                "box": {"xyxy": [0, 0, 5, 5], "image_size": [10, 10]},
                "grid_features": [[0.1, 0.2, 0.3, 0.4]] * 4,
                "neighbors": [],
            },
            "expression": {"expression_id": f"e{k}", "image_id": f"i{k}", "word_embeddings": [[1.0, 0, 0, 0]]},
        }

    return {"schema_version": 1, "groups": [{"label": "cup", "pairs": [pair(0), pair(1)]}]}


class TestDataset:
    def test_minimal_file_loads(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps(minimal_dataset()))
        cat = load_dataset(path)
        assert cat.n_groups == 1 and cat.n_pairs == 2 and cat.group_labels == ("cup",)

    def test_bad_box_names_pair(self):
        d = minimal_dataset()
        d["groups"][0]["pairs"][1]["region"]["box"]["xyxy"] = [6, 0, 5, 5]
        with pytest.raises(ValidationError, match="r1"):
            catalog_from_json(d)

    def test_distinct_error_kinds(self, tmp_path):
        d = minimal_dataset()
        d["schema_version"] = 99
        with pytest.raises(SchemaVersionError):
            catalog_from_json(d)
        d = minimal_dataset()
        d["groups"][0]["pairs"][1]["expression"]["word_embeddings"] = [[1.0, 0, 0]]
        with pytest.raises(DimensionError):
            catalog_from_json(d)
        bad = tmp_path / "bad.json"
        bad.write_text('{"schema_version": 1, "groups": [')
        with pytest.raises(MalformedFileError):
            load_dataset(bad)
        d = minimal_dataset()
        del d["groups"][0]["pairs"][0]["region"]["grid_features"]
        with pytest.raises(MalformedFileError):
            catalog_from_json(d)
        with pytest.raises(UsageError):
            load_dataset(tmp_path / "missing.json")
        assert len({SchemaVersionError, DimensionError, MalformedFileError}) == 3

    def test_round_trip(self, tmp_path):
        cat = small_world(seed=3).catalog
        save_dataset(cat, tmp_path / "w.json")
        back = load_dataset(tmp_path / "w.json")
        assert json.dumps(catalog_to_json(back)) == json.dumps(catalog_to_json(cat))
        p, q = cat.pair(5), back.pair(5)
        np.testing.assert_array_equal(p.region.grid_features, q.region.grid_features)
        assert p.region.box == q.region.box


class TestConfig:
    def test_defaults_and_overrides(self):
        c = parse_config({"schema_version": 1, "seed": 4, "trainer": {"variant": "msrl-wg", "iterations": 10}})
        assert c.trainer.seed == 4 and c.trainer.variant == "msrl-wg" and c.world["n_groups"] == 8
        o = c.with_overrides("randsel-ag", 9)
        assert (o.seed, o.trainer.seed, o.trainer.variant) == (9, 9, "randsel-ag")

    @pytest.mark.parametrize("obj", [
        {"schema_version": 1, "bogus": 1},
        {"schema_version": 1, "world": {"n_groupz": 3}},
        {"schema_version": 1, "trainer": {"learning_rate": 1}},
        {"schema_version": 1, "trainer": {"variant": "nope"}},
        {"schema_version": 1, "trainer": {"iou_filter": "sideways"}},
        {"schema_version": 1, "world": {}, "dataset": "x.json"},
        {"schema_version": 1, "seed": -1},
    ])
    def test_rejections(self, obj):
        with pytest.raises(ValidationError):
            parse_config(obj)

    def test_version_required(self, tmp_path):
        with pytest.raises(SchemaVersionError):
            parse_config({"seed": 1})
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"schema_version": 1}))
        assert load_config(path).seed == 0

    def test_to_dict_round_trip(self):
        c = parse_config({"schema_version": 1, "seed": 2, "eval": {"K": 5}})
        assert parse_config(c.to_dict()) == c


def snap(k, n_groups=2):
    return MetricsSnapshot(k, 0.25 * k, 0.5, float("nan") if k == 0 else 0.125, 3 * n_groups,
                           0.5, 0.5, 0.5, 0.75, [3] * n_groups, [0.5, 1.0][:n_groups])


class TestMetricsCSV:
    def test_header_only(self, tmp_path):
        export_metrics([], tmp_path / "m.csv", 2)
        assert (tmp_path / "m.csv").read_text() == (
            "iteration,loss,mean_R_all,mean_R_selected,selected_total,lambda1,lambda2,gamma,val_acc,"
            "sel_g0,sel_g1,acc_g0,acc_g1\n"
        )

    def test_one_snapshot_two_lines_and_reparse(self):
        text = metrics_csv([snap(1)])
        assert text.count("\n") == 2 and text.endswith("\n")
        assert "0.250000" in text
        back = parse_metrics_csv(text)[0]
        assert back.to_dict() == snap(1).to_dict()

    def test_nan_marker(self, tmp_path):
        export_metrics([snap(0), snap(2)], tmp_path / "m.csv")
        back = load_metrics(tmp_path / "m.csv")
        assert math.isnan(back[0].mean_R_selected) and back[1].iteration == 2


class TestCheckpoint:
    def run(self, iterations):
        cat = small_world().catalog
        cfg = TrainerConfig(iterations=iterations, M=3, M_prime=6, update_period=3, snapshot_period=2)
        return Trainer(cat, cfg), cfg

    def test_resume_is_bit_identical(self, tmp_path):
        tr, cfg = self.run(8)
        mid = tr.run(until=4)
        save_checkpoint(mid, cfg, tmp_path / "c.txt")
        straight = tr.run()
        tr2, _ = self.run(8)
        state, cfg2 = load_checkpoint(tmp_path / "c.txt")
        assert cfg2 == cfg
        resumed = tr2.run(state)
        assert metrics_csv(resumed.history) == metrics_csv(straight.history)
        for k, v in straight.params.arrays().items():
            np.testing.assert_array_equal(v, resumed.params[k].data)

    def test_round_trip_exact(self, tmp_path):
        tr, cfg = self.run(3)
        state = tr.run()
        save_checkpoint(state, cfg, tmp_path / "c.txt")
        back, _ = load_checkpoint(tmp_path / "c.txt")
        for k in state.adam.m:
            np.testing.assert_array_equal(state.adam.m[k], back.adam.m[k])
        np.testing.assert_array_equal(state.R.values, back.R.values)
        assert back.schedule == state.schedule
        assert back.streams.state() == state.streams.state()

    def test_truncated_and_versioned(self, tmp_path):
        tr, cfg = self.run(1)
        save_checkpoint(tr.run(), cfg, tmp_path / "c.txt")
        text = (tmp_path / "c.txt").read_text()
        (tmp_path / "t.txt").write_text(text[: len(text) // 2])
        with pytest.raises(MalformedFileError):
            load_checkpoint(tmp_path / "t.txt")
        obj = json.loads(text)
        obj["format_version"] = 0
        (tmp_path / "v.txt").write_text(json.dumps(obj))
        with pytest.raises(SchemaVersionError):
            load_checkpoint(tmp_path / "v.txt")

    def test_empty_path(self):
        with pytest.raises(UsageError):
            load_checkpoint("")


def test_lock_excludes_second_writer(tmp_path):
    with output_lock(tmp_path / "run"):
        with pytest.raises(MSRLError, match="locked"):
            with output_lock(tmp_path / "run"):
                pass
    with output_lock(tmp_path / "run"):
        pass
