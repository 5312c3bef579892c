from __future__ import annotations

import json

import numpy as np
import pytest

from sslstm.data import (
    HOLDOUT_PROTOCOLS,
    CsvSchema,
    Dataset,
    Recording,
    Selector,
    SplitSpec,
    apply_normalizer,
    decimate,
    fit_normalizer,
    impute,
    load_csv,
    load_dataset,
    loso_splits,
    parse_recording_name,
    save_dataset,
    write_csv,
)
from sslstm.errors import ConfigError, DataError


def rec(subject="1", run="1", t=10, d=2, seed=0, rate=30.0):
    rng = np.random.default_rng(seed)
    return Recording(f"subject{subject}_run{run}", subject, run, rng.normal(size=(t, d)), rng.integers(0, 3, t), rate)


class TestCsv:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "subject3_run2.csv"
        p.write_text("timestamp,f0,f1,label\n0,1.5,2,0\n1,3,4,1\n2,5,6.25,2\n")
        r = load_csv(p)
        assert len(r) == 3 and r.features.shape == (3, 2)
        np.testing.assert_array_equal(r.features, [[1.5, 2], [3, 4], [5, 6.25]])
        np.testing.assert_array_equal(r.labels, [0, 1, 2])
        assert (r.subject, r.run) == ("3", "2")
        np.testing.assert_array_equal(r.timestamps, [0, 1, 2])

    def test_unknown_label_cites_row(self, tmp_path):
        p = tmp_path / "x.csv"
        rows = ["f0,label"] + [f"{i},walk" for i in range(6)] + ["7,jump"]
        p.write_text("\n".join(rows) + "\n")
        with pytest.raises(DataError, match="row 7"):
            load_csv(p, CsvSchema(class_names=["null", "walk"]))

    def test_label_names_map_to_ids(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("f0,label\n1,walk\n2,null\n")
        r = load_csv(p, CsvSchema(class_names=["null", "walk"]))
        np.testing.assert_array_equal(r.labels, [1, 0])

    def test_ragged_and_empty(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("f0,f1,label\n1,2,0\n1,0\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv(p)
        p.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_csv(p)
        p.write_text("f0,label\n")
        with pytest.raises(DataError):
            load_csv(p)

    def test_missing_cells_are_nan(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("f0,f1,label\n,2,0\n1,NaN,0\n")
        r = load_csv(p)
        assert np.isnan(r.features[0, 0]) and np.isnan(r.features[1, 1])

    def test_round_trip(self, tmp_path):
        r = rec("4", "2", t=25, d=3, seed=1)
        r.timestamps = np.arange(25) / 30.0
        p = tmp_path / "subject4_run2.csv"
        write_csv(r, p)
        back = load_csv(p, sample_rate=30.0)
        assert back.equals(r)
        np.testing.assert_array_equal(back.timestamps, r.timestamps)
        write_csv(back, tmp_path / "again.csv")
        assert (tmp_path / "again.csv").read_bytes() == p.read_bytes()

    def test_recording_name(self):
        assert parse_recording_name("a/subject12_run3.csv") == ("12", "3")


class TestManifest:
    def test_round_trip(self, tmp_path):
        ds = Dataset([rec("1", "1"), rec("2", "1", seed=2)], ["null", "a", "b"], 0, 30.0)
        path = save_dataset(ds, tmp_path)
        manifest = json.loads(path.read_text())
        assert manifest["class_names"] == ["null", "a", "b"]
        back = load_dataset(path)
        assert all(a.equals(b) for a, b in zip(ds.recordings, back.recordings))
        assert back.n_classes == 3 and back.sample_rate == 30.0

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.json")

    def test_dataset_invariants(self):
        with pytest.raises(DataError):
            Dataset([rec(rate=30.0), rec(rate=33.0)], ["a", "b", "c"], 0, 30.0)
        with pytest.raises(DataError):
            Dataset([rec()], ["a", "b"], 0, 30.0)


class TestPreprocessing:
    def test_constant_channel_centered(self):
        r = Recording("r", "1", "1", np.column_stack([np.full(20, 5.0), np.arange(20.0)]), np.zeros(20, int), 30.0)
        out = apply_normalizer(r, fit_normalizer([r]))
        np.testing.assert_array_equal(out.features[:, 0], 0.0)

    def test_moments(self):
        recs = [rec(t=200, d=4, seed=s) for s in range(3)]
        for r in recs:
            r.features = r.features * 3.0 + 7.0
        stats = fit_normalizer(recs)
        x = np.concatenate([apply_normalizer(r, stats).features for r in recs])
        assert np.abs(x.mean(axis=0)).max() <= 1e-10
        np.testing.assert_allclose(x.std(axis=0), 1.0, atol=1e-10)

    def test_leading_nan_imputed(self):
        f = np.array([[np.nan, 1.0], [np.nan, 2.0], [3.0, np.nan], [np.nan, 4.0]])
        out = impute(f, np.array([10.0, 20.0]))
        np.testing.assert_array_equal(out, [[10, 1], [10, 2], [3, 2], [3, 4]])
        r = Recording("r", "1", "1", f, np.zeros(4, int), 30.0)
        assert np.all(np.isfinite(apply_normalizer(r, fit_normalizer([r])).features))

    def test_decimate(self):
        r = rec(t=10, seed=4, rate=100.0)
        assert decimate(r, 1).equals(r)
        d = decimate(r, 3)
        assert len(d) == 4
        np.testing.assert_array_equal(d.labels, r.labels[[0, 3, 6, 9]])
        assert d.sample_rate == pytest.approx(33.333333, abs=1e-5)
        with pytest.raises(ValueError):
            decimate(r, 0)


class TestSplits:
    def recs(self):
        return [rec(str(s), str(r), seed=s * 10 + r) for s in range(1, 5) for r in range(1, 4)]

    def test_resolve_rest_is_train(self):
        spec = SplitSpec(validation=[("1", "2")], test=[("2", None)])
        tr, va, te = spec.resolve(self.recs())
        assert [r.id for r in va] == ["subject1_run2"]
        assert {r.subject for r in te} == {"2"} and len(te) == 3
        assert len(tr) == 12 - 4
        assert not {r.id for r in tr} & {r.id for r in va + te}

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            SplitSpec(validation=[("1", "1")], test=[("1", "1")])

    def test_json_round_trip(self):
        spec = SplitSpec(validation=[("1", "2")], test=[("2", "4"), ("3", None)], exclude_subjects=["9"])
        again = SplitSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert again == spec
        assert Selector.parse({"subject": "3", "run": "*"}) == Selector("3")

    def test_protocols(self):
        opp = HOLDOUT_PROTOCOLS["opp"]
        assert Selector("1", "2") in opp.validation
        assert set(opp.test) == {Selector("2", "4"), Selector("2", "5"), Selector("3", "4"), Selector("3", "5")}
        assert SplitSpec.from_json({"protocol": "dg"}).exclude_subjects == ["4", "10"]
        assert HOLDOUT_PROTOCOLS["pamap2"].validation == [Selector("5", "1"), Selector("5", "2")]

    def test_loso(self):
        folds = loso_splits(self.recs())
        assert [f[0] for f in folds] == ["1", "2", "3", "4"]
        for subject, spec in folds:
            tr, va, te = spec.resolve(self.recs())
            assert {r.subject for r in te} == {subject}
            assert subject not in {r.subject for r in tr + va}
