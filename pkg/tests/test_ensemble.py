from __future__ import annotations

import math

import numpy as np
import pytest

from sslstm.data import Recording
from sslstm.ensemble import (
    EnsembleSpec,
    SourceSpec,
    build_multi_source,
    fuse_scores,
    fused_ce,
    select_bagged,
)
from sslstm.errors import ConfigError, EvaluationError
from sslstm.network import NetworkDims, init_params
from sslstm.training import EpochSnapshot, evaluate_model
from sslstm.variants import ProbSeries, Variant


def full(probs):
    probs = np.asarray(probs, dtype=float)
    return ProbSeries(probs, np.ones(len(probs), bool))


def snaps(scores, seed=0, dims=NetworkDims(2, 3, 3, 1)):
    return [EpochSnapshot(e + 1, init_params(dims, seed * 100 + e), s, 0.0) for e, s in enumerate(scores)]


class TestFuse:
    def test_single_member(self):
        p = full([[0.2, 0.8], [0.6, 0.4]])
        f = fuse_scores([p])
        np.testing.assert_array_equal(f.probs, p.probs)
        assert f.valid.all()

    def test_mean(self):
        f = fuse_scores([full([[0.6, 0.4]]), full([[0.2, 0.8]])])
        np.testing.assert_allclose(f.probs, [[0.4, 0.6]], atol=1e-15)

    def test_identical_members(self):
        p = full(np.random.default_rng(0).dirichlet(np.ones(4), size=6))
        np.testing.assert_allclose(fuse_scores([p] * 5).probs, p.probs, atol=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            fuse_scores([])

    def test_partial_validity(self):
        a = ProbSeries(np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.5]]), np.array([True, True, False]))
        b = ProbSeries(np.array([[0.0, 1.0], [0.3, 0.7], [0.5, 0.5]]), np.array([True, False, False]))
        f = fuse_scores([a, b])
        np.testing.assert_allclose(f.probs[:2], [[0.5, 0.5], [1.0, 0.0]])
        np.testing.assert_array_equal(f.valid, [True, True, False])

    def test_rows_sum_to_one_and_permutation_invariant(self):
        rng = np.random.default_rng(1)
        members = [ProbSeries(rng.dirichlet(np.ones(3), size=20), rng.random(20) < 0.7) for _ in range(4)]
        f = fuse_scores(members)
        np.testing.assert_allclose(f.probs[f.valid].sum(axis=1), 1.0, atol=1e-9)
        g = fuse_scores(members[::-1])
        np.testing.assert_array_equal(f.predictions()[f.valid], g.predictions()[g.valid])


class TestFusedLoss:
    def test_hand_example(self):
        fused, members = fused_ce([full([[0.9, 0.1]]), full([[0.1, 0.9]])], [0])
        assert fused == pytest.approx(math.log(2), abs=1e-12)
        assert np.mean(members) == pytest.approx(-(math.log(0.9) + math.log(0.1)) / 2, abs=1e-12)
        assert np.mean(members) == pytest.approx(1.2040, abs=1e-4)

    def test_identical(self):
        p = full([[0.3, 0.7], [0.6, 0.4]])
        fused, members = fused_ce([p, p], [1, 0])
        assert fused == pytest.approx(members[0], abs=1e-15)

    def test_random_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            m, c = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            members = [full(rng.dirichlet(np.ones(c))[None]) for _ in range(m)]
            fused, per = fused_ce(members, [int(rng.integers(0, c))])
            assert fused <= np.mean(per) + 1e-12

    def test_no_joint_valid(self):
        a = ProbSeries(np.full((2, 2), 0.5), np.array([True, False]))
        b = ProbSeries(np.full((2, 2), 0.5), np.array([False, True]))
        with pytest.raises(EvaluationError):
            fused_ce([a, b], [0, 0])


class TestSelect:
    def test_all(self):
        s = snaps([0.3, 0.1, 0.2])
        assert [x.epoch for x in select_bagged(s, 3)] == [1, 2, 3]

    def test_ties(self):
        s = snaps([0.1, 0.5, 0.3, 0.5])
        assert [x.epoch for x in select_bagged(s, 2)] == [2, 4]
        assert [x.epoch for x in select_bagged(s, 1)] == [2]

    def test_last_rule(self):
        s = snaps([0.9, 0.1, 0.2, 0.3])
        assert [x.epoch for x in select_bagged(s, 2, "last")] == [3, 4]

    def test_too_many(self):
        with pytest.raises(ValueError):
            select_bagged(snaps([0.1]), 2)

    def test_sort_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            scores = (rng.integers(0, 5, n) / 4).tolist()
            m = int(rng.integers(0, n + 1))
            s = [EpochSnapshot(e + 1, None, sc, 0.0) for e, sc in enumerate(scores)]
            order = sorted(range(n), key=lambda i: (-scores[i], i))[:m]
            assert [x.epoch for x in select_bagged(s, m)] == sorted(i + 1 for i in order)


class TestSpec:
    def test_parse_three_source_composition(self):
        spec = EnsembleSpec.parse("LSTM(6)+DLY(7)+INV(7)", {"DLY": Variant.delay(5)})
        assert spec.size == 20
        assert [s.count for s in spec.sources] == [6, 7, 7]
        assert [s.variant.kind for s in spec.sources] == ["standard", "delay", "inverse"]
        assert str(spec) == "LSTM(6)+DLY(7)+INV(7)"
        assert EnsembleSpec.from_json(spec.to_json()) == spec

    def test_invalid(self):
        with pytest.raises(ConfigError):
            EnsembleSpec.parse("DLY(3)")  # delay amount unknown
        with pytest.raises(ConfigError):
            EnsembleSpec.parse("LSTM6")
        with pytest.raises(ConfigError):
            EnsembleSpec((SourceSpec("a", Variant.standard(), 0),))
        with pytest.raises(ConfigError):
            EnsembleSpec.from_json({"sources": [SourceSpec("a", Variant.standard(), 2).to_json()], "size": 3})


class TestMultiSource:
    def recs(self):
        rng = np.random.default_rng(0)
        return [Recording(f"r{i}", str(i), "1", rng.normal(size=(12, 2)), np.zeros(12, int), 30.0) for i in range(2)]

    def test_single_member_reduces_to_model(self):
        runs = {"LSTM": snaps([0.2, 0.7, 0.1]), "DLY": snaps([0.5], 1), "INV": snaps([0.5], 2)}
        spec = EnsembleSpec.parse("LSTM(1)+DLY(0)+INV(0)", {"DLY": Variant.delay(2)})
        out = build_multi_source(spec, runs).predict(self.recs())
        direct = evaluate_model(runs["LSTM"][1].params, self.recs(), Variant.standard())
        for a, b in zip(out, direct):
            np.testing.assert_array_equal(a.probs, b.probs)

    def test_identical_members(self):
        s = snaps([0.5])
        twin = [EpochSnapshot(2, s[0].params.copy(), 0.5, 0.0)]
        spec = EnsembleSpec.parse("A(1)+B(1)", {"A": Variant.standard(), "B": Variant.standard()})
        out = build_multi_source(spec, {"A": s, "B": twin}).predict(self.recs())
        direct = evaluate_model(s[0].params, self.recs(), Variant.standard())
        for a, b in zip(out, direct):
            np.testing.assert_allclose(a.probs, b.probs, atol=1e-15)

    def test_six_seven_seven_mask(self):
        runs = {"LSTM": snaps([0.1] * 8), "DLY": snaps([0.1] * 8, 1), "INV": snaps([0.1] * 8, 2)}
        spec = EnsembleSpec.parse("LSTM(6)+DLY(7)+INV(7)", {"DLY": Variant.delay(3)})
        pred = build_multi_source(spec, runs)
        assert len(pred.members) == 20
        rec = self.recs()[:1]
        fused = pred.predict(rec)[0]
        assert fused.valid.all()
        # the last delta timestamps average the 13 non-delay members only
        per_member = [evaluate_model(s.params, rec, v)[0] for v, s in pred.members]
        non_delay = [m.probs for (v, _), m in zip(pred.members, per_member) if v.kind != "delay"]
        assert len(non_delay) == 13
        np.testing.assert_allclose(fused.probs[-3:], np.mean(non_delay, axis=0)[-3:], atol=1e-15)
        np.testing.assert_allclose(fused.probs[:-3], np.mean([m.probs for m in per_member], axis=0)[:-3], atol=1e-15)

    def test_insufficient(self):
        spec = EnsembleSpec.parse("LSTM(3)")
        with pytest.raises(ConfigError):
            build_multi_source(spec, {"LSTM": snaps([0.1, 0.2])})
        with pytest.raises(ConfigError):
            build_multi_source(spec, {})
