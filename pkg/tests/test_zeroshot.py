import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctp.dataset import SynthConfig, generate_synthetic
from ctp.encoders import EncoderSpec
from ctp.errors import ShapeError
from ctp.similarity import l2_tensor, normalize_rows
from ctp.training import Checkpoint, TrainConfig, init_adam_state, train
from ctp.zeroshot import (
    EvalReport,
    build_class_texts,
    class_text_features,
    classify_pair,
    classify_single,
    evaluate,
    evaluate_modes,
    format_table,
    reports_from_features,
    write_reports,
)

E1, E2 = np.eye(3)[:2]


def untrained(data, seed=0, n_points=16):
    spec = EncoderSpec(len(data.train[0].text_vector), len(data.train[0].image_vector), dim=8,
                       hidden=16, point_hidden=16)
    params = spec.build(seed)
    cfg = TrainConfig(n_points=n_points, dim=8, hidden=16, point_hidden=16)
    return Checkpoint(params, init_adam_state(params.arrays()), cfg.to_dict(), list(data.classes))


class TestClassTexts:
    def test_order(self):
        table = {"a": [1.0, 0.0], "b": [0.0, 1.0]}
        np.testing.assert_array_equal(build_class_texts(["b", "a"], table), [[0.0, 1.0], [1.0, 0.0]])

    def test_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_class_texts(["a", "a"], {"a": [1.0]})

    def test_unknown(self):
        with pytest.raises(KeyError):
            build_class_texts(["z"], {"a": [1.0]})

    def test_encoded_unit(self):
        data = generate_synthetic(SynthConfig(n_train=10, n_test=5))
        feats = class_text_features(untrained(data).params, data.prototypes, data.classes)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)


class TestClassifyPair:
    def test_exact_match(self):
        k, s = classify_pair(np.stack([E1, E2]), E1, E1)
        assert k == 0 and s[0] == pytest.approx(1.0)
        assert s[1] == pytest.approx(1 - 2 * math.sqrt(2) / (3 * math.sqrt(3)), abs=1e-12)

    def test_antipodal_text(self):
        k, s = classify_pair(np.stack([E1, -E1]), E1, E1)
        assert k == 0 and s[1] == pytest.approx(0.2302, abs=1e-4)

    def test_tie_smallest_index(self):
        k, _ = classify_pair(np.stack([E2, E2]), E1, E1)
        assert k == 0

    def test_no_classes(self):
        with pytest.raises(ValueError):
            classify_pair(np.zeros((0, 3)), E1, E1)

    def test_dims(self):
        with pytest.raises(ShapeError):
            classify_pair(np.stack([E1]), np.ones(4) / 2, np.ones(4) / 2)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_against_loop_and_raw_distance(self, seed):
        rng = np.random.default_rng(seed)
        t = normalize_rows(rng.standard_normal((4, 5)))
        i, p = normalize_rows(rng.standard_normal((2, 5)))
        k, s = classify_pair(t, i, p)
        loop = [1 - (np.linalg.norm(c - i) + np.linalg.norm(c - p) + np.linalg.norm(i - p)) / (3 * math.sqrt(3))
                for c in t]
        np.testing.assert_allclose(s, loop, atol=1e-12)
        raw = l2_tensor(t, np.tile(i, (4, 1)), np.tile(p, (4, 1)))[:, 0, 0]
        assert k == int(np.argmax(-raw))


class TestClassifySingle:
    def test_prototype(self):
        assert classify_single(np.stack([E1, E2]), E2) == 1

    def test_orthogonal_but_one(self):
        t = normalize_rows(np.array([[0.1, math.sqrt(0.99), 0.0], [0.0, 0.0, 1.0]]))
        assert classify_single(t, E1) == 0

    def test_tie(self):
        assert classify_single(np.stack([E2, E2]), E1) == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            classify_single(np.zeros((0, 3)), E1)


class TestReport:
    def test_micro_macro(self):
        r = EvalReport.from_predictions("T_IP", ["a", "b"], [0, 0, 0, 1], [0, 0, 1, 1])
        assert r.avg_accuracy == 75.0
        assert r.macro_accuracy == pytest.approx((200 / 3 + 100) / 2)
        assert r.confusion.sum(axis=1).tolist() == [3, 1]
        assert np.trace(r.confusion) == 3

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
    def test_bookkeeping(self, pairs):
        labels, preds = zip(*pairs)
        r = EvalReport.from_predictions("T_I", list("abcd"), labels, preds)
        correct = sum(a == b for a, b in pairs)
        assert r.avg_accuracy == 100.0 * correct / len(pairs)
        assert np.trace(r.confusion) == correct
        assert all(0 <= v <= 100 for v in r.per_class_accuracy.values())


class TestEvaluate:
    DATA = generate_synthetic(SynthConfig(n_train=200, n_test=60, seed=4))

    def test_modes_and_table(self, tmp_path):
        reports = evaluate_modes(untrained(self.DATA), self.DATA.test, self.DATA.prototypes)
        assert set(reports) == {"T_I", "T_P", "T_IP"}
        for r in reports.values():
            assert r.n_samples == 60 and r.confusion.sum() == 60
        table = format_table(reports.values(), "toy")
        assert "Avg." in table and "Macro" in table and "T-(I,P)" in table
        write_reports(reports.values(), tmp_path / "m.jsonl")
        assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 3

    def test_single_mode(self):
        r = evaluate(untrained(self.DATA), self.DATA.test, self.DATA.prototypes, "T_P")
        assert r.mode == "T_P"

    def test_t_i_equals_t_p_on_identical_features(self):
        rng = np.random.default_rng(0)
        t = normalize_rows(rng.standard_normal((5, 6)))
        f = normalize_rows(rng.standard_normal((40, 6)))
        labels = rng.integers(0, 5, 40)
        r = reports_from_features(t, f, f.copy(), labels, self.DATA.classes)
        assert r["T_I"].to_dict() | {"mode": None} == r["T_P"].to_dict() | {"mode": None}

    def test_absent_class(self):
        table = dict(list(self.DATA.prototypes.items())[:2])
        with pytest.raises(KeyError, match="absent"):
            evaluate_modes(untrained(self.DATA), self.DATA.test, table)

    def test_dimension_mismatch(self):
        other = generate_synthetic(SynthConfig(n_train=10, n_test=5, text_dim=7))
        with pytest.raises(ShapeError):
            evaluate_modes(untrained(self.DATA), other.test, other.prototypes)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            evaluate(untrained(self.DATA), self.DATA.test, self.DATA.prototypes, "T_X")

    def test_noiseless_training_reaches_100(self):
        data = generate_synthetic(SynthConfig(n_train=320, n_test=50, sigma_text=0.0, sigma_image=0.0,
                                              sigma_point=0.0, seed=6))
        cfg = TrainConfig(epochs=15, batch_size=32, dim=8, hidden=16, point_hidden=16, n_points=16)
        ckpt, _ = train(cfg, data.train, data.classes)
        assert evaluate(ckpt, data.test, data.prototypes).avg_accuracy == 100.0
