import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctp.diff import brute_force_loss, brute_force_pair_loss
from ctp.errors import ShapeError
from ctp.losses import (
    ALL_ENCODER_COEFFS,
    LOSS_TAGS,
    PLANES,
    POINT_ONLY_COEFFS,
    LossConfig,
    clip_pair_loss,
    cross_entropy,
    flatten_plane,
    initial_log_scale,
    logit_scale_from_log,
    pairwise_loss,
    plane_loss,
    tensor_loss,
)
from ctp.similarity import cosine_tensor

from conftest import unit_rows


class TestFlatten:
    @pytest.mark.parametrize("b", [1, 2, 3, 5, 8])
    @pytest.mark.parametrize("plane", PLANES)
    def test_lengths(self, b, plane):
        s = np.zeros((b, b, b))
        for ell in range(b):
            assert len(flatten_plane(s, plane, ell, "mask").logits) == b * b - 2 * b + 2
            assert len(flatten_plane(s, plane, ell, "nm").logits) == b * b

    def test_masked_coordinates_b3(self):
        fp = flatten_plane(np.zeros((3, 3, 3)), "jk", 1, "mask")
        dropped = {(u, v) for u in range(3) for v in range(3)} - set(fp.index_map)
        assert dropped == {(1, 0), (1, 2), (0, 1), (2, 1)}
        assert len(fp.logits) == 5
        assert fp.index_map[fp.target_pos] == (1, 1)

    def test_b2_keeps_diagonal(self):
        fp = flatten_plane(np.zeros((2, 2, 2)), "ij", 0, "mask")
        assert fp.index_map == [(0, 0), (1, 1)] and fp.target_pos == 0

    def test_b1(self):
        fp = flatten_plane(np.ones((1, 1, 1)), "ik", 0, "mask")
        assert fp.logits.tolist() == [1.0] and fp.target_pos == 0

    def test_plane_axes(self):
        s = np.arange(27.0).reshape(3, 3, 3)
        # fixing axis 0 for "jk": entry (u, v) is s[ell, u, v]
        assert flatten_plane(s, "jk", 2, "nm").logits[5] == s[2, 1, 2]
        assert flatten_plane(s, "ik", 2, "nm").logits[5] == s[1, 2, 2]
        assert flatten_plane(s, "ij", 2, "nm").logits[5] == s[1, 2, 2]
        assert flatten_plane(s, "ij", 0, "nm").logits[1] == s[0, 1, 0]

    def test_bad_arguments(self):
        s = np.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            flatten_plane(s, "xy", 0)
        with pytest.raises(ValueError):
            flatten_plane(s, "jk", 0, "drop")
        with pytest.raises(IndexError):
            flatten_plane(s, "jk", 2)
        with pytest.raises(ShapeError):
            flatten_plane(np.zeros((2, 3, 2)), "jk", 0)


class TestCrossEntropy:
    def test_dominant_target(self):
        assert cross_entropy([10.0, 0.0, 0.0], 0) == pytest.approx(math.log1p(2 * math.exp(-10)), rel=1e-12)
        assert cross_entropy([10.0, 0.0, 0.0], 0) == pytest.approx(9.08e-5, abs=1e-7)

    @pytest.mark.parametrize("n", [1, 2, 5, 1000])
    def test_uniform(self, n):
        assert cross_entropy(np.zeros(n), n // 2) == pytest.approx(math.log(n), abs=1e-12)

    def test_no_overflow(self):
        v = cross_entropy([1000.0, -1000.0], 1, scale=100.0)
        assert math.isfinite(v) and v == pytest.approx(200_000.0)

    def test_never_negative(self):
        assert cross_entropy([1e6, 0.0], 0) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            cross_entropy([], 0)
        with pytest.raises(ValueError):
            cross_entropy([1.0], 0, scale=0.0)
        with pytest.raises(IndexError):
            cross_entropy([1.0, 2.0], 2)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100), st.data())
    def test_shift_invariance(self, z, c, data):
        k = data.draw(st.integers(0, len(z) - 1))
        a = cross_entropy(z, k)
        b = cross_entropy(np.asarray(z) + c, k)
        assert a == pytest.approx(b, abs=1e-9 * max(1.0, abs(a)))

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(0.01, 3))
    def test_decreases_as_target_rises(self, z, delta):
        z = np.asarray(z)
        bumped = z.copy()
        bumped[0] += delta
        assert cross_entropy(bumped, 0) < cross_entropy(z, 0) + 1e-12


class TestPlaneAndTensorLoss:
    @pytest.mark.parametrize("b", [2, 3, 7])
    @pytest.mark.parametrize("strategy", ["nm", "mask"])
    def test_uniform_plane(self, b, strategy):
        n = b * b if strategy == "nm" else b * b - 2 * b + 2
        assert plane_loss(np.zeros((b, b, b)), "jk", strategy) == pytest.approx(b * math.log(n), abs=1e-12)
        assert plane_loss(np.zeros((b, b, b)), "jk", strategy, reduction="mean") == pytest.approx(math.log(n))

    def test_b2_equal_entries(self):
        e = np.tile([1.0, 0.0], (2, 1))
        for metric in ("cosine", "l2_mapped"):
            assert tensor_loss(e, e, e, metric, "mask").total == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_matches_slice_by_slice(self, rng):
        t, i, p = (unit_rows(rng, 4, 3) for _ in range(3))
        s = cosine_tensor(t, i, p)
        want = sum(cross_entropy(fp.logits, fp.target_pos, 2.0)
                   for fp in (flatten_plane(s, "ik", ell) for ell in range(4)))
        assert plane_loss(s, "ik", "mask", 2.0) == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("metric", ["cosine", "l2_mapped"])
    @pytest.mark.parametrize("strategy", ["nm", "mask"])
    def test_matches_loop_oracle(self, rng, metric, strategy):
        t, i, p = (rng.standard_normal((5, 6)) for _ in range(3))
        got = tensor_loss(t, i, p, metric, strategy, scale=3.0).total
        want = brute_force_loss(t, i, p, metric, strategy, scale=3.0)
        assert abs(got - want) <= 1e-10

    def test_components_and_weights(self, rng):
        t, i, p = (unit_rows(rng, 4, 5) for _ in range(3))
        br = tensor_loss(t, i, p, coefficients=(1.0, 0.0, 0.0))
        assert set(br.per_plane) == set(PLANES)
        assert br.total == pytest.approx(br.components["jk"])

    def test_rejects_negative_coefficient(self, rng):
        x = unit_rows(rng, 2, 3)
        with pytest.raises(ValueError, match="non-negative"):
            tensor_loss(x, x, x, coefficients=(-0.1, 0.5, 0.6))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_batch_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        t, i, p = (r.standard_normal((6, 4)) for _ in range(3))
        perm = r.permutation(6)
        for tag in LOSS_TAGS:
            cfg = LossConfig.from_tag(tag)
            a = cfg(t, i, p, 5.0).total
            b = cfg(t[perm], i[perm], p[perm], 5.0).total
            assert abs(a - b) <= 1e-10

    def test_mask_lower_than_nm_on_identical_rows(self):
        # near-duplicate entries collapse the nm softmax more than the masked one
        e = np.tile([1.0, 0.0], (3, 1))
        assert tensor_loss(e, e, e, strategy="mask").total < tensor_loss(e, e, e, strategy="nm").total


class TestPairwise:
    def test_b2_example(self):
        assert clip_pair_loss(np.eye(2), np.eye(2)) == pytest.approx(0.313261687, abs=1e-9)
        assert clip_pair_loss(np.eye(2), np.eye(2)) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-15)

    def test_matches_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        assert clip_pair_loss(a, b, 4.0) == pytest.approx(brute_force_pair_loss(a, b, 4.0), abs=1e-12)

    def test_symmetric_in_arguments(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        assert clip_pair_loss(a, b) == pytest.approx(clip_pair_loss(b, a), abs=1e-14)

    def test_presets(self, rng):
        t, i, p = (rng.standard_normal((4, 3)) for _ in range(3))
        br = pairwise_loss(t, i, p, POINT_ONLY_COEFFS)
        assert br.total == pytest.approx(0.5 * (br.components["T-P"] + br.components["P-I"]))
        br = pairwise_loss(t, i, p, ALL_ENCODER_COEFFS)
        assert br.total == pytest.approx(sum(br.components.values()) / 3)


class TestLogitScale:
    def test_initial(self):
        assert logit_scale_from_log(initial_log_scale()) == pytest.approx(1 / 0.07)

    def test_clamped(self):
        assert logit_scale_from_log(10.0) == 100.0


class TestLossConfig:
    @pytest.mark.parametrize("tag", LOSS_TAGS)
    def test_round_trip(self, tag):
        assert LossConfig.from_tag(tag).tag == tag

    def test_unknown(self):
        with pytest.raises(ValueError):
            LossConfig.from_tag("triplet")
