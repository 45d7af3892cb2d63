import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctp.errors import DegenerateInputError, ShapeError, UnsupportedModalityCount
from ctp.similarity import (
    FeatureBatch,
    SimilarityTensor,
    combination_counts,
    cosine_pair_matrix,
    cosine_tensor,
    l2_tensor,
    l_max,
    map_l2,
    normalize,
    normalize_rows,
)

from conftest import unit_rows

E1, E2, E3 = np.eye(3)
# three coplanar unit vectors 120 degrees apart
TRI = np.array([[1.0, 0.0, 0.0],
                [-0.5, math.sqrt(3) / 2, 0.0],
                [-0.5, -math.sqrt(3) / 2, 0.0]])


def one(v):
    return np.asarray(v, dtype=float)[None, :]


class TestNormalize:
    def test_345(self):
        np.testing.assert_allclose(normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_unit_vector_unchanged(self):
        np.testing.assert_array_equal(normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError, match="zero norm"):
            normalize([0.0, 0.0])

    def test_zero_row_in_batch_rejected(self):
        with pytest.raises(DegenerateInputError):
            normalize_rows([[1.0, 0.0], [0.0, 0.0]])

    @given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-1e3, 1e3)))
    def test_unit_norm_and_direction(self, v):
        if np.linalg.norm(v) < 1e-6:
            return
        u = normalize(v)
        assert abs(np.linalg.norm(u) - 1) <= 1e-12
        assert np.dot(u, v) > 0


class TestFeatureBatch:
    def test_flags_normalized_rows(self, rng):
        fb = FeatureBatch(rng.standard_normal((4, 3)), "image").unit()
        assert fb.normalized and fb.dim == 3 and len(fb) == 4
        np.testing.assert_allclose(np.linalg.norm(np.asarray(fb), axis=1), 1.0)

    def test_rejects_false_normalized_flag(self):
        with pytest.raises(ValueError):
            FeatureBatch([[2.0, 0.0]], normalized=True)

    def test_rejects_nan(self):
        with pytest.raises(DegenerateInputError):
            FeatureBatch([[np.nan, 1.0]])

    def test_rejects_bad_modality(self):
        with pytest.raises(ValueError):
            FeatureBatch([[1.0]], modality="audio")


class TestCosinePairMatrix:
    def test_orthonormal_identity(self):
        np.testing.assert_array_equal(cosine_pair_matrix(np.eye(2), np.eye(2)), np.eye(2))

    def test_equal_rows_give_one(self, rng):
        a = unit_rows(rng, 3, 5)
        assert cosine_pair_matrix(a, a)[1, 1] == pytest.approx(1.0, abs=1e-15)

    def test_matches_entry_loop(self, rng):
        a, b = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
        want = np.array([[sum(a[r, k] * b[c, k] for k in range(4)) for c in range(3)] for r in range(3)])
        np.testing.assert_allclose(cosine_pair_matrix(a, b), want, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cosine_pair_matrix(unit_rows(rng, 2, 3), unit_rows(rng, 2, 4))


class TestCosineTensor:
    def test_identical_vectors(self):
        assert cosine_tensor(one(E1), one(E1), one(E1)).scores[0, 0, 0] == pytest.approx(1.0)

    def test_orthogonal_vectors(self):
        assert cosine_tensor(one(E1), one(E2), one(E3)).scores[0, 0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_equilateral_minimum(self):
        s = cosine_tensor(one(TRI[0]), one(TRI[1]), one(TRI[2])).scores[0, 0, 0]
        assert s == pytest.approx(-0.5, abs=1e-15)

    def test_axis_convention(self, rng):
        t, i, p = (unit_rows(rng, 3, 4) for _ in range(3))
        s = cosine_tensor(t, i, p).scores
        want = (t[2] @ i[0] + t[2] @ p[1] + i[0] @ p[1]) / 3
        assert s[2, 0, 1] == pytest.approx(want, abs=1e-15)

    def test_requires_unit_rows(self):
        with pytest.raises(ValueError):
            cosine_tensor([[2.0, 0.0]], [[1.0, 0.0]], [[1.0, 0.0]])

    def test_batch_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cosine_tensor(unit_rows(rng, 2, 3), unit_rows(rng, 3, 3), unit_rows(rng, 2, 3))

    def test_batch_cap(self, rng):
        x = unit_rows(rng, 5, 2)
        with pytest.raises(ShapeError):
            cosine_tensor(x, x, x, max_batch=4)


class TestL2:
    def test_identical(self):
        assert l2_tensor(one(E1), one(E1), one(E1))[0, 0, 0] == 0.0

    def test_orthogonal(self):
        assert l2_tensor(one(E1), one(E2), one(E3))[0, 0, 0] == pytest.approx(3 * math.sqrt(2), abs=1e-12)
        assert 3 * math.sqrt(2) == pytest.approx(4.242640687, abs=1e-9)

    def test_equilateral(self):
        assert l2_tensor(one(TRI[0]), one(TRI[1]), one(TRI[2]))[0, 0, 0] == pytest.approx(
            3 * math.sqrt(3), abs=1e-12)

    def test_unsquared(self):
        # squared distances would give 2+2+2 = 6 for the orthogonal triple
        assert l2_tensor(one(E1), one(E2), one(E3))[0, 0, 0] != pytest.approx(6.0)

    def test_l_max(self):
        assert l_max(3) == pytest.approx(5.196152423, abs=1e-9)
        with pytest.raises(UnsupportedModalityCount, match="unsupported q"):
            l_max(2)

    @pytest.mark.parametrize("raw, want", [(0.0, 1.0), (3 * math.sqrt(3), 0.0),
                                           (3 * math.sqrt(2), 0.183503419)])
    def test_map(self, raw, want):
        assert map_l2(np.array(raw)) == pytest.approx(want, abs=1e-9)

    def test_map_returns_tensor_for_cubes(self):
        out = map_l2(np.zeros((2, 2, 2)))
        assert isinstance(out, SimilarityTensor) and out.metric == "l2_mapped"

    def test_map_rejects_negative_and_bad_q(self):
        with pytest.raises(ValueError):
            map_l2(np.array([-1.0]))
        with pytest.raises(UnsupportedModalityCount):
            map_l2(np.array([1.0]), q=4)

    def test_random_triples_below_lmax(self, rng):
        x = rng.standard_normal((3, 100_000, 5))
        x /= np.linalg.norm(x, axis=2, keepdims=True)
        a, b, c = x
        s = (np.linalg.norm(a - b, axis=1) + np.linalg.norm(a - c, axis=1)
             + np.linalg.norm(b - c, axis=1))
        assert s.max() <= l_max(3) + 1e-9


triple = arrays(np.float64, (3, 4), elements=st.floats(-10, 10)).filter(
    lambda x: np.all(np.linalg.norm(x, axis=1) > 1e-3))


class TestInvariants:
    @settings(max_examples=200)
    @given(triple)
    def test_bounds(self, x):
        u = normalize_rows(x)
        c = cosine_tensor(u[:1], u[1:2], u[2:]).scores[0, 0, 0]
        m = map_l2(l2_tensor(u[:1], u[1:2], u[2:])).scores[0, 0, 0]
        assert -0.5 - 1e-12 <= c <= 1 + 1e-12
        assert -1e-12 <= m <= 1 + 1e-12

    @given(triple, st.permutations([0, 1, 2]))
    def test_role_symmetry(self, x, perm):
        u = normalize_rows(x)
        v = u[list(perm)]
        for f in (lambda a: cosine_tensor(a[:1], a[1:2], a[2:]).scores,
                  lambda a: l2_tensor(a[:1], a[1:2], a[2:])):
            assert f(u)[0, 0, 0] == pytest.approx(f(v)[0, 0, 0], abs=1e-12)

    @given(st.floats(0, 5.0), st.floats(0, 5.0))
    def test_map_strictly_decreasing(self, a, b):
        lo, hi = sorted((a, b))
        if hi - lo < 1e-9:
            return
        assert map_l2(np.array(lo)) > map_l2(np.array(hi))

    def test_mapped_one_iff_coincident(self, rng):
        u = unit_rows(rng, 1, 6)
        assert map_l2(l2_tensor(u, u, u)).scores[0, 0, 0] == pytest.approx(1.0, abs=1e-9)
        v = normalize_rows(u + 1e-3)
        assert map_l2(l2_tensor(u, u, v)).scores[0, 0, 0] < 1.0 - 1e-9

    def test_large_sample_bounds(self, rng):
        t, i, p = (unit_rows(rng, 22, 3) for _ in range(3))  # 22**3 > 10**4 triples
        c = cosine_tensor(t, i, p).scores
        m = map_l2(l2_tensor(t, i, p)).scores
        assert c.min() >= -0.5 - 1e-12 and c.max() <= 1 + 1e-12
        assert m.min() >= 0 and m.max() <= 1


@pytest.mark.parametrize("b, tensor, pairs", [(2, 8, 12), (8, 512, 192), (192, 7_077_888, 110_592)])
def test_combination_counts(b, tensor, pairs):
    assert combination_counts(b, 3) == (tensor, pairs)
