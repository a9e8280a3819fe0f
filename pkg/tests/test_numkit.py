import math

import numpy as np
import pytest

from psdlab.errors import DegenerateInputError, InvalidInputError
from psdlab.numkit import (
    RngState,
    cross_entropy_rows,
    derive_seed,
    normalize_rows_l2,
    softmax_rows,
)

from oracles import cross_entropy_scalar, softmax_row_scalar


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = softmax_rows([[0.0, 0.0]], scale=1.0)
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_uniform_limit_at_tiny_scale(self):
        out = softmax_rows([[5.0, 1.0]], scale=1e-9)
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-6)

    def test_scalar_oracle(self):
        out = softmax_rows([[1.0, 0.0]], scale=2.0)
        np.testing.assert_allclose(out[0], softmax_row_scalar([1.0, 0.0], 2.0), rtol=1e-13)
        np.testing.assert_allclose(out, [[0.880797, 0.119203]], atol=1e-6)

    def test_rows_sum_to_one_across_scales(self, rng):
        m = 10.0 * rng.normals(20, 6)
        for scale in (1e-9, 1e-3, 1.0, 100.0, 1e4):
            out = softmax_rows(m, scale)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
            assert out.min() >= 0.0

    def test_shift_invariance(self, rng):
        m = rng.normals(8, 5)
        shifted = m + 123.456
        np.testing.assert_allclose(softmax_rows(m, 2.5), softmax_rows(shifted, 2.5), atol=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidInputError):
            softmax_rows([[np.nan, 0.0]], 1.0)
        with pytest.raises(InvalidInputError):
            softmax_rows([[1.0, 0.0]], 0.0)
        with pytest.raises(InvalidInputError):
            softmax_rows([[1.0, 0.0]], -2.0)


class TestCrossEntropyRows:
    def test_uniform_prediction(self):
        val = cross_entropy_rows(np.eye(2), [[0.5, 0.5], [0.5, 0.5]])
        assert val == pytest.approx(math.log(2.0), abs=1e-12)

    def test_entropy_identity(self, rng):
        p = softmax_rows(rng.normals(6, 4), 1.0)
        entropy = float(-(p * np.log(p)).sum() / p.shape[0])
        assert cross_entropy_rows(p, p) == pytest.approx(entropy, abs=1e-12)

    def test_scalar_oracle(self, rng):
        t = softmax_rows(rng.normals(3, 3), 1.0)
        p = softmax_rows(rng.normals(3, 3), 1.0)
        assert cross_entropy_rows(t, p) == pytest.approx(
            cross_entropy_scalar(t.tolist(), p.tolist()), abs=1e-12)

    def test_zero_rows(self):
        assert cross_entropy_rows(np.zeros((0, 4)), np.zeros((0, 4))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            cross_entropy_rows(np.eye(2), np.ones((3, 2)) / 2)

    def test_gibbs_inequality(self, rng):
        for _ in range(30):
            t = softmax_rows(rng.normals(5, 6), 1.0)
            p = softmax_rows(rng.normals(5, 6), 1.0)
            entropy = float(-(t * np.log(t)).sum() / t.shape[0])
            assert cross_entropy_rows(t, p) >= entropy - 1e-10


class TestNormalizeRows:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize_rows_l2([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)

    def test_idempotent_on_unit_rows(self, rng):
        m = normalize_rows_l2(rng.normals(5, 4))
        np.testing.assert_allclose(normalize_rows_l2(m), m, atol=1e-15)

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError, match="row 1"):
            normalize_rows_l2([[1.0, 0.0], [0.0, 0.0]])

    def test_unit_norms(self, rng):
        out = normalize_rows_l2(100.0 * rng.normals(20, 7))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


class TestRngState:
    def test_bit_identical_streams(self):
        a = RngState(99)
        b = RngState(99)
        assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]

    def test_known_seed_changes_stream(self):
        assert RngState(1).next_u64() != RngState(2).next_u64()

    def test_uniform_range(self):
        r = RngState(5)
        xs = r.uniforms(1000)
        assert xs.min() >= 0.0 and xs.max() < 1.0

    def test_normals_reproducible_and_shaped(self):
        a = RngState(3).normals(4, 5)
        b = RngState(3).normals(4, 5)
        assert a.shape == (4, 5)
        np.testing.assert_array_equal(a, b)

    def test_normals_moments(self):
        xs = RngState(11).normals(200000)
        assert abs(xs.mean()) < 0.01
        assert abs(xs.std() - 1.0) < 0.01

    def test_permutation_is_permutation(self):
        perm = RngState(17).permutation(200)
        np.testing.assert_array_equal(np.sort(perm), np.arange(200))

    def test_permutation_reproducible(self):
        np.testing.assert_array_equal(RngState(17).permutation(50), RngState(17).permutation(50))

    def test_randint_bounds_and_bias(self):
        r = RngState(7)
        draws = [r.randint(3) for _ in range(9000)]
        assert set(draws) == {0, 1, 2}
        for k in range(3):
            assert abs(draws.count(k) / 9000 - 1 / 3) < 0.03

    def test_randint_rejects_nonpositive(self):
        with pytest.raises(InvalidInputError):
            RngState(0).randint(0)

    def test_derive_seed_decorrelates(self):
        seeds = {derive_seed(42, label, epoch) for label in range(5) for epoch in range(5)}
        assert len(seeds) == 25
