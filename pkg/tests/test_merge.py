"""Merging strategies, cosine selection and the harmonic mean."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdrqlab.checkpoint import QuantizedCheckpoint
from hdrqlab.merge import (
    cosine_score,
    harmonic_mean,
    merge_fp_midpoint,
    merge_int_naive,
    merge_noise_sampled,
    round_half_even,
    run_merge,
)
from hdrqlab.nnet import Batch, DimensionError, Layer, Network, accuracy
from hdrqlab.quant import QuantizedTensor, QuantScheme


def scalar_ck(i, step, bits=4):
    return QuantizedCheckpoint([QuantizedTensor(np.array([[i]]), QuantScheme(bits, step))], [np.zeros(1)], [None])


def vector_ck(ints, step, bits=4):
    ints = np.asarray(ints).reshape(1, -1)
    return QuantizedCheckpoint([QuantizedTensor(ints, QuantScheme(bits, step))], [np.zeros(1)], [None])


def scalar_net(w):
    return Network([Layer([[float(w)]], [0.0], "identity")])


def plane_net(x, y):
    return Network([Layer([[float(x), float(y)]], [0.0], "identity")])


class TestFpMidpoint:
    def test_idempotent(self):
        a = Network.init([2, 3, 2], np.random.default_rng(0))
        for p, q in zip(merge_fp_midpoint(a, a).params(), a.params()):
            np.testing.assert_array_equal(p, q)

    def test_scalar(self):
        assert merge_fp_midpoint(scalar_net(1), scalar_net(3)).layers[0].weight[0, 0] == 2.0

    def test_commutative(self):
        rng = np.random.default_rng(1)
        a, b = Network.init([2, 3, 2], rng), Network.init([2, 3, 2], rng)
        assert merge_fp_midpoint(a, b).flat().tobytes() == merge_fp_midpoint(b, a).flat().tobytes()


class TestIntNaive:
    def _merged_int(self, i1, s1, i2, s2):
        return int(merge_int_naive(scalar_ck(i1, s1), scalar_ck(i2, s2)).ints[0][0, 0])

    def test_equal_inputs(self):
        assert self._merged_int(5, 0.3, 5, 0.3) == 5

    def test_tie_goes_to_even(self):
        assert self._merged_int(3, 0.1, 4, 0.1) == 4

    def test_unequal_steps_still_tied(self):
        assert self._merged_int(2, 0.1, 4, 0.3) == 4

    def test_unequal_steps_resolved(self):
        assert self._merged_int(2, 0.1, 4, 0.2) == 3

    def test_merged_step_is_mean(self):
        c = merge_int_naive(scalar_ck(2, 0.1), scalar_ck(4, 0.2))
        assert c.checkpoint.weights[0].scheme.step == pytest.approx(0.15)

    def test_round_half_even(self):
        np.testing.assert_array_equal(round_half_even(np.array([0.5, 1.5, 2.5, -0.5, 3.4999999999999996])),
                                      [0, 2, 2, 0, 4])

    @settings(max_examples=100)
    @given(st.lists(st.integers(-8, 7), min_size=1, max_size=12), st.data(),
           st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_symmetric_and_in_range(self, ia, data, sa, sb):
        ib = data.draw(st.lists(st.integers(-8, 7), min_size=len(ia), max_size=len(ia)))
        ab = merge_int_naive(vector_ck(ia, sa), vector_ck(ib, sb)).ints[0]
        ba = merge_int_naive(vector_ck(ib, sb), vector_ck(ia, sa)).ints[0]
        np.testing.assert_array_equal(ab, ba)
        assert ab.min() >= -8 and ab.max() <= 7

    def test_bit_mismatch(self):
        with pytest.raises(DimensionError):
            merge_int_naive(scalar_ck(1, 0.1, bits=4), scalar_ck(1, 0.1, bits=3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            merge_int_naive(vector_ck([1, 2], 0.1), vector_ck([1, 2, 3], 0.1))


class TestNoiseSampled:
    def test_tie_broken_evenly(self):
        rep = merge_noise_sampled(scalar_ck(3, 0.1), scalar_ck(4, 0.1), n_candidates=10_000,
                                  rng=np.random.default_rng(0))
        ints = np.array([c.ints[0][0, 0] for c in rep.candidates[1:]])
        assert set(np.unique(ints)) == {3, 4}
        assert abs(np.mean(ints == 3) - 0.5) < 0.05

    def test_tiny_steps_give_the_midpoint(self):
        rng = np.random.default_rng(1)
        ia, ib = rng.integers(-8, 8, size=20), rng.integers(-8, 8, size=20)
        keep = (ia + ib) % 2 == 0  # no ties, so the midpoint is an integer
        ia, ib = ia[keep], ib[keep]
        rep = merge_noise_sampled(vector_ck(ia, 1e-9), vector_ck(ib, 1e-9), n_candidates=20, rng=rng)
        for c in rep.candidates:
            np.testing.assert_array_equal(c.ints[0][0], (ia + ib) // 2)

    def test_argmax_dominates_naive(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            ia, ib = rng.integers(-8, 8, size=(2, 1, 12))
            sa, sb = rng.uniform(0.05, 0.2, size=2)
            a, b = vector_ck(ia, sa), vector_ck(ib, sb)
            rep = merge_noise_sampled(a, b, n_candidates=10, rng=rng)
            naive = merge_int_naive(a, b)
            assert rep.chosen.score >= naive.score
            assert rep.chosen.score == rep.all_scores.max()
            assert rep.all_scores[0] == naive.score

    def test_parallel_matches_serial(self):
        a, b = vector_ck(np.arange(-4, 4), 0.1), vector_ck(np.arange(-3, 5), 0.12)
        s = merge_noise_sampled(a, b, n_candidates=8, rng=np.random.default_rng(5))
        p = merge_noise_sampled(a, b, n_candidates=8, rng=np.random.default_rng(5), jobs=3)
        np.testing.assert_array_equal(s.all_scores, p.all_scores)

    def test_self_merge_is_identity(self):
        rng = np.random.default_rng(4)
        ck = QuantizedCheckpoint([QuantizedTensor(rng.integers(-8, 8, size=(2, 2)), QuantScheme(4, 0.3))],
                                 [rng.normal(size=2)], [None])
        batch = Batch(rng.normal(size=(64, 2)), rng.integers(0, 2, size=64))
        base = accuracy(ck.to_network(), batch)
        for strategy in ("fp_midpoint", "int_naive", "noise_sampled"):
            rep = run_merge([ck, ck], strategy, rng=np.random.default_rng(0), eval_batches={"d": batch})
            np.testing.assert_allclose(rep.chosen.checkpoint.to_network().flat(), ck.to_network().flat(), rtol=1e-15)
            assert rep.per_domain_metric["d"] == base

    def test_three_way(self):
        cks = [vector_ck([i, i + 1], 0.1) for i in (0, 1, 2)]
        batches = {f"d{k}": Batch(np.ones((4, 2)), np.zeros(4, int)) for k in range(3)}
        rep = run_merge(cks, "noise_sampled", n_candidates=5, rng=np.random.default_rng(0), eval_batches=batches)
        assert len(rep.per_domain_metric) == 3
        np.testing.assert_array_equal(rep.chosen.ints[0], [[1, 2]])


class TestCosineScore:
    def test_midpoint_scores_one(self):
        assert cosine_score(plane_net(0, 0), plane_net(-1, 0), plane_net(1, 0)) == pytest.approx(1.0)

    def test_orthogonal_displacement_decreases(self):
        t1, t2 = plane_net(-1, 0), plane_net(1, 0)
        scores = [cosine_score(plane_net(0, d), t1, t2) for d in (0.0, 0.1, 0.5, 1.0, 3.0)]
        assert all(a > b for a, b in zip(scores, scores[1:]))
        # both one-sided terms agree for a symmetric displacement
        one = cosine_score(plane_net(0, 0.5), t1, t2, symmetric=False)
        assert one == pytest.approx(scores[2])

    def test_identical_targets_score_zero(self):
        t = plane_net(1, 2)
        assert cosine_score(plane_net(0, 0), t, t) == 0.0

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m, a, b = (plane_net(*rng.normal(size=2)) for _ in range(3))
            assert -1.0 <= cosine_score(m, a, b) <= 1.0


class TestHarmonicMean:
    def test_constant(self):
        assert harmonic_mean([0.7, 0.7]) == pytest.approx(0.7)

    def test_pair(self):
        assert harmonic_mean([1, 3]) == pytest.approx(1.5)

    def test_three(self):
        assert harmonic_mean([60, 40, 80]) == pytest.approx(3 / (1 / 60 + 1 / 40 + 1 / 80))
        assert harmonic_mean([60, 40, 80]) == pytest.approx(55.38, abs=0.01)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            harmonic_mean([0.5, 0.0])

    @given(st.lists(st.floats(0.01, 100), min_size=1, max_size=8))
    def test_below_arithmetic_mean(self, values):
        assert harmonic_mean(values) <= np.mean(values) * (1 + 1e-12)


def test_report_csv(tmp_path):
    a, b = vector_ck([1, 2, 3], 0.1), vector_ck([2, 3, 5], 0.1)
    rep = merge_noise_sampled(a, b, n_candidates=4, rng=np.random.default_rng(0),
                              eval_batches={"d": Batch(np.ones((2, 3)), np.zeros(2, int))})
    path = tmp_path / "scores.csv"
    rep.write_scores_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "seed,score,hmean" and len(rows) == 1 + 5 and rows[1].startswith("-1,")
