import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierfi.stats import Tail, benjamini_hochberg, wilcoxon_signed_rank
from oracles import bh_direct, signed_rank_enumeration


class TestWilcoxon:
    def test_all_zero_is_degenerate(self):
        res = wilcoxon_signed_rank([0, 0, 0], Tail.GREATER)
        assert res.p_value == 1.0
        assert res.n_effective == 0

    def test_all_positive_six(self):
        res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], Tail.GREATER)
        assert res.statistic == 21
        assert res.p_value == pytest.approx(1 / 64, abs=1e-15)

    def test_one_negative_of_five(self):
        res = wilcoxon_signed_rank([-1, 2, 3, 4, 5], Tail.GREATER)
        assert res.statistic == 14
        assert res.p_value == pytest.approx(2 / 32, abs=1e-15)

    def test_frozen_values_match_enumeration(self):
        assert signed_rank_enumeration([1, 2, 3, 4, 5, 6]) == 1 / 64
        assert signed_rank_enumeration([-1, 2, 3, 4, 5]) == 2 / 32

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([])

    def test_nonfinite_raises(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, np.nan])

    def test_zeros_dropped(self):
        a = wilcoxon_signed_rank([0, 0, 1, 2, -0.5])
        b = wilcoxon_signed_rank([1, 2, -0.5])
        assert a.p_value == b.p_value
        assert a.n_effective == 3

    def test_effect_size_is_mean(self):
        assert wilcoxon_signed_rank([0, 1, 2, 5]).effect_size == 2.0

    @settings(max_examples=150, deadline=None)
    @given(
        st.lists(st.integers(min_value=-4, max_value=4), min_size=1, max_size=10),
        st.sampled_from(["greater", "two_sided"]),
    )
    def test_exact_matches_enumeration_with_ties(self, diffs, tail):
        res = wilcoxon_signed_rank(diffs, tail)
        assert res.p_value == pytest.approx(signed_rank_enumeration(diffs, tail), abs=1e-12)

    def test_two_sided_symmetric(self):
        d = [1.5, -2.0, 3.0, 4.0, 0.3, 7.0]
        neg = [-x for x in d]
        assert wilcoxon_signed_rank(d, "two_sided").p_value == wilcoxon_signed_rank(neg, "two_sided").p_value

    def test_approx_agrees_with_exact(self):
        from hierfi import stats

        rng = np.random.default_rng(11)
        for n in range(20, 26):
            for _ in range(20):
                d = rng.normal(0.3, 1.0, size=n)
                exact = wilcoxon_signed_rank(d).p_value
                ranks = stats.rankdata(np.abs(d))
                w = float(ranks[d > 0].sum())
                approx, _ = stats._normal_tails(ranks, w)
                assert abs(exact - approx) < 0.01

    def test_large_n_uses_normal_approximation(self):
        from scipy.stats import wilcoxon as scipy_wilcoxon

        rng = np.random.default_rng(3)
        d = rng.normal(0.1, 1.0, size=200)
        ours = wilcoxon_signed_rank(d, "greater").p_value
        ref = scipy_wilcoxon(d, alternative="greater", method="approx", correction=True).pvalue
        assert ours == pytest.approx(ref, rel=1e-9)

    def test_null_rejection_rate(self):
        rng = np.random.default_rng(2024)
        draws = 10_000
        rejected = 0
        for _ in range(draws):
            d = rng.standard_normal(20)
            if wilcoxon_signed_rank(d).p_value <= 0.05:
                rejected += 1
        assert abs(rejected / draws - 0.05) <= 0.01


class TestBenjaminiHochberg:
    def test_single(self):
        assert benjamini_hochberg([0.01], 0.05) == {0}

    def test_worked_example(self):
        assert benjamini_hochberg([0.01, 0.02, 0.04, 0.2], 0.05) == {0, 1}

    def test_none(self):
        assert benjamini_hochberg([0.9, 0.8, 0.99], 0.05) == set()

    def test_empty(self):
        assert benjamini_hochberg([], 0.05) == set()

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.1, 2.0])
    def test_bad_q(self, q):
        with pytest.raises(ValueError):
            benjamini_hochberg([0.1], q)

    def test_ties_rejected_together(self):
        assert benjamini_hochberg([0.03, 0.03, 0.03], 0.05) == {0, 1, 2}

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
    def test_order_invariant(self, p, rnd):
        perm = list(range(len(p)))
        rnd.shuffle(perm)
        shuffled = [p[i] for i in perm]
        mapped = {perm[i] for i in benjamini_hochberg(shuffled, 0.1)}
        assert mapped == benjamini_hochberg(p, 0.1)

    def test_adding_p_one_can_remove_rejection(self):
        # k grows, so every threshold shrinks
        assert benjamini_hochberg([0.05], 0.05) == {0}
        assert benjamini_hochberg([0.05, 1.0], 0.05) == set()

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_adding_p_zero_keeps_rejections(self, p):
        before = benjamini_hochberg(p, 0.05)
        after = benjamini_hochberg(p + [0.0], 0.05)
        assert before <= after

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.data())
    def test_lowering_a_p_value_keeps_rejections(self, p, data):
        i = data.draw(st.integers(0, len(p) - 1))
        lowered = list(p)
        lowered[i] = data.draw(st.floats(0, p[i]))
        assert benjamini_hochberg(p, 0.05) <= benjamini_hochberg(lowered, 0.05)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.001, 0.5))
    def test_matches_direct_rule(self, p, q):
        assert benjamini_hochberg(p, q) == bh_direct(p, q)
