import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irispad.errors import ConfigError
from irispad.evaluation import (
    ScoreSet,
    apcer_bpcer,
    ccr,
    compute_report,
    eer,
    error_counts,
    fisher_ratio,
    format_table,
    hter,
    hter_from_rates,
    read_scores,
    round2,
    score_histogram,
    tdr_at_fdr,
    write_histogram,
    write_report,
    write_scores,
)

from .oracles import counts_at, eer_oracle, rocch_eer, sweep, tdr_oracle


def ss(att, bf):
    return ScoreSet(list(att) + list(bf), [1] * len(att) + [0] * len(bf))


EXAMPLE = ss([0.9, 0.4, 0.6], [0.1, 0.7])


class TestApcerBpcer:
    def test_hand_count(self):
        a, b = apcer_bpcer(EXAMPLE)
        assert a == pytest.approx(100 / 3) and b == 50

    def test_separated(self):
        assert apcer_bpcer(ss([0.8, 0.9], [0.1, 0.2])) == (0, 0)

    def test_boundary_counts_as_attack(self):
        assert apcer_bpcer(ss([0.5, 0.5], [0.5, 0.5])) == (0, 100)

    def test_missing_class_named(self):
        with pytest.raises(ConfigError, match="bona fide"):
            apcer_bpcer(ss([0.3], []))
        with pytest.raises(ConfigError, match="attack"):
            apcer_bpcer(ss([], [0.3]))

    def test_invalid_inputs(self):
        with pytest.raises(ConfigError):
            ScoreSet([0.1, 0.2], [0])
        with pytest.raises(ConfigError):
            ScoreSet([0.1], [2])


class TestHter:
    def test_mean(self):
        assert hter(EXAMPLE) == pytest.approx(41.67, abs=0.005)

    def test_perfect(self):
        assert hter(ss([0.9], [0.1])) == 0

    def test_table_row_arithmetic(self):
        assert round2(hter_from_rates(8.86, 4.13)) == "6.50"


class TestEer:
    def test_separable(self):
        assert eer(ss([0.9, 0.8], [0.1, 0.2]))[0] == 0

    def test_two_by_two_discrete_vs_interpolated(self):
        # one error per side at the crossing: 1/2 attacks and 1/2 bona fides
        att, bf = [0.4, 0.9], [0.1, 0.6]
        value, t = eer(ss(att, bf))
        assert value == 50.0 and t == pytest.approx(0.6)
        assert (value, t) == eer_oracle(np.array(att + bf), np.array([1, 1, 0, 0]))
        # the interpolated (convex-hull) EER of the same set is 25%
        assert rocch_eer(np.array(att), np.array(bf)) == pytest.approx(25.0)

    def test_ties_take_lowest_threshold(self):
        # |apcer - bpcer| = 0 on the whole interval (0.2, 0.8]
        value, t = eer(ss([0.8, 0.9], [0.1, 0.2]))
        assert value == 0 and t == pytest.approx(0.8)

    def test_shuffled_labels_near_fifty(self):
        gen = np.random.default_rng(0)
        scores = gen.random(4000)
        labels = gen.permutation(np.repeat([0, 1], 2000))
        assert abs(eer(ScoreSet(scores, labels))[0] - 50) <= 5

    def test_hter_at_eer_threshold(self):
        s = ss([0.3, 0.7, 0.9, 0.95], [0.1, 0.2, 0.5, 0.8])
        value, t = eer(s)
        a, b = apcer_bpcer(s, t)
        assert a == b and hter(s, t) == value


class TestTdr:
    def test_separable(self):
        assert tdr_at_fdr(ss([0.9, 0.8], [0.1, 0.2]))[0] == 100

    def test_inverted(self):
        assert tdr_at_fdr(ss([0.1, 0.2], [0.8, 0.9]))[0] == 0

    def test_overlap_matches_oracle(self):
        gen = np.random.default_rng(42)
        bf = gen.uniform(0.0, 0.6, 1000)
        att = np.concatenate([gen.uniform(0.6, 1.0, 900), gen.uniform(0.0, 0.6, 100)])
        s = ss(att, bf)
        assert tdr_at_fdr(s, 0.002) == tdr_oracle(s.scores, s.labels, 0.002)

    def test_fraction_validated(self):
        with pytest.raises(ConfigError):
            tdr_at_fdr(EXAMPLE, 2.0)


class TestCcrFisher:
    def test_ccr_example(self):
        assert ccr(EXAMPLE) == 60

    def test_ccr_trivial(self):
        assert ccr(ss([0.9], [0.1])) == 100
        assert ccr(ScoreSet([0.4], [0])) == 100

    def test_fisher_hand(self):
        assert fisher_ratio(ss([0.8, 1.0], [0.0, 0.2])) == pytest.approx(32)

    def test_fisher_degenerate(self):
        assert fisher_ratio(ss([0.5, 0.5], [0.5, 0.5])) == 0
        assert fisher_ratio(ss([0.9, 0.9], [0.1, 0.1])) == math.inf
        with pytest.raises(ConfigError):
            fisher_ratio(ss([0.9], [0.1, 0.2]))

    def test_fisher_identical(self):
        assert fisher_ratio(ss([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])) == 0


score_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(score_lists, score_lists)
    def test_counts_match_brute_force(self, att, bf):
        s = ss(att, bf)
        ts, a_or, b_or = sweep(s.scores, s.labels)
        a, b = error_counts(s, ts)
        assert a.tolist() == a_or.tolist() and b.tolist() == b_or.tolist()
        for t in ts[:5]:
            assert (a[ts.tolist().index(t)], b[ts.tolist().index(t)]) == counts_at(s.scores, s.labels, t)

    @settings(max_examples=100, deadline=None)
    @given(score_lists, score_lists)
    def test_monotone_over_sweep(self, att, bf):
        s = ss(att, bf)
        ts = np.sort(np.concatenate([s.scores, [0, 1]]))[::-1]
        a, b = error_counts(s, ts)
        assert np.all(np.diff(a) <= 0) and np.all(np.diff(b) >= 0)

    @settings(max_examples=100, deadline=None)
    @given(score_lists, score_lists)
    def test_eer_and_tdr_match_oracles(self, att, bf):
        s = ss(att, bf)
        assert eer(s) == eer_oracle(s.scores, s.labels)
        for fdr in (0.0, 0.002, 0.1, 0.5):
            assert tdr_at_fdr(s, fdr) == tdr_oracle(s.scores, s.labels, fdr)

    @settings(max_examples=100, deadline=None)
    @given(score_lists, score_lists, st.floats(0, 0.5), st.floats(0, 0.5))
    def test_tighter_fdr_never_raises_tdr(self, att, bf, f1, f2):
        s = ss(att, bf)
        lo, hi = sorted((f1, f2))
        assert tdr_at_fdr(s, lo)[0] <= tdr_at_fdr(s, hi)[0]

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.integers(0, 1000), min_size=1, max_size=30),
        st.lists(st.integers(0, 1000), min_size=1, max_size=30),
    )
    def test_monotone_transform_invariance(self, att, bf):
        # integer-grid scores keep the transform exactly order-preserving in floating point
        a, b = np.array(att) / 1000, np.array(bf) / 1000
        f = lambda x: x**2 / 2 + 0.25
        s, g = ss(a, b), ss(f(a), f(b))
        assert eer(s)[0] == eer(g)[0]
        assert tdr_at_fdr(s, 0.1)[0] == tdr_at_fdr(g, 0.1)[0]
        assert np.array_equal(np.argsort(s.scores, kind="stable"), np.argsort(g.scores, kind="stable"))

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(0, 1), min_size=2, max_size=30),
        st.lists(st.floats(0, 1), min_size=2, max_size=30),
        st.floats(0.01, 10),
        st.floats(-5, 5),
    )
    def test_fisher_affine_invariance(self, att, bf, scale, shift):
        s = ss(att, bf)
        if np.var(att) + np.var(bf) < 1e-6:
            return
        g = ss(np.array(att) * scale + shift, np.array(bf) * scale + shift)
        assert fisher_ratio(g) == pytest.approx(fisher_ratio(s), rel=1e-6, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(score_lists, score_lists, st.floats(0, 1))
    def test_rates_bounded_and_hter_exact(self, att, bf, t):
        r = compute_report(ss(att, bf), threshold=t)
        for v in (r.apcer, r.bpcer, r.hter, r.eer, r.tdr_at_fdr, r.ccr):
            assert 0 <= v <= 100
        assert r.hter == (r.apcer + r.bpcer) / 2


class TestReports:
    def test_report_files(self, tmp_path):
        r = compute_report(EXAMPLE, "toy")
        assert (r.n_attack, r.n_bona_fide, r.n_attack_errors, r.n_bona_fide_errors) == (3, 2, 1, 1)
        txt, js = write_report([r], tmp_path)
        table = txt.read_text()
        assert "33.33" in table and "41.67" in table and "toy" in table
        loaded = json.loads(js.read_text())
        assert loaded[0]["apcer"] == pytest.approx(100 / 3)

    def test_round_half_up(self):
        assert [round2(v) for v in (0.125, 2.675, 6.494999999999999, 1 / 3)] == ["0.13", "2.68", "6.50", "0.33"]

    def test_two_decimals(self):
        r = compute_report(EXAMPLE, "toy")
        assert "60.00" in format_table([r])

    def test_infinite_fisher_serializes(self, tmp_path):
        _, js = write_report([compute_report(ss([0.9, 0.9], [0.1, 0.1]), "inf")], tmp_path)
        assert json.loads(js.read_text())[0]["fisher_ratio"] == "inf"

    def test_scores_round_trip(self, tmp_path):
        meta = [{"sample_path": f"x{i}.png", "database": "db", "sensor": "s", "attack_type": "none" if i % 2 else "printout",
                 "known_unknown": ""} for i in range(4)]
        s = ScoreSet([0.1, 0.123456789012345, 0.9, 1e-17], [1, 0, 1, 0], meta)
        back = read_scores(write_scores(s, tmp_path / "s.csv"))
        assert np.array_equal(back.scores, s.scores) and np.array_equal(back.labels, s.labels)
        assert back.metadata == meta

    def test_histogram(self, tmp_path):
        s = ss([0.95, 0.96, 0.5], [0.01, 0.02])
        centers, bf, at = score_histogram(s, bins=10)
        assert len(centers) == 10 and bf.sum() == 2 and at.sum() == 3
        assert bf[0] == 2 and at[-1] == 2
        lines = write_histogram(s, tmp_path / "h.csv", bins=10).read_text().splitlines()
        assert lines[0] == "bin_center,bona_fide_count,attack_count" and len(lines) == 11
