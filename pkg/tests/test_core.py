import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from permdebias.core import (
    Distribution,
    Permutation,
    PredictionRecord,
    RawLabelMass,
    RecordSet,
    answers_from_labels,
    decide,
    enumerate_permutations,
    labels_from_answers,
    normalize_labels,
    permutation_ranks,
    to_answer_space,
)
from permdebias.errors import AllZeroMass, TooManyOptions, ValidationError


def rec(mapping, labels, gold=None, eid="x"):
    return PredictionRecord(eid, len(mapping), Permutation(tuple(mapping)), Distribution(labels), gold)


@st.composite
def perm_and_dist(draw, kmax=6):
    k = draw(st.integers(2, kmax))
    mapping = draw(st.permutations(list(range(k))))
    w = draw(st.lists(st.floats(0.01, 10), min_size=k, max_size=k))
    p = np.array(w) / sum(w)
    return k, tuple(mapping), p


class TestDistribution:
    def test_rejects_bad_sum(self):
        with pytest.raises(ValidationError):
            Distribution([0.5, 0.4])

    def test_rejects_negative(self):
        with pytest.raises(ValidationError):
            Distribution([1.2, -0.2])

    def test_rejects_single_option(self):
        with pytest.raises(ValidationError):
            Distribution([1.0])

    def test_read_only(self):
        d = Distribution([0.5, 0.5])
        with pytest.raises(ValueError):
            d.probs[0] = 1.0


class TestNormalize:
    def test_symmetric_masses(self):
        out = normalize_labels(RawLabelMass([0.2] * 4, 0.2))
        np.testing.assert_allclose(out.probs, [0.25] * 4)

    def test_residual_discarded(self):
        out = normalize_labels(RawLabelMass([0.6, 0.3], 0.1))
        np.testing.assert_allclose(out.probs, [2 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_all_zero(self):
        with pytest.raises(AllZeroMass):
            normalize_labels(RawLabelMass([0.0, 0.0], 1.0))

    def test_overfull_mass_rejected(self):
        with pytest.raises(ValidationError):
            RawLabelMass([0.7, 0.5], 0.0)

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=6).filter(lambda m: 0 < sum(m)),
           st.floats(0, 1))
    def test_output_is_distribution(self, masses, residual):
        total = sum(masses) + residual
        raw = RawLabelMass(np.array(masses) / total, residual / total)
        out = normalize_labels(raw)
        assert np.all(out.probs >= 0)
        assert abs(out.probs.sum() - 1) <= 1e-9


class TestAnswerSpace:
    def test_identity(self):
        np.testing.assert_array_equal(to_answer_space(rec([0, 1], [0.7, 0.3])).probs, [0.7, 0.3])

    def test_swap(self):
        np.testing.assert_array_equal(to_answer_space(rec([1, 0], [0.7, 0.3])).probs, [0.3, 0.7])

    def test_three_way(self):
        np.testing.assert_array_equal(to_answer_space(rec([2, 0, 1], [0.5, 0.3, 0.2])).probs, [0.3, 0.2, 0.5])

    @given(perm_and_dist())
    def test_round_trip(self, case):
        k, mapping, p = case
        a = answers_from_labels(p, np.array(mapping))
        np.testing.assert_array_equal(labels_from_answers(a, np.array(mapping)), p)
        for pos in range(k):
            assert a[mapping[pos]] == p[pos]

    @given(perm_and_dist(), st.data())
    def test_composition_law(self, case, data):
        # Relabelling sigma's labels into sigma' slots via sigma' o sigma^-1 equals presenting under sigma'.
        k, mapping, p = case
        other = Permutation(tuple(data.draw(st.permutations(list(range(k))))))
        sigma = Permutation(mapping)
        answers = answers_from_labels(p, np.array(sigma.mapping))
        via_sigma_prime = labels_from_answers(answers, np.array(other.mapping))
        rel = other.inverse().compose(sigma)        # slot under sigma -> slot under sigma'
        moved = np.empty(k)
        moved[list(rel.mapping)] = p
        np.testing.assert_array_equal(moved, via_sigma_prime)


class TestDecide:
    @pytest.mark.parametrize("probs,want", [([0.1, 0.7, 0.2], 1), ([0.5, 0.5], 0), ([0.25] * 4, 0)])
    def test_examples(self, probs, want):
        assert decide(Distribution(probs)) == want


class TestPermutations:
    def test_k2(self):
        assert [p.mapping for p in enumerate_permutations(2)] == [(0, 1), (1, 0)]

    def test_k3(self):
        perms = enumerate_permutations(3)
        assert len(perms) == 6 and perms[0].mapping == (0, 1, 2) and perms[-1].mapping == (2, 1, 0)

    def test_k4_count(self):
        assert len(enumerate_permutations(4)) == 24

    def test_cap(self):
        with pytest.raises(TooManyOptions):
            enumerate_permutations(7)

    def test_not_bijection(self):
        with pytest.raises(ValidationError):
            Permutation((0, 0, 1))

    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_ranks_match_lexicographic_order(self, k):
        listed = list(itertools.permutations(range(k)))
        assert [Permutation(p).rank() for p in listed] == list(range(len(listed)))
        np.testing.assert_array_equal(permutation_ranks(np.array(listed)), np.arange(len(listed)))

    def test_rotations(self):
        rots = Permutation((0, 1, 2)).rotations()
        assert [r.mapping for r in rots] == [(0, 1, 2), (1, 2, 0), (2, 0, 1)]

    def test_inverse(self):
        p = Permutation((2, 0, 3, 1))
        assert p.compose(p.inverse()) == Permutation.identity(4)
        assert p.position_of(3) == 2


class TestRecordSet:
    def test_duplicate_rejected(self):
        rs = RecordSet([rec([0, 1], [0.6, 0.4])])
        with pytest.raises(ValidationError):
            rs.add(rec([0, 1], [0.5, 0.5]))

    def test_inconsistent_gold(self):
        rs = RecordSet([rec([0, 1], [0.6, 0.4], gold=0)])
        with pytest.raises(ValidationError):
            rs.add(rec([1, 0], [0.6, 0.4], gold=1))

    def test_inconsistent_k(self):
        rs = RecordSet([rec([0, 1], [0.6, 0.4])])
        with pytest.raises(ValidationError):
            rs.add(rec([0, 1, 2], [0.2, 0.4, 0.4]))

    def test_gold_range(self):
        with pytest.raises(ValidationError):
            rec([0, 1], [0.6, 0.4], gold=2)

    def test_grouping(self):
        rs = RecordSet([rec([0, 1], [0.6, 0.4], eid="a"), rec([1, 0], [0.6, 0.4], eid="a"),
                        rec([0, 1], [0.5, 0.5], eid="b")])
        assert len(rs) == 3 and rs.example_ids == ["a", "b"]
        assert rs["a"].is_full and not rs["b"].is_full
        np.testing.assert_array_equal(rs["a"].answer_probs, [[0.6, 0.4], [0.4, 0.6]])
