import numpy as np
import pytest

from reference import one_step_law
from specdeck.prob import (ProbDist, SeededRng, VocabularyMismatch, accept_prob, inverse_cdf,
                           residual, role_streams, sample, speculative_sample)


def test_probdist_renormalizes_small_drift():
    d = ProbDist([0.5, 0.5 + 5e-7])
    assert abs(d.probs.sum() - 1.0) <= 1e-9


@pytest.mark.parametrize("bad", [[1.0], [0.6, 0.6], [-0.1, 1.1], [np.nan, 1.0]])
def test_probdist_rejects_invalid(bad):
    with pytest.raises(ValueError):
        ProbDist(bad)


def test_probdist_is_read_only():
    d = ProbDist([0.25, 0.75])
    with pytest.raises(ValueError):
        d.probs[0] = 1.0


def test_argmax_breaks_ties_toward_lowest_token():
    assert ProbDist([0.4, 0.4, 0.2]).argmax() == 0


def test_from_logits_matches_softmax():
    d = ProbDist.from_logits([0.0, np.log(3.0)])
    np.testing.assert_allclose(d.probs, [0.25, 0.75])


def test_seeded_rng_streams_are_keyed():
    a = SeededRng(4).at(1, 2)
    b = SeededRng(4, (1, 2))
    assert a.uniform() == b.uniform()
    assert SeededRng(4).at(1, 3).uniform() != SeededRng(4).at(1, 2).uniform()
    draft, target = role_streams(4)
    assert draft.key != target.key


def test_inverse_cdf_skips_zero_mass_tail():
    d = ProbDist([0.5, 0.5, 0.0])
    assert inverse_cdf(d, 0.9999999999999999) == 1
    assert inverse_cdf(d, 0.0) == 0


def test_sample_is_deterministic():
    d = ProbDist([0.1, 0.2, 0.7])
    assert sample(d, SeededRng(1, (5,))) == sample(d, SeededRng(1, (5,)))


def test_accept_prob_cases():
    p = ProbDist([0.2, 0.8])
    q = ProbDist([0.4, 0.6])
    assert accept_prob(p, q, 0) == pytest.approx(0.5)
    assert accept_prob(p, q, 1) == 1.0
    assert accept_prob(p, ProbDist([1.0, 0.0]), 1) == 1.0
    with pytest.raises(IndexError):
        accept_prob(p, q, 2)


def test_residual_normalizes_positive_part():
    p = ProbDist([0.5, 0.3, 0.2])
    q = ProbDist([0.2, 0.5, 0.3])
    np.testing.assert_allclose(residual(p, q).probs, [1.0, 0.0, 0.0])
    assert residual(p, p) is p


def test_vocab_mismatch_raises():
    with pytest.raises(VocabularyMismatch):
        residual(ProbDist([0.5, 0.5]), ProbDist([0.2, 0.3, 0.5]))


def test_identical_distributions_always_accept():
    p = ProbDist([0.1, 0.6, 0.3])
    rng = np.random.default_rng(0)
    _, accepted = speculative_sample(p, p, rng.random(1000), rng.random(1000), rng.random(1000))
    assert accepted.all()


def test_scalar_and_vector_forms_agree():
    p, q = ProbDist([0.3, 0.7]), ProbDist([0.6, 0.4])
    us = [(0.1, 0.9, 0.3), (0.5, 0.1, 0.2), (0.9, 0.99, 0.7)]
    vec, _ = speculative_sample(p, q, *(np.array(c) for c in zip(*us)))
    assert [speculative_sample(p, q, *u)[0] for u in us] == vec.tolist()


def test_law_with_disjoint_support():
    p, q = ProbDist([0.0, 0.0, 1.0]), ProbDist([0.5, 0.5, 0.0])
    np.testing.assert_allclose(one_step_law(p.probs, q.probs), p.probs, atol=1e-15)
    rng = np.random.default_rng(1)
    tokens, accepted = speculative_sample(p, q, rng.random(500), rng.random(500), rng.random(500))
    assert (tokens == 2).all() and not accepted.any()
