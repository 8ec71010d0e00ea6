import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from dtjscc import codec
from dtjscc.errors import ParameterError, StructuralError

import gradcheck


def test_split_features_examples():
    f = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(codec.split_features(f, 2, 2).vectors, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(codec.split_features(f, 1, 4).vectors, [f])
    with pytest.raises(StructuralError):
        codec.split_features(f, 3, 1)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_split_round_trip_is_bitwise(d, D, seed):
    f = np.random.default_rng(seed).standard_normal((3, d * D))
    split = codec.split_features(f, d, D)
    assert split.d == d and split.D == D
    assert split.vectors.reshape(3, -1).tobytes() == f.tobytes()


def test_logits_examples():
    eye = codec.Codebook(np.eye(2))
    f = codec.split_features(np.array([3.0, -1.0]), 1, 2)
    np.testing.assert_array_equal(codec.compute_logits(eye, f), [[3.0, -1.0]])
    zero = codec.split_features(np.zeros(2), 1, 2)
    np.testing.assert_array_equal(codec.compute_logits(eye, zero), [[0.0, 0.0]])
    cb = codec.Codebook(np.array([[1.0, 1.0], [1.0, -1.0]]))
    got = codec.compute_logits(cb, codec.split_features(np.array([2.0, 1.0]), 1, 2))
    np.testing.assert_array_equal(got, [[3.0, 1.0]])
    np.testing.assert_array_equal(got, np.array([[2.0, 1.0]]) @ cb.M)
    with pytest.raises(StructuralError):
        codec.compute_logits(cb, codec.split_features(np.zeros(3), 1, 3))


def test_codebook_needs_two_codewords():
    with pytest.raises(StructuralError):
        codec.Codebook(np.zeros((3, 1)))


def test_encoder_distribution_examples():
    uniform = codec.encoder_distribution(np.zeros((1, 16)))
    assert uniform.entropies[0] == pytest.approx(math.log(16), abs=1e-12)
    peaked = codec.encoder_distribution(np.array([[50.0, 0, 0, 0]]))
    assert peaked.entropies[0] < 1e-18
    # probs (0.88080, 0.11920) come from logits (2, 0)
    two = codec.encoder_distribution(np.array([[2.0, 0.0]]))
    np.testing.assert_allclose(two.probs[0], [0.88080, 0.11920], atol=1e-5)
    assert two.entropies[0] == pytest.approx(0.36533, abs=1e-5)


logit_tables = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)),
                      elements=st.floats(-60, 60))


@given(logit_tables)
@settings(max_examples=200, deadline=None)
def test_distribution_rows_stochastic_and_entropy_bounded(logits):
    dist = codec.encoder_distribution(logits)
    np.testing.assert_allclose(dist.probs.sum(-1), 1.0, atol=1e-6)
    K = logits.shape[-1]
    assert np.all(dist.entropies >= 0) and np.all(dist.entropies <= math.log(K) + 1e-12)
    assert dist.total_entropy() == pytest.approx(dist.entropies.sum(), abs=0)


def test_gumbel_from_half():
    assert codec.gumbel_from_uniform(np.array(0.5)) == pytest.approx(0.36651, abs=1e-5)
    assert codec.gumbel_from_uniform(np.array(0.5)) == pytest.approx(-math.log(math.log(2)),
                                                                     rel=1e-15)


def test_uniform_is_open_interval():
    u = codec.uniform_open(np.random.default_rng(0), 10 ** 6)
    assert u.min() > 0 and u.max() < 1
    assert np.all(np.isfinite(codec.gumbel_from_uniform(u)))


def test_tau_must_be_positive():
    with pytest.raises(ParameterError):
        codec.gumbel_sample(np.zeros((1, 3)), 0.0, np.random.default_rng(0))


@given(logit_tables, st.integers(0, 2 ** 32 - 1), st.floats(0.05, 5.0))
@settings(max_examples=100, deadline=None)
def test_gumbel_argmax_matches_perturbed_logits(logits, seed, tau):
    s = codec.gumbel_sample(logits, tau, np.random.default_rng(seed))
    np.testing.assert_allclose(s.w.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(s.z, np.argmax(logits + s.noise, axis=-1))
    # argmax of w is the same unless the softmax saturates into an exact tie
    top = np.take_along_axis(s.w, s.z[..., None], -1)[..., 0]
    assert np.all(top == s.w.max(-1))


def test_gumbel_max_frequencies_chi_square():
    logits = np.array([1.0, 0.0, 0.0])
    p = np.exp(logits) / np.exp(logits).sum()
    assert p[0] == pytest.approx(0.57612, abs=1e-5)
    n = 10 ** 5
    s = codec.gumbel_sample(np.broadcast_to(logits, (n, 3)), 0.5, np.random.default_rng(7))
    counts = np.bincount(s.z, minlength=3)
    chi2 = np.sum((counts - n * p) ** 2 / (n * p))
    assert chi2 < stats.chi2.ppf(0.999, df=2)


def test_temperature_concentration():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((200, 4, 8))
    noise = codec.gumbel_from_uniform(codec.uniform_open(rng, logits.shape))
    peaks = [codec.gumbel_softmax(logits, noise, t).w.max(-1) for t in (1.0, 0.5, 0.1)]
    assert np.all(peaks[1] >= peaks[0]) and np.all(peaks[2] >= peaks[1])


def test_low_temperature_matches_noiseless_one_hot():
    rng = np.random.default_rng(11)
    s = codec.gumbel_sample(rng.standard_normal((200, 4, 8)), 1e-5, rng)
    out = codec.straight_through_combine(s.w, s.z)
    assert np.max(np.abs(out - s.w)) <= 1e-3


def test_straight_through_forward_and_backward():
    w = np.array([[0.2, 0.5, 0.3]])
    np.testing.assert_array_equal(codec.straight_through_combine(w, np.array([2])), [[0, 0, 1]])
    g = np.array([[0.1, -0.4, 2.0]])
    assert codec.straight_through_backward(g) is g
    with pytest.raises(StructuralError):
        codec.straight_through_combine(w, np.array([3]))


def test_receiver_embed_examples():
    eye = codec.Codebook(np.eye(2))
    np.testing.assert_array_equal(codec.receiver_embed(eye, np.array([0, 1])), [1, 0, 0, 1])
    cb = codec.Codebook(np.random.default_rng(0).standard_normal((3, 5)))
    np.testing.assert_array_equal(codec.receiver_embed(cb, np.full(4, 2)), np.tile(cb.M[:, 2], 4))
    with pytest.raises(StructuralError):
        codec.receiver_embed(cb, np.array([5]))


def test_training_embed_equals_lookup_for_one_hots():
    cb = codec.Codebook(np.random.default_rng(1).standard_normal((3, 5)))
    z_hat = np.random.default_rng(2).integers(0, 5, (7, 4))
    sel = codec.one_hot(z_hat, 5, dtype=np.float64)
    np.testing.assert_allclose(codec.receiver_embed(cb, z_hat, sel), codec.receiver_embed(cb, z_hat),
                               rtol=0, atol=1e-15)


@pytest.mark.parametrize("check", [gradcheck.check_logits, gradcheck.check_entropy,
                                   gradcheck.check_gumbel_softmax, gradcheck.check_receiver_embed])
def test_primitive_gradients(check):
    for seed in range(3):
        assert check(np.random.default_rng(seed)) <= 1e-4


def test_pipeline_gradient():
    assert gradcheck.check_pipeline(0) <= 1e-4
