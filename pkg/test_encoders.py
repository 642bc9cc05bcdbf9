import numpy as np
import pytest

from mmspeaker.encoders import (
    Embedding,
    MlpEncoder,
    Modality,
    TeacherEncoder,
    backprop,
    encode,
    encode_batch,
    encode_text,
    encode_text_batch,
    init_mlp,
    init_text_encoder,
    student_from_teacher,
)
from mmspeaker.errors import ContractError, DegenerateInputError, DomainError, ShapeError, StateError
from mmspeaker.numerics import check_gradient, l2_normalize

GRAD_TOL = 1e-4


def _single_layer(w, b, act="linear"):
    return MlpEncoder(weights=[np.array(w, dtype=float)], biases=[np.array(b, dtype=float)],
                      activations=(act,), modality=Modality.SPEECH)


def test_modality_indices_round_trip():
    assert [m.index for m in Modality] == [1, 2, 3]
    assert Modality.from_index(2) is Modality.FACE
    with pytest.raises(DomainError):
        Modality.from_index(9)


def test_embedding_enforces_unit_norm():
    Embedding(np.array([0.6, 0.8]), Modality.FACE)
    with pytest.raises(ContractError):
        Embedding(np.array([1.0, 1.0]), Modality.FACE)


def test_identity_layer_returns_unit_input():
    enc = _single_layer(np.eye(3), np.zeros(3))
    x = l2_normalize([1.0, 2.0, 2.0])
    emb, _ = encode(enc, x)
    np.testing.assert_allclose(emb.values, x, atol=1e-12)
    assert emb.modality is Modality.SPEECH


def test_zero_weights_decouple_input():
    b = np.array([0.3, -1.2])
    enc = _single_layer(np.zeros((2, 4)), b, act="tanh")
    expected = l2_normalize(np.tanh(b))
    for x in (np.ones(4), np.arange(4.0)):
        np.testing.assert_allclose(encode(enc, x)[0].values, expected, atol=1e-12)


def test_two_layer_forward_matches_hand_evaluation(rng):
    enc = init_mlp(5, 3, hidden=[4], rng=rng, modality=Modality.FACE)
    x = rng.normal(size=5)
    h = np.tanh(enc.weights[0] @ x + enc.biases[0])
    y = enc.weights[1] @ h + enc.biases[1]
    np.testing.assert_allclose(encode(enc, x)[0].values, y / np.linalg.norm(y), atol=1e-12)


def test_encode_shape_mismatch():
    enc = init_mlp(5, 3, hidden=[4], modality=Modality.FACE)
    with pytest.raises(ShapeError):
        encode(enc, np.ones(6))
    with pytest.raises(ShapeError):
        encode_batch(enc, np.ones((2, 4)))


def test_init_is_uniform_within_fan_in_bound(rng):
    enc = init_mlp(16, 4, hidden=[9], rng=rng)
    assert np.all(np.abs(enc.weights[0]) <= 1 / 4)
    assert np.all(np.abs(enc.weights[1]) <= 1 / 3)


def test_teacher_parameters_are_read_only(rng):
    teacher = TeacherEncoder.freeze(init_mlp(5, 3, hidden=[4], rng=rng), Modality.FACE)
    with pytest.raises(ValueError):
        teacher.network.weights[0][0, 0] = 1.0
    before = [w.tobytes() for w in teacher.network.weights]
    student = student_from_teacher(teacher)
    student.weights[0] += 1.0
    assert [w.tobytes() for w in teacher.network.weights] == before


def test_student_from_teacher_starts_identical(rng):
    teacher = TeacherEncoder.freeze(init_mlp(5, 3, hidden=[4], rng=rng), Modality.FACE)
    student = student_from_teacher(teacher)
    x = rng.normal(size=(6, 5))
    np.testing.assert_allclose(encode_batch(student, x)[0], encode_batch(teacher, x)[0], atol=1e-12)
    assert student.modality is Modality.FACE


def test_text_single_token_pools_its_value(rng):
    enc = init_text_encoder(vocab_size=10, width=4, output_dim=3, hidden=[5], rng=rng)
    emb, cache = encode_text(enc, [7])
    np.testing.assert_array_equal(cache.weights, [[1.0]])
    np.testing.assert_allclose(cache.pooled[0], enc.value @ enc.table[7], atol=1e-12)
    assert abs(np.linalg.norm(emb.values) - 1.0) < 1e-6


def test_text_identical_rows_share_weight(rng):
    enc = init_text_encoder(vocab_size=10, width=4, output_dim=3, hidden=[5], rng=rng)
    enc.table[2] = enc.table[5]
    _, cache = encode_text(enc, [2, 5])
    np.testing.assert_allclose(cache.weights, [[0.5, 0.5]], atol=1e-12)


def test_text_pooling_matches_hand_evaluation(rng):
    enc = init_text_encoder(vocab_size=10, width=4, output_dim=3, hidden=[5], rng=rng)
    tokens = [1, 4, 9]
    e = enc.table[tokens]
    scores = (e @ enc.key.T) @ enc.query / np.sqrt(4)
    w = np.exp(scores - scores.max())
    w /= w.sum()
    pooled = sum(w[t] * (enc.value @ e[t]) for t in range(3))
    _, cache = encode_text(enc, tokens)
    np.testing.assert_allclose(cache.pooled[0], pooled, atol=1e-12)


def test_text_pooling_weights_sum_to_one(rng):
    enc = init_text_encoder(vocab_size=12, width=4, output_dim=3, hidden=[5], rng=rng)
    seqs = [list(rng.integers(0, 12, size=n)) for n in (1, 3, 7, 16)]
    _, cache = encode_text_batch(enc, seqs)
    np.testing.assert_allclose(cache.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(cache.weights >= 0)
    assert np.all(cache.weights[~cache.mask] == 0)


def test_text_batch_matches_single_encodes(rng):
    enc = init_text_encoder(vocab_size=12, width=4, output_dim=3, hidden=[5], rng=rng)
    seqs = [[1, 2], [3, 4, 5, 6], [7]]
    batch, _ = encode_text_batch(enc, seqs)
    for row, seq in zip(batch, seqs):
        np.testing.assert_allclose(row, encode_text(enc, seq)[0].values, atol=1e-12)


def test_text_input_errors(rng):
    enc = init_text_encoder(vocab_size=10, width=4, output_dim=3, hidden=[5], rng=rng)
    with pytest.raises(DegenerateInputError):
        encode_text(enc, [])
    with pytest.raises(DomainError):
        encode_text(enc, [3, 10])
    with pytest.raises(DomainError):
        encode_text(enc, [-1])


def test_zero_upstream_gives_zero_gradients(rng):
    enc = init_mlp(5, 3, hidden=[4], rng=rng, modality=Modality.SPEECH)
    _, cache = encode_batch(enc, rng.normal(size=(2, 5)))
    grads, g_in = backprop(enc, cache, np.zeros((2, 3)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(g_in == 0)

    text = init_text_encoder(vocab_size=10, width=4, output_dim=3, hidden=[5], rng=rng)
    _, tcache = encode_text_batch(text, [[1, 2, 3]])
    tgrads, t_in = backprop(text, tcache, np.zeros((1, 3)))
    assert all(np.all(g == 0) for g in tgrads.values())
    assert t_in is None


def test_single_linear_layer_hand_chain_rule(rng):
    W = rng.normal(size=(3, 4))
    enc = _single_layer(W, np.zeros(3))
    x = rng.normal(size=4)
    g = rng.normal(size=3)
    _, cache = encode(enc, x)
    grads, g_in = backprop(enc, cache, g)

    y = W @ x
    e = y / np.linalg.norm(y)
    g_y = (g - e * (e @ g)) / np.linalg.norm(y)
    np.testing.assert_allclose(grads["w0"], np.outer(g_y, x), atol=1e-12)
    np.testing.assert_allclose(g_in, W.T @ g_y, atol=1e-12)


def test_backprop_rejects_foreign_cache(rng):
    a = init_mlp(5, 3, hidden=[4], rng=rng)
    b = init_mlp(5, 3, hidden=[6], rng=rng)
    _, cache = encode_batch(a, rng.normal(size=(2, 5)))
    with pytest.raises(StateError):
        backprop(b, cache, np.ones((2, 3)))
    text = init_text_encoder(vocab_size=10, width=4, output_dim=3, hidden=[5], rng=rng)
    with pytest.raises(StateError):
        backprop(text, cache, np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(50))
def test_mlp_gradients_pass_finite_difference_check(seed):
    gen = np.random.default_rng(seed)
    enc = init_mlp(6, 8, hidden=[5, 4], rng=gen, modality=Modality.FACE)
    x = gen.normal(size=(6, 6))
    g = gen.normal(size=(6, 8))
    _, cache = encode_batch(enc, x)
    grads, g_in = backprop(enc, cache, g)

    params = enc.params()
    for name, value in params.items():
        def f(p, name=name):
            return float(np.sum(g * encode_batch(enc.with_params({**params, name: p}), x)[0]))
        assert check_gradient(f, grads[name], value) < GRAD_TOL, name
    assert check_gradient(lambda p: float(np.sum(g * encode_batch(enc, p)[0])), g_in, x) < GRAD_TOL


@pytest.mark.parametrize("seed", range(50))
def test_text_gradients_pass_finite_difference_check(seed):
    gen = np.random.default_rng(seed)
    enc = init_text_encoder(vocab_size=9, width=4, output_dim=8, hidden=[5], rng=gen)
    seqs = [list(gen.integers(0, 9, size=n)) for n in (1, 2, 4, 6, 3, 5)]
    g = gen.normal(size=(6, 8))
    _, cache = encode_text_batch(enc, seqs)
    grads, _ = backprop(enc, cache, g)

    params = enc.params()
    for name, value in params.items():
        def f(p, name=name):
            return float(np.sum(g * encode_text_batch(enc.with_params({**params, name: p}), seqs)[0]))
        assert check_gradient(f, grads[name], value) < GRAD_TOL, name
