import math

import numpy as np
import pytest

import pacelearn.nn_core as nn
from pacelearn.nn_core import ParamStore, Tensor
from pacelearn.seq_classifiers import (
    AttentionParams, BiLstmClassifier, LstmCellParams, ModelConfig, TransformerClassifier,
    attention_forward, bilstm_forward, build_model, classify, encode_windows, label_from_probs,
    load_model, lstm_cell_step, lstm_layer, lstm_layer_unfused, lstm_scan, predict_correct_proba,
    save_model, sinusoidal_encoding, transformer_forward,
)
from pacelearn.trace_model import ALPHABET, Symbol


def make_cell(hidden, inputs, seed=0, zero=False):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    cell = LstmCellParams.register(store, "c", inputs, hidden, rng)
    if zero:
        for t in store.params.values():
            t.data[...] = 0.0
    return store, cell


def zero_model(model):
    for t in model.store.params.values():
        t.data[...] = 0.0
    return model


def random_windows(n, length, seed):
    rng = np.random.default_rng(seed)
    return [[ALPHABET[i] for i in rng.integers(0, 5, size=length)] for _ in range(n)]


# -- LSTM cell ---------------------------------------------------------------------

def test_zero_cell_from_zero_state():
    _, cell = make_cell(3, 5, zero=True)
    h, c = lstm_cell_step(cell, np.zeros((1, 3)), np.zeros((1, 3)), np.ones((1, 5)))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_zero_cell_halves_memory():
    _, cell = make_cell(3, 5, zero=True)
    c_prev = np.array([[1.0, -2.0, 0.5]])
    h, c = lstm_cell_step(cell, np.zeros((1, 3)), c_prev, np.ones((1, 5)))
    assert np.allclose(c.data, 0.5 * c_prev)
    assert np.allclose(h.data, 0.5 * np.tanh(0.5 * c_prev))


def scalar_lstm_step(P, h, c, x):
    """Independent loop-by-loop reference of the seven cell equations."""
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def pre(g, r):
        return (sum(P[f"U_{g}"][r][k] * h[k] for k in range(len(h)))
                + sum(P[f"W_{g}"][r][k] * x[k] for k in range(len(x))))

    n = len(h)
    f = [sig(pre("f", r)) for r in range(n)]
    k_ = [c[r] * f[r] for r in range(n)]
    g = [math.tanh(pre("g", r)) for r in range(n)]
    i = [sig(pre("i", r)) for r in range(n)]
    j = [i[r] * g[r] for r in range(n)]
    c_new = [j[r] + k_[r] for r in range(n)]
    o = [sig(pre("o", r)) for r in range(n)]
    return [o[r] * math.tanh(c_new[r]) for r in range(n)], c_new


@pytest.mark.parametrize("seed", range(3))
def test_cell_matches_scalar_oracle(seed):
    store, cell = make_cell(3, 4, seed)
    P = {k.split(".")[1]: v.data.tolist() for k, v in store.items()}
    rng = np.random.default_rng(100 + seed)
    h = rng.normal(size=3)
    c = rng.normal(size=3)
    x = rng.normal(size=4)
    h1, c1 = lstm_cell_step(cell, h[None], c[None], x[None])
    h2, c2 = scalar_lstm_step(P, list(h), list(c), list(x))
    assert np.allclose(h1.data[0], h2, rtol=0, atol=1e-12)
    assert np.allclose(c1.data[0], c2, rtol=0, atol=1e-12)


def test_cell_shape_error_names_matrix():
    store, cell = make_cell(3, 4)
    cell.W_g = Tensor(np.zeros((3, 5)))
    with pytest.raises(ValueError, match="W_g"):
        cell.check_shapes()


def test_fused_scan_equals_stepwise_layer():
    store, cell = make_cell(4, 5, seed=1)
    X = np.random.default_rng(2).normal(size=(3, 6, 5))
    a = lstm_layer(cell, X).data
    b = lstm_layer_unfused(cell, X).data
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_fused_scan_gradients():
    store, cell = make_cell(3, 2, seed=3)
    store2 = ParamStore()
    cell2 = LstmCellParams.register(store2, "d", 2, 3, np.random.default_rng(4))
    for k, t in store2.items():
        store.add(k, t.data)
    cell2 = LstmCellParams.from_store(store, "d")
    X = np.random.default_rng(5).normal(size=(2, 4, 2))
    Xr = X[:, ::-1]
    weights = np.random.default_rng(6).normal(size=(2, 2, 4, 3))

    def loss():
        return nn.total(nn.mul(lstm_scan([cell, cell2], [X, Xr]), weights))
    assert nn.grad_check(loss, store).max_rel_error <= 1e-6


# -- BiLSTM ---------------------------------------------------------------------------

def test_bilstm_zero_weights_gives_half():
    model = zero_model(BiLstmClassifier(ModelConfig("lstm", window=4, hidden=3)))
    logits, probs = bilstm_forward(model, [Symbol.AS, Symbol.NONE, Symbol.NONE, Symbol.VP, Symbol.NONE])
    assert np.all(logits == 0)
    assert np.allclose(probs, [0.5, 0.5])


def test_bilstm_layer_shapes():
    model = BiLstmClassifier(ModelConfig("lstm", window=6, hidden=5))
    X = encode_windows(random_windows(2, 7, 0))
    outs = model.hidden_sequences(X)
    assert [o.shape for o in outs] == [(2, 7, 10), (2, 7, 10)]
    assert model.store["l1.fwd.W_f"].shape == (5, 10)


def test_bilstm_pooling_uses_each_direction_final_state():
    model = BiLstmClassifier(ModelConfig("lstm", window=4, hidden=3, seed=2))
    X = encode_windows(random_windows(1, 5, 1))
    top = model.hidden_sequences(X)[-1].data[0]
    pooled = np.concatenate([top[-1, :3], top[0, 3:]])
    expect = pooled @ model.store["head.V"].data + model.store["head.b"].data
    assert np.allclose(model.logits(X).data[0], expect)


def test_bilstm_is_order_sensitive():
    found = False
    for seed in range(10):
        model = BiLstmClassifier(ModelConfig("lstm", window=5, hidden=4, seed=seed))
        w = random_windows(1, 6, seed)[0]
        if not np.allclose(bilstm_forward(model, w)[1], bilstm_forward(model, w[::-1])[1]):
            found = True
            break
    assert found


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_batching_is_exact(arch):
    model = build_model(ModelConfig(arch, window=20, hidden=16, d_k=16, seed=1))
    wins = random_windows(12, 21, 3)
    X = encode_windows(wins)
    batched = model.logits(X).data
    single = np.concatenate([model.logits(encode_windows([w])).data for w in wins])
    chunks = np.concatenate([model.logits(X[i:i + 5]).data for i in range(0, 12, 5)])
    # BLAS picks kernels by row count, so batching moves results only at rounding level
    assert np.allclose(batched, single, rtol=0, atol=1e-15)
    assert np.allclose(batched, chunks, rtol=0, atol=1e-15)
    assert np.array_equal(batched, model.logits(X).data)


def test_wrong_window_length_raises():
    for arch in ("lstm", "transformer"):
        model = build_model(ModelConfig(arch, window=4, hidden=3, d_k=4))
        with pytest.raises(ValueError, match="expected windows of 5"):
            model.logits(encode_windows(random_windows(1, 4, 0)))


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
@pytest.mark.parametrize("embed", [0, 3])
def test_full_model_gradients(arch, embed):
    model = build_model(ModelConfig(arch, window=4, hidden=4, d_k=4, d_pos=4, embed_dim=embed, seed=7))
    X = encode_windows(random_windows(3, 5, 8))
    y = [0, 1, 1]
    report = nn.grad_check(lambda: nn.softmax_cross_entropy(model.logits(X), y), model.store)
    assert report.max_rel_error <= 1e-4, report.per_param


# -- attention ---------------------------------------------------------------------------

def attention_params(W_Q, W_K, W_V):
    d = np.shape(W_V)[1]
    return AttentionParams(Tensor(np.array(W_Q, float)), Tensor(np.array(W_K, float)),
                           Tensor(np.array(W_V, float)), Tensor(np.eye(d)), Tensor(np.zeros(d)))


def test_attention_hand_computed():
    # Q = K = X, V = X W_V; values worked out from the scaled-score softmax by hand
    p = attention_params(np.eye(2), np.eye(2), [[1, 2], [3, 4]])
    H, A = attention_forward(p, np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    expect_A = [[0.4011120926797859, 0.1977758146404282, 0.4011120926797859],
                [0.1977758146404282, 0.4011120926797859, 0.4011120926797859],
                [0.24825507825772306, 0.24825507825772306, 0.5034898434845538]]
    expect_H = [[2.598887907320214, 4.0],
                [3.00556046339893, 4.406672556078716],
                [3.0069796869691077, 4.510469530453661]]
    assert np.allclose(A.data, expect_A, rtol=0, atol=1e-12)
    assert np.allclose(H.data, expect_H, rtol=0, atol=1e-12)


def test_attention_single_position_is_value_projection():
    rng = np.random.default_rng(0)
    p = attention_params(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    x = rng.normal(size=(1, 3))
    H, A = attention_forward(p, x)
    assert A.data.tolist() == [[1.0]]
    assert np.array_equal(H.data, x @ p.W_V.data)


def test_attention_identical_rows_split_evenly():
    rng = np.random.default_rng(1)
    p = attention_params(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    x = np.tile(rng.normal(size=(1, 3)), (2, 1))
    _, A = attention_forward(p, x)
    assert np.allclose(A.data, 0.5)


def test_attention_rows_sum_to_one():
    model = TransformerClassifier(ModelConfig("transformer", window=9, d_k=6, seed=3))
    _, attn = model.hidden_sequences(encode_windows(random_windows(5, 10, 4)))
    for a in attn:
        assert np.allclose(a.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_transformer_zero_head_gives_half():
    model = TransformerClassifier(ModelConfig("transformer", window=4, d_k=4, seed=1))
    model.store["head.V"].data[...] = 0.0
    _, probs = transformer_forward(model, random_windows(1, 5, 0)[0])
    assert np.allclose(probs, [0.5, 0.5])


def test_transformer_permutation_equivariance_without_positions():
    model = TransformerClassifier(ModelConfig("transformer", window=5, d_k=4, positional=False, seed=2))
    X = encode_windows(random_windows(1, 6, 5))
    perm = np.array([3, 0, 5, 1, 4, 2])
    outs, _ = model.hidden_sequences(X)
    outs_p, _ = model.hidden_sequences(X[:, perm])
    for a, b in zip(outs, outs_p):
        assert np.allclose(a.data[:, perm], b.data, rtol=0, atol=1e-12)


def test_positional_encoding_breaks_permutation_symmetry():
    pe = sinusoidal_encoding(6, 4)
    assert pe.shape == (6, 4)
    assert np.allclose(pe[0], [0, 1, 0, 1])
    assert len({tuple(np.round(r, 9)) for r in pe}) == 6


# -- labels and checkpoints -----------------------------------------------------------------

def test_label_rule():
    assert label_from_probs([0.9, 0.1]) == ("correct", 0.9)
    assert label_from_probs([0.5, 0.5])[0] == "incorrect"
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(size=2)
        c = rng.normal() * 10
        assert label_from_probs(nn.softmax_rows(z[None])[0])[0] == \
            label_from_probs(nn.softmax_rows((z + c)[None])[0])[0]


def test_classify_and_probabilities_agree():
    model = BiLstmClassifier(ModelConfig("lstm", window=3, hidden=3, seed=4))
    wins = random_windows(6, 4, 9)
    p = predict_correct_proba(model, encode_windows(wins), batch_size=4)
    for w, pc in zip(wins, p):
        label, pc2 = classify(model, w)
        assert np.isclose(pc, pc2)
        assert label == ("correct" if pc > 0.5 else "incorrect")


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_checkpoint_round_trip(tmp_path, arch):
    model = build_model(ModelConfig(arch, window=3, hidden=3, d_k=4, seed=5))
    path = tmp_path / "m.json"
    save_model(model, path)
    again = load_model(path)
    X = encode_windows(random_windows(3, 4, 1))
    assert np.array_equal(model.logits(X).data, again.logits(X).data)
    header, _ = nn.load_checkpoint(path)
    assert header["arch"] == arch and header["window"] == 3 and "pooling" in header
    assert header["alphabet"] == ["AP", "VP", "AS", "VS", "-"]
