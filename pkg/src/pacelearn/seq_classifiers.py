"""Reward-machine classifiers: stacked bidirectional LSTM and a small attention encoder.

Both read a window of one-hot symbols (the context followed by the action
being judged) and produce two logits ordered ``[correct, incorrect]``.
Vectors are rows, so a gate pre-activation ``U h + W x`` is computed as
``h @ U.T + x @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .nn_core import ParamStore, Tensor
from .trace_model import N_SYMBOLS, Symbol, encode_sequence

CORRECT, INCORRECT = 0, 1
GATES = ("f", "g", "i", "o")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "lstm"
    window: int = 20
    hidden: int = 64
    d_k: int = 128
    d_ff: int | None = None
    d_pos: int = 16
    embed_dim: int = 0
    positional: bool = True
    layers: int = 2
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.arch not in ("lstm", "transformer"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.window < 1 or self.layers < 1:
            raise ValueError("window and layers must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.window + 1


def encode_windows(windows: Sequence[Sequence[Symbol]], dtype=np.float64) -> np.ndarray:
    """Stack symbol windows into a ``batch x length x 5`` one-hot array."""
    return np.stack([encode_sequence(w, dtype) for w in windows]) if len(windows) else \
        np.zeros((0, 0, N_SYMBOLS), dtype=dtype)


# -- LSTM ------------------------------------------------------------------------

@dataclass
class LstmCellParams:
    U_f: Tensor
    W_f: Tensor
    U_g: Tensor
    W_g: Tensor
    U_i: Tensor
    W_i: Tensor
    U_o: Tensor
    W_o: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.U_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "LstmCellParams":
        return cls(**{f"{m}_{g}": store[f"{prefix}.{m}_{g}"] for g in GATES for m in ("U", "W")})

    @staticmethod
    def register(store: ParamStore, prefix: str, input_dim: int, hidden: int,
                 rng: np.random.Generator) -> "LstmCellParams":
        for g in GATES:
            store.init_uniform(f"{prefix}.U_{g}", (hidden, hidden), hidden, rng)
            store.init_uniform(f"{prefix}.W_{g}", (hidden, input_dim), input_dim, rng)
        return LstmCellParams.from_store(store, prefix)

    def check_shapes(self) -> None:
        h, n = self.hidden_dim, self.input_dim
        for g in GATES:
            u, w = getattr(self, f"U_{g}"), getattr(self, f"W_{g}")
            if u.shape != (h, h):
                raise ValueError(f"U_{g} has shape {u.shape}, expected {(h, h)}")
            if w.shape != (h, n):
                raise ValueError(f"W_{g} has shape {w.shape}, expected {(h, n)}")


def lstm_cell_step(p: LstmCellParams, h_prev, c_prev, x_t) -> tuple[Tensor, Tensor]:
    """One LSTM step built from primitive ops (rows are batch entries)."""
    def pre(U, W):
        return nn.add(nn.matmul(h_prev, nn.transpose(U)), nn.matmul(x_t, nn.transpose(W)))

    f = nn.sigmoid(pre(p.U_f, p.W_f))
    k = nn.mul(c_prev, f)
    g = nn.tanh_act(pre(p.U_g, p.W_g))
    i = nn.sigmoid(pre(p.U_i, p.W_i))
    j = nn.mul(i, g)
    c = nn.add(j, k)
    o = nn.sigmoid(pre(p.U_o, p.W_o))
    h = nn.mul(o, nn.tanh_act(c))
    return h, c


def lstm_layer_unfused(p: LstmCellParams, X: Tensor) -> Tensor:
    """Run a cell over ``X`` (batch x time x input) step by step; returns batch x time x hidden."""
    X = nn.as_tensor(X)
    B, T, _ = X.shape
    H = p.hidden_dim
    h = Tensor(np.zeros((B, H), dtype=X.data.dtype))
    c = Tensor(np.zeros((B, H), dtype=X.data.dtype))
    outs = []
    for t in range(T):
        h, c = lstm_cell_step(p, h, c, nn.take(X, (slice(None), t)))
        outs.append(h)
    return nn.stack(outs, axis=1)


FUSED_ORDER = ("o", "f", "i", "g")  # sigmoid gates first; f, i, g adjacent for the cell-state gradient


def _fast_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_scan(cells: Sequence[LstmCellParams], Xs: Sequence[Tensor]) -> Tensor:
    """Fused LSTM runs over whole sequences with a hand-written BPTT backward.

    ``cells[d]`` runs over ``Xs[d]`` (batch x time x input); all runs share
    shapes and are advanced together so each time step costs one batched
    matrix product. Returns the hidden states stacked as ``runs x batch x
    time x hidden``; each run equals :func:`lstm_layer_unfused` on its input.
    """
    D = len(cells)
    for p in cells:
        p.check_shapes()
    Xs = [nn.as_tensor(x) for x in Xs]
    xd = np.stack([x.data for x in Xs])  # D x B x T x I
    _, B, T, _ = xd.shape
    H = cells[0].hidden_dim
    W = np.stack([np.concatenate([getattr(p, f"W_{g}").data for g in FUSED_ORDER]) for p in cells])  # D x 4H x I
    U = np.stack([np.concatenate([getattr(p, f"U_{g}").data for g in FUSED_ORDER]) for p in cells])  # D x 4H x H
    UT = np.ascontiguousarray(np.swapaxes(U, 1, 2))
    XW = np.ascontiguousarray(np.swapaxes(xd @ np.swapaxes(W, 1, 2)[:, None], 1, 2))  # D x T x B x 4H
    dt = xd.dtype
    hs = np.zeros((T + 1, D, B, H), dtype=dt)
    cs = np.zeros((T + 1, D, B, H), dtype=dt)
    acts = np.empty((T, D, B, 4, H), dtype=dt)  # gates in FUSED_ORDER
    S = 3 * H
    for t in range(T):
        z = XW[:, t] + hs[t] @ UT
        a = acts[t].reshape(D, B, 4 * H)
        a[..., :S] = _fast_sigmoid(z[..., :S])
        a[..., S:] = np.tanh(z[..., S:])
        cs[t + 1] = a[..., H:2 * H] * cs[t] + a[..., 2 * H:S] * a[..., S:]
        hs[t + 1] = a[..., :H] * np.tanh(cs[t + 1])
    out = np.ascontiguousarray(np.transpose(hs[1:], (1, 2, 0, 3)))  # D x B x T x H
    params = [getattr(p, f"{m}_{g}") for p in cells for g in GATES for m in ("U", "W")]

    def backward(G):
        G = np.swapaxes(G, 1, 2)  # D x T x B x H
        o, f, i, g = (acts[..., k, :] for k in range(4))
        tc = np.tanh(cs[1:])
        # local derivatives for all steps at once
        dh_to_o = tc * o * (1.0 - o)
        dh_to_c = o * (1.0 - tc * tc)
        dc_to_fig = np.stack([cs[:-1] * f * (1.0 - f), g * i * (1.0 - i), i * (1.0 - g * g)], axis=-2)
        dz_all = np.empty((T, D, B, 4, H), dtype=dt)
        dh_next = np.zeros((D, B, H), dtype=dt)
        dc_next = np.zeros((D, B, H), dtype=dt)
        for t in range(T - 1, -1, -1):
            dh = G[:, t] + dh_next
            dc = dh * dh_to_c[t] + dc_next
            dz = dz_all[t]
            dz[..., 0, :] = dh * dh_to_o[t]
            dz[..., 1:, :] = dc[..., None, :] * dc_to_fig[t]
            dc_next = dc * f[t]
            dh_next = dz.reshape(D, B, 4 * H) @ U
        dz_dir = np.swapaxes(dz_all, 0, 1).reshape(D, T * B, 4 * H)  # rows ordered (t, b)
        x_dir = np.swapaxes(xd, 1, 2).reshape(D, T * B, -1)
        h_dir = np.swapaxes(hs[:-1], 0, 1).reshape(D, T * B, H)
        dzT = np.swapaxes(dz_dir, 1, 2)
        dW = dzT @ x_dir
        dU = dzT @ h_dir
        dX = dz_dir @ W
        for d, p in enumerate(cells):
            for k, gname in enumerate(FUSED_ORDER):
                rows = slice(k * H, (k + 1) * H)
                getattr(p, f"U_{gname}").accumulate(dU[d, rows])
                getattr(p, f"W_{gname}").accumulate(dW[d, rows])
            if Xs[d].requires_grad:
                Xs[d].accumulate(np.swapaxes(dX[d].reshape(T, B, -1), 0, 1))

    return nn._make(out, (*params, *Xs), backward)


def lstm_layer(p: LstmCellParams, X: Tensor) -> Tensor:
    """Fused single-direction LSTM layer; see :func:`lstm_scan`."""
    return nn.take(lstm_scan([p], [X]), 0)


class BiLstmClassifier:
    """Stacked bidirectional LSTM; pooled state is [forward h_T : backward h_1] of the top layer."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore(config.dtype)
        rng = np.random.default_rng(config.seed)
        d_in = N_SYMBOLS
        if config.embed_dim:
            self.store.init_uniform("embed", (N_SYMBOLS, config.embed_dim), N_SYMBOLS, rng)
            d_in = config.embed_dim
        self.cells = []
        for layer in range(config.layers):
            fwd = LstmCellParams.register(self.store, f"l{layer}.fwd", d_in, config.hidden, rng)
            bwd = LstmCellParams.register(self.store, f"l{layer}.bwd", d_in, config.hidden, rng)
            self.cells.append((fwd, bwd))
            d_in = 2 * config.hidden
        self.store.init_uniform("head.V", (2 * config.hidden, 2), 2 * config.hidden, rng)
        self.store.add("head.b", np.zeros(2))

    def rebind(self) -> None:
        self.cells = [(LstmCellParams.from_store(self.store, f"l{k}.fwd"),
                       LstmCellParams.from_store(self.store, f"l{k}.bwd"))
                      for k in range(self.config.layers)]

    def hidden_sequences(self, X, fused: bool = True) -> list[Tensor]:
        """Per-layer outputs, each batch x time x (2 * hidden)."""
        x = nn.as_tensor(X)
        if self.config.embed_dim:
            x = nn.matmul(x, self.store["embed"])
        outs = []
        for fwd, bwd in self.cells:
            xr = nn.reverse(x, axis=1)
            if fused:
                both = lstm_scan([fwd, bwd], [x, xr])
                hf, hb_rev = nn.take(both, 0), nn.take(both, 1)
            else:
                hf, hb_rev = lstm_layer_unfused(fwd, x), lstm_layer_unfused(bwd, xr)
            hb = nn.reverse(hb_rev, axis=1)
            x = nn.concat([hf, hb], axis=-1)
            outs.append(x)
        return outs

    def logits(self, X, fused: bool = True) -> Tensor:
        X = np.asarray(X, dtype=self.store.dtype) if not isinstance(X, Tensor) else X
        if X.shape[1] != self.config.seq_len:
            raise ValueError(f"expected windows of {self.config.seq_len} symbols "
                             f"(context {self.config.window} + action), got {X.shape[1]}")
        top = self.hidden_sequences(X, fused)[-1]
        H = self.config.hidden
        last_fwd = nn.take(top, (slice(None), -1, slice(0, H)))
        last_bwd = nn.take(top, (slice(None), 0, slice(H, 2 * H)))
        pooled = nn.concat([last_fwd, last_bwd], axis=-1)
        return nn.add(nn.matmul(pooled, self.store["head.V"]), self.store["head.b"])


# -- attention ---------------------------------------------------------------------

@dataclass
class AttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_F: Tensor
    b_F: Tensor

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "AttentionParams":
        return cls(*(store[f"{prefix}.{n}"] for n in ("W_Q", "W_K", "W_V", "W_F", "b_F")))


def attention_forward(p: AttentionParams, X) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product self-attention.

    Returns ``(H, A)`` where ``A = softmax(Q K^T / sqrt(d_k))`` and ``H = A V``.
    Works on ``time x d`` or ``batch x time x d`` inputs.
    """
    X = nn.as_tensor(X)
    Q = nn.matmul(X, p.W_Q)
    K = nn.matmul(X, p.W_K)
    V = nn.matmul(X, p.W_V)
    S = nn.scale(nn.matmul(Q, nn.transpose(K)), 1.0 / np.sqrt(p.d_k))
    A = nn.softmax(S)
    return nn.matmul(A, V), A


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerClassifier:
    """Two single-head attention layers, each followed by a positionwise affine + tanh.

    The sinusoidal position code is concatenated to the symbol features; the
    representation at the last position (the judged action) feeds the head.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore(config.dtype)
        rng = np.random.default_rng(config.seed)
        d_in = config.embed_dim or N_SYMBOLS
        if config.embed_dim:
            self.store.init_uniform("embed", (N_SYMBOLS, config.embed_dim), N_SYMBOLS, rng)
        if config.positional:
            d_in += config.d_pos
        d_ff = config.d_ff or config.d_k
        self.blocks = []
        for layer in range(config.layers):
            pre = f"l{layer}"
            for name in ("W_Q", "W_K", "W_V"):
                self.store.init_uniform(f"{pre}.{name}", (d_in, config.d_k), d_in, rng)
            self.store.init_uniform(f"{pre}.W_F", (config.d_k, d_ff), config.d_k, rng)
            self.store.add(f"{pre}.b_F", np.zeros(d_ff))
            self.blocks.append(AttentionParams.from_store(self.store, pre))
            d_in = d_ff
        self.store.init_uniform("head.V", (d_in, 2), d_in, rng)
        self.store.add("head.b", np.zeros(2))
        self.pos = sinusoidal_encoding(config.seq_len, config.d_pos).astype(self.store.dtype)

    def rebind(self) -> None:
        self.blocks = [AttentionParams.from_store(self.store, f"l{k}") for k in range(self.config.layers)]

    def encode_input(self, X) -> Tensor:
        x = nn.as_tensor(X)
        if self.config.embed_dim:
            x = nn.matmul(x, self.store["embed"])
        if self.config.positional:
            B, T = x.shape[0], x.shape[1]
            pos = np.broadcast_to(self.pos[:T], (B, T, self.pos.shape[1]))
            x = nn.concat([x, Tensor(pos)], axis=-1)
        return x

    def hidden_sequences(self, X) -> tuple[list[Tensor], list[Tensor]]:
        x = self.encode_input(X)
        outs, attn = [], []
        for blk in self.blocks:
            h, a = attention_forward(blk, x)
            x = nn.tanh_act(nn.add(nn.matmul(h, blk.W_F), blk.b_F))
            outs.append(x)
            attn.append(a)
        return outs, attn

    def logits(self, X, fused: bool = True) -> Tensor:
        X = np.asarray(X, dtype=self.store.dtype) if not isinstance(X, Tensor) else X
        if X.shape[1] != self.config.seq_len:
            raise ValueError(f"expected windows of {self.config.seq_len} symbols "
                             f"(context {self.config.window} + action), got {X.shape[1]}")
        outs, _ = self.hidden_sequences(X)
        last = nn.take(outs[-1], (slice(None), -1))
        return nn.add(nn.matmul(last, self.store["head.V"]), self.store["head.b"])


Classifier = BiLstmClassifier | TransformerClassifier


def build_model(config: ModelConfig) -> Classifier:
    return BiLstmClassifier(config) if config.arch == "lstm" else TransformerClassifier(config)


def forward(model: Classifier, windows) -> tuple[np.ndarray, np.ndarray]:
    """Logits and probabilities for a batch of symbol windows or a one-hot array."""
    X = windows if isinstance(windows, np.ndarray) else encode_windows(windows, model.store.dtype)
    logits = model.logits(X).data
    return logits, nn.softmax_rows(logits)


def bilstm_forward(model: BiLstmClassifier, window: Sequence[Symbol]) -> tuple[np.ndarray, np.ndarray]:
    logits, probs = forward(model, [window])
    return logits[0], probs[0]


def transformer_forward(model: TransformerClassifier, window: Sequence[Symbol]) -> tuple[np.ndarray, np.ndarray]:
    logits, probs = forward(model, [window])
    return logits[0], probs[0]


def label_from_probs(probs: Sequence[float]) -> tuple[str, float]:
    """Argmax label; an exact tie goes to ``incorrect``."""
    p_correct = float(probs[CORRECT])
    label = "correct" if probs[CORRECT] > probs[INCORRECT] else "incorrect"
    return label, p_correct


def classify(model: Classifier, window: Sequence[Symbol]) -> tuple[str, float]:
    _, probs = forward(model, [window])
    return label_from_probs(probs[0])


def predict_correct_proba(model: Classifier, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for lo in range(0, len(X), batch_size):
        logits = model.logits(X[lo:lo + batch_size]).data
        out.append(nn.softmax_rows(logits.astype(np.float64))[:, CORRECT])
    return np.concatenate(out) if out else np.zeros(0)


def model_header(model: Classifier) -> dict:
    cfg = asdict(model.config)
    pooling = "last-fwd+first-bwd" if model.config.arch == "lstm" else "last-position"
    return {"arch": model.config.arch, "window": model.config.window,
            "alphabet": [s.value for s in (Symbol.AP, Symbol.VP, Symbol.AS, Symbol.VS, Symbol.NONE)],
            "pooling": pooling, "model": cfg}


def model_from_checkpoint(header: dict, arrays: dict[str, np.ndarray], dtype: str | None = None) -> Classifier:
    cfg = dict(header["model"])
    if dtype is not None:
        cfg["dtype"] = dtype
    model = build_model(ModelConfig(**cfg))
    model.store.load(arrays)
    model.rebind()
    return model


def save_model(model: Classifier, path) -> None:
    nn.save_checkpoint(path, model.store, model_header(model))


def load_model(path, dtype: str | None = None) -> Classifier:
    header, arrays = nn.load_checkpoint(path)
    return model_from_checkpoint(header, arrays, dtype)
