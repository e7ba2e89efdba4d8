"""Dense, recurrent, and attention layers used by the user models."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, layer_norm, softmax
from .params import ParamStore


class ShapeError(ValueError):
    """Layer wiring does not match its configuration."""


def fan_in_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Uniform init scaled by 1/sqrt(fan_in); fan_in is the first axis."""
    bound = 1.0 / np.sqrt(shape[0]) if shape[0] > 0 else 1.0
    return rng.uniform(-bound, bound, size=shape)


_ACTIVATIONS = {
    "tanh": lambda t: t.tanh(),
    "relu": lambda t: t.relu(),
    "sigmoid": lambda t: t.sigmoid(),
    "linear": lambda t: t,
}


class Mlp:
    """Stack of dense layers: y = act(x @ W + b) per layer.

    `sizes` gives the full width chain, e.g. (8, 64, 64) is two layers.
    The head activation may differ from the hidden activation.
    """

    def __init__(self, store: ParamStore, prefix: str, sizes, rng,
                 activation="tanh", head_activation="linear"):
        if len(sizes) < 2:
            raise ShapeError("an mlp needs at least one layer")
        self.sizes = tuple(int(s) for s in sizes)
        self.act = _ACTIVATIONS[activation]
        self.head_act = _ACTIVATIONS[head_activation]
        self.weights, self.biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(store.add(f"{prefix}.w{i}", fan_in_uniform(rng, (n_in, n_out))))
            self.biases.append(store.add(f"{prefix}.b{i}", np.zeros(n_out)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"mlp expects width {self.sizes[0]}, got {x.shape[-1]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            h = self.head_act(h) if i == last else self.act(h)
        return h


class LstmCell:
    """Single LSTM cell with the standard four-gate update.

    step() returns (h, c, o); the emitted output o equals h unless a
    readout width is configured, in which case o = h @ W_out + b_out.
    Gate order in the fused weight matrices is (input, forget, cell, output).
    """

    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_hidden: int, rng,
                 readout: int | None = None):
        self.n_in, self.n_hidden = int(n_in), int(n_hidden)
        self.w_x = store.add(f"{prefix}.w_x", fan_in_uniform(rng, (n_in, 4 * n_hidden)))
        self.w_h = store.add(f"{prefix}.w_h", fan_in_uniform(rng, (n_hidden, 4 * n_hidden)))
        bias = np.zeros(4 * n_hidden)
        bias[n_hidden:2 * n_hidden] = 1.0  # forget-gate bias keeps early memory open
        self.bias = store.add(f"{prefix}.bias", bias)
        if readout is None:
            self.w_out = self.b_out = None
            self.n_out = n_hidden
        else:
            self.w_out = store.add(f"{prefix}.w_out", fan_in_uniform(rng, (n_hidden, readout)))
            self.b_out = store.add(f"{prefix}.b_out", np.zeros(readout))
            self.n_out = int(readout)

    def step(self, h_prev: Tensor, c_prev: Tensor, x: Tensor):
        if x.shape[-1] != self.n_in or h_prev.shape[-1] != self.n_hidden:
            raise ShapeError(
                f"lstm step expects input {self.n_in} / hidden {self.n_hidden}, "
                f"got {x.shape[-1]} / {h_prev.shape[-1]}"
            )
        nh = self.n_hidden
        z = x @ self.w_x + h_prev @ self.w_h + self.bias
        i = z[..., 0:nh].sigmoid()
        f = z[..., nh:2 * nh].sigmoid()
        g = z[..., 2 * nh:3 * nh].tanh()
        o_gate = z[..., 3 * nh:4 * nh].sigmoid()
        c = f * c_prev + i * g
        h = o_gate * c.tanh()
        return h, c, self.readout(h)

    def readout(self, h: Tensor) -> Tensor:
        if self.w_out is None:
            return h
        return h @ self.w_out + self.b_out

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = Tensor(np.zeros((batch, self.n_hidden)))
        return z, Tensor(np.zeros((batch, self.n_hidden)))


class TransformerLayer:
    """Masked multi-head self-attention plus a feed-forward block.

    Position information must already be embedded in the inputs. Layer
    normalization (post-norm on both sublayers) can be disabled for
    hand-checkable configurations.
    """

    def __init__(self, store: ParamStore, prefix: str, width: int, n_heads: int, rng,
                 ffn_width: int | None = None, use_layer_norm: bool = True):
        if width % n_heads != 0:
            raise ShapeError("attention width must divide evenly across heads")
        self.width, self.n_heads = int(width), int(n_heads)
        self.head_dim = width // n_heads
        ffn_width = ffn_width or 4 * width
        self.w_q = store.add(f"{prefix}.w_q", fan_in_uniform(rng, (width, width)))
        self.w_k = store.add(f"{prefix}.w_k", fan_in_uniform(rng, (width, width)))
        self.w_v = store.add(f"{prefix}.w_v", fan_in_uniform(rng, (width, width)))
        self.w_o = store.add(f"{prefix}.w_o", fan_in_uniform(rng, (width, width)))
        self.ffn_w1 = store.add(f"{prefix}.ffn_w1", fan_in_uniform(rng, (width, ffn_width)))
        self.ffn_b1 = store.add(f"{prefix}.ffn_b1", np.zeros(ffn_width))
        self.ffn_w2 = store.add(f"{prefix}.ffn_w2", fan_in_uniform(rng, (ffn_width, width)))
        self.ffn_b2 = store.add(f"{prefix}.ffn_b2", np.zeros(width))
        self.use_layer_norm = use_layer_norm
        if use_layer_norm:
            self.ln1_g = store.add(f"{prefix}.ln1_g", np.ones(width))
            self.ln1_b = store.add(f"{prefix}.ln1_b", np.zeros(width))
            self.ln2_g = store.add(f"{prefix}.ln2_g", np.ones(width))
            self.ln2_b = store.add(f"{prefix}.ln2_b", np.zeros(width))
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor, causal: bool = True,
                 key_mask: np.ndarray | None = None) -> Tensor:
        if x.ndim != 3:
            raise ShapeError("transformer input must be (batch, seq, width)")
        batch, seq, width = x.shape
        if seq == 0:
            raise ShapeError("empty sequence")
        if width != self.width:
            raise ShapeError(f"expected width {self.width}, got {width}")

        def split_heads(t):
            return t.reshape(batch, seq, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

        q = split_heads(x @ self.w_q)
        k = split_heads(x @ self.w_k)
        v = split_heads(x @ self.w_v)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        if causal:
            future = np.triu(np.ones((seq, seq)), k=1) * -1e30
            scores = scores + Tensor(future)
        if key_mask is not None:
            # hide padding keys from every query position
            blocked = (1.0 - np.asarray(key_mask, dtype=np.float64)) * -1e30
            scores = scores + Tensor(blocked[:, None, None, :])
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        mixed = attn @ v
        merged = mixed.transpose(0, 2, 1, 3).reshape(batch, seq, width)
        attn_out = x + merged @ self.w_o
        if self.use_layer_norm:
            attn_out = layer_norm(attn_out, self.ln1_g, self.ln1_b)
        ffn = ((attn_out @ self.ffn_w1 + self.ffn_b1).relu()) @ self.ffn_w2 + self.ffn_b2
        out = attn_out + ffn
        if self.use_layer_norm:
            out = layer_norm(out, self.ln2_g, self.ln2_b)
        return out


def one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


__all__ = [
    "Mlp", "LstmCell", "TransformerLayer", "ShapeError",
    "fan_in_uniform", "one_hot", "concat",
]
