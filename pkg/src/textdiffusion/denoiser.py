"""Encoder-decoder transformer predicting clean embedding sequences.

The encoder reads the source token sequence once per generation; the
decoder attends over the full noisy latent sequence with no causal mask
(prediction is sequence-level, not left-to-right) plus cross-attention to
the encoder memory.  The previous clean-sequence estimate is concatenated
onto the latent along the embedding dimension (all-zeros when
self-conditioning is off or unavailable), so the decoder input projection
is 2d -> hidden.  Time step information enters as a sinusoidal feature of
t/T through a learned linear map, added after the input projection.

Blocks are pre-norm; the output projection starts near zero so early
clean-sequence predictions are small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "DenoiserConfig",
    "EncoderMemory",
    "Denoiser",
    "init_parameters",
    "time_features",
]


@dataclass
class DenoiserConfig:
    vocab_size: int
    d: int  # embedding dim
    hidden: int
    ffn: int
    heads: int
    encoder_layers: int
    decoder_layers: int
    max_source_len: int
    n: int  # target positions
    T: int  # diffusion steps, normalizes the time feature
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class EncoderMemory:
    """Read-only encoder states, reusable across all reverse steps of one
    generation of the same source."""

    states: Tensor  # (B, m, hidden)
    pad_mask: np.ndarray  # (B, m) bool, True at padding


def _attention_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_parameters(
    cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """All trainable tensors, including the shared word-embedding table."""

    params: dict[str, Tensor] = {}

    def weight(name, shape, std=0.02):
        params[name] = Tensor(
            (rng.standard_normal(shape) * std).astype(dtype), requires_grad=True
        )

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    h, d, f = cfg.hidden, cfg.d, cfg.ffn
    weight("embed.table", (cfg.vocab_size, d), std=1.0)
    weight("enc.pos", (cfg.max_source_len, h))
    weight("dec.pos", (cfg.n, h))
    weight("enc.in_proj.w", (d, h))
    zeros("enc.in_proj.b", (h,))
    weight("dec.in_proj.w", (2 * d, h))
    zeros("dec.in_proj.b", (h,))
    weight("time.w", (h, h))
    zeros("time.b", (h,))

    def attention(prefix):
        for name in _attention_names(prefix):
            if name.split(".")[-1].startswith("w"):
                weight(name, (h, h))
            else:
                zeros(name, (h,))

    def feed_forward(prefix):
        weight(f"{prefix}.w1", (h, f))
        zeros(f"{prefix}.b1", (f,))
        weight(f"{prefix}.w2", (f, h))
        zeros(f"{prefix}.b2", (h,))

    def norm(prefix):
        ones(f"{prefix}.g", (h,))
        zeros(f"{prefix}.b", (h,))

    for layer in range(cfg.encoder_layers):
        attention(f"enc.{layer}.attn")
        norm(f"enc.{layer}.ln1")
        feed_forward(f"enc.{layer}.ffn")
        norm(f"enc.{layer}.ln2")
    norm("enc.ln_out")

    for layer in range(cfg.decoder_layers):
        attention(f"dec.{layer}.self")
        norm(f"dec.{layer}.ln1")
        attention(f"dec.{layer}.cross")
        norm(f"dec.{layer}.ln2")
        feed_forward(f"dec.{layer}.ffn")
        norm(f"dec.{layer}.ln3")
    norm("dec.ln_out")

    weight("out_proj.w", (h, d), std=1e-3)
    zeros("out_proj.b", (d,))
    return params


def time_features(t: np.ndarray, T: int, width: int, dtype) -> np.ndarray:
    """Sinusoidal features of the normalized step t/T, shape (B, width).

    The normalized time is spread over ~1000 effective positions so the
    frequency bank resolves T=2000 grids and tiny toy grids alike.
    """
    t = np.asarray(t, dtype=np.float64)
    pos = (t / T) * 1000.0
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = pos[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if feats.shape[-1] < width:  # odd widths pad with a zero column
        feats = np.pad(feats, ((0, 0), (0, width - feats.shape[-1])))
    return feats.astype(dtype)


class Denoiser:
    """Stateless forward passes over a named parameter dict.

    ``encode_calls`` counts encoder forwards; generation must drive it up
    exactly once per source regardless of how many reverse steps run.
    """

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.encode_calls = 0
        self.training = False
        self._dropout_rng = np.random.default_rng(0)

    def train_mode(self, rng: np.random.Generator) -> None:
        self.training = True
        self._dropout_rng = rng

    def eval_mode(self) -> None:
        self.training = False

    # -- building blocks ----------------------------------------------------

    def _drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.cfg.dropout, self._dropout_rng, self.training)

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return ad.add(ad.mul(ad.layer_norm(x), p[f"{prefix}.g"]), p[f"{prefix}.b"])

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        p = self.params
        return ad.add(ad.matmul(x, p[w]), p[b])

    def _heads(self, x: Tensor) -> Tensor:
        b, length, h = x.data.shape
        per_head = h // self.cfg.heads
        split = ad.reshape(x, (b, length, self.cfg.heads, per_head))
        return ad.transpose(split, (0, 2, 1, 3))  # (B, heads, len, per_head)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, heads, length, per_head = x.data.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, length, heads * per_head))

    def _attention(
        self, query: Tensor, keys: Tensor, prefix: str, key_pad_mask: np.ndarray | None
    ) -> Tensor:
        q = self._heads(self._linear(query, f"{prefix}.wq", f"{prefix}.bq"))
        k = self._heads(self._linear(keys, f"{prefix}.wk", f"{prefix}.bk"))
        v = self._heads(self._linear(keys, f"{prefix}.wv", f"{prefix}.bv"))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.scale(scores, 1.0 / math.sqrt(q.data.shape[-1]))
        if key_pad_mask is not None and key_pad_mask.any():
            scores = ad.masked_fill(scores, key_pad_mask[:, None, None, :], -1e9)
        weights = ad.softmax_last(scores)
        context = self._merge_heads(ad.matmul(weights, v))
        return self._linear(context, f"{prefix}.wo", f"{prefix}.bo")

    def _feed_forward(self, x: Tensor, prefix: str) -> Tensor:
        hidden = ad.gelu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._linear(hidden, f"{prefix}.w2", f"{prefix}.b2")

    # -- public passes --------------------------------------------------------

    def encode(self, src_ids: np.ndarray, src_pad_mask: np.ndarray) -> EncoderMemory:
        """One encoder forward over a batch of padded source sequences."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        src_pad_mask = np.atleast_2d(np.asarray(src_pad_mask, dtype=bool))
        m = src_ids.shape[1]
        if m > self.cfg.max_source_len:
            raise ad.NumericsError(
                f"source length {m} exceeds maximum {self.cfg.max_source_len}"
            )
        self.encode_calls += 1
        p = self.params
        tokens = ad.embedding(p["embed.table"], src_ids)
        x = self._linear(tokens, "enc.in_proj.w", "enc.in_proj.b")
        x = ad.add(x, ad.embedding(p["enc.pos"], np.arange(m)))
        for layer in range(self.cfg.encoder_layers):
            normed = self._norm(x, f"enc.{layer}.ln1")
            attended = self._attention(normed, normed, f"enc.{layer}.attn", src_pad_mask)
            x = ad.add(x, self._drop(attended))
            x = ad.add(x, self._drop(self._feed_forward(self._norm(x, f"enc.{layer}.ln2"), f"enc.{layer}.ffn")))
        x = self._norm(x, "enc.ln_out")
        return EncoderMemory(states=x, pad_mask=src_pad_mask)

    def denoise(
        self,
        z_t: Tensor,
        self_cond: Tensor,
        memory: EncoderMemory,
        t: np.ndarray | int,
    ) -> Tensor:
        """Predict the clean embedding sequence from a noisy latent.

        z_t and self_cond are (B, n, d) (or (n, d), promoted); t is one
        step per batch element.  Decoder self-attention is full over all n
        latent positions: target padding carries real [PAD] latents and
        lengths are unknown at generation time.
        """
        squeeze = z_t.data.ndim == 2
        if squeeze:
            z_t = ad.reshape(z_t, (1,) + z_t.data.shape)
            self_cond = ad.reshape(self_cond, (1,) + self_cond.data.shape)
        if z_t.data.shape != self_cond.data.shape:
            raise ad.NumericsError(
                f"latent {z_t.data.shape} and self-conditioning {self_cond.data.shape} disagree"
            )
        b, n, d = z_t.data.shape
        if (n, d) != (self.cfg.n, self.cfg.d):
            raise ad.NumericsError(
                f"latent shape {(n, d)} does not match configured {(self.cfg.n, self.cfg.d)}"
            )
        t = np.full(b, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
        p = self.params
        x = self._linear(ad.concat_last((z_t, self_cond)), "dec.in_proj.w", "dec.in_proj.b")
        x = ad.add(x, ad.embedding(p["dec.pos"], np.arange(n)))
        sinusoid = Tensor(time_features(t, self.cfg.T, self.cfg.hidden, x.data.dtype))
        time_vec = self._linear(sinusoid, "time.w", "time.b")
        x = ad.add(x, ad.reshape(time_vec, (b, 1, self.cfg.hidden)))
        for layer in range(self.cfg.decoder_layers):
            normed = self._norm(x, f"dec.{layer}.ln1")
            # Full attention: no causal mask, all n latent positions live.
            attended = self._attention(normed, normed, f"dec.{layer}.self", None)
            x = ad.add(x, self._drop(attended))
            cross = self._attention(
                self._norm(x, f"dec.{layer}.ln2"),
                memory.states,
                f"dec.{layer}.cross",
                memory.pad_mask,
            )
            x = ad.add(x, self._drop(cross))
            x = ad.add(x, self._drop(self._feed_forward(self._norm(x, f"dec.{layer}.ln3"), f"dec.{layer}.ffn")))
        x = self._norm(x, "dec.ln_out")
        out = self._linear(x, "out_proj.w", "out_proj.b")
        if squeeze:
            out = ad.reshape(out, (n, d))
        return out

    def self_conditioned_estimate(
        self,
        z_t: Tensor,
        memory: EncoderMemory,
        t: np.ndarray,
        rng: np.random.Generator,
        enabled: bool,
    ) -> tuple[Tensor, str]:
        """Training-time self-conditioning protocol.

        With probability 1/2 (when enabled) the previous-estimate input is
        the all-zeros matrix; otherwise it is a first, gradient-detached
        forward pass.  Returns the prediction to train on and which branch
        ran ("zeros" or "estimate").
        """
        zeros = Tensor(np.zeros_like(z_t.data))
        if enabled and rng.random() < 0.5:
            with ad.no_grad():
                first = self.denoise(z_t, zeros, memory, t)
            estimate = first.detach()
            return self.denoise(z_t, estimate, memory, t), "estimate"
        return self.denoise(z_t, zeros, memory, t), "zeros"
