"""Continuous diffusion over token-embedding sequences.

Latents are (n, d) stacks of token embeddings (batched as (B, n, d)); every
forward/posterior coefficient is a per-position vector broadcast across the
embedding dimension, because the noise schedule is position-dependent.

Conventions used throughout:
  * squared-error terms are means over (positions x dims), so magnitudes
    are comparable across n and d;
  * the rounding distribution is a softmax over negative squared distances
    to the embedding rows, tied to the same table the forward process
    embeds with, making nearest-embedding argmax its zero-temperature
    limit (ties broken toward the lowest token id);
  * padding positions stay in the latent diffusion (they carry the [PAD]
    embedding and are supervised by the squared-error terms) but are
    excluded from the rounding term and from the per-(t, i) losses handed
    to the schedule ledger.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schedule import NoiseSchedule

__all__ = [
    "init_embedding_table",
    "embed_forward",
    "q_step",
    "q_sample",
    "posterior_mean",
    "denoising_mean",
    "rounding_logits",
    "rounding_logprob",
    "nearest_tokens",
    "LossBreakdown",
    "training_loss",
    "training_loss_batch",
]


def init_embedding_table(
    vocab_size: int, d: int, rng: np.random.Generator, dtype=np.float32
) -> Tensor:
    """Word-embedding table g, one unit-scale Gaussian row per token.

    Rows are redrawn until all four reserved-token rows are distinct
    (rounding must be able to separate the specials).
    """
    for _ in range(100):
        table = rng.standard_normal((vocab_size, d)).astype(dtype)
        reserved = table[:4]
        if len(np.unique(reserved.round(decimals=6), axis=0)) == min(4, vocab_size):
            return Tensor(table, requires_grad=True)
    raise RuntimeError("could not draw distinct reserved-token embeddings")


def _per_position(values: np.ndarray, like: Tensor) -> Tensor:
    """Constant coefficient tensor, shaped to broadcast over the embedding
    dim: (n,) -> (n, 1) or (B, n) -> (B, n, 1)."""
    return Tensor(values[..., None].astype(like.data.dtype))


def embed_forward(
    ids: np.ndarray, table: Tensor, sched: NoiseSchedule, rng: np.random.Generator
) -> tuple[Tensor, Tensor]:
    """Initial latent z_0 = g(ids) + sqrt(beta_0) * eps, reparameterized.

    beta_0^i = 1 - alpha_bar_0^i per position.  The noise is a constant on
    the tape, so gradients flow into the embedding table.  Returns
    (z_0, g(ids)).
    """
    ids = np.asarray(ids)
    g = ad.embedding(table, ids)
    beta0 = 1.0 - sched.alpha_bar[0]
    eps = rng.standard_normal(g.data.shape)
    noise = np.sqrt(beta0)[..., None] * eps
    z0 = ad.add(g, Tensor(noise.astype(g.data.dtype)))
    return z0, g


def q_step(z_prev: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One forward transition z_{t-1} -> z_t (numpy, test/verification use):
    z_t ~ Normal(sqrt(alpha_t) z_{t-1}, (1 - alpha_t) I) per position."""
    c = sched.coefficients(t)
    eps = rng.standard_normal(z_prev.shape)
    return np.sqrt(c.alpha_t)[..., None] * z_prev + np.sqrt(c.beta_t)[..., None] * eps


def q_sample(
    z0: Tensor, t: np.ndarray | int, sched: NoiseSchedule, rng: np.random.Generator
) -> Tensor:
    """Closed-form forward marginal: z_t = sqrt(ab_t) z_0 + sqrt(1-ab_t) eps.

    `t` is a scalar for a single (n, d) latent or a (B,) array for a
    batched (B, n, d) latent, one step per element.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if z0.data.ndim == 2:
        ab_t, _ = sched.gather(t)
        ab_t = ab_t[0]
    else:
        ab_t, _ = sched.gather(t)
    eps = rng.standard_normal(z0.data.shape)
    signal = _per_position(np.sqrt(ab_t), z0)
    noise = np.sqrt(1.0 - ab_t)[..., None] * eps
    return ad.add(ad.mul(z0, signal), Tensor(noise.astype(z0.data.dtype)))


def posterior_mean(z0: Tensor, z_t: Tensor, t: np.ndarray | int, sched: NoiseSchedule) -> Tensor:
    """Mean of the forward-process posterior q(z_{t-1} | z_t, z_0):

        coef0^i = sqrt(ab_{t-1}) beta_t / (1 - ab_t)
        coeft^i = sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t)
        mean    = coef0 * z_0 + coeft * z_t   (per position i)

    The same code path serves the learned denoising mean with the network
    prediction substituted for z_0, so the two are identical by
    construction when the prediction equals z_0.
    """
    if z0.data.shape != z_t.data.shape:
        raise ad.NumericsError(
            f"posterior_mean shape mismatch: {z0.data.shape} vs {z_t.data.shape}"
        )
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    ab_t, ab_prev = sched.gather(t)
    if z0.data.ndim == 2:
        ab_t, ab_prev = ab_t[0], ab_prev[0]
    alpha_t = ab_t / ab_prev
    beta_t = 1.0 - alpha_t
    denom = 1.0 - ab_t
    coef0 = np.sqrt(ab_prev) * beta_t / denom
    coeft = np.sqrt(alpha_t) * (1.0 - ab_prev) / denom
    return ad.add(
        ad.mul(z0, _per_position(coef0, z0)),
        ad.mul(z_t, _per_position(coeft, z_t)),
    )


# The learned reverse mean is the posterior mean evaluated at the denoiser's
# clean-sequence prediction; sharing the implementation is intentional.
denoising_mean = posterior_mean


def rounding_logits(z0: Tensor, table: Tensor) -> Tensor:
    """Per-position token logits: -||z_0^i - g_w||^2 for every word w.

    Expanded as 2 z.g - ||z||^2 - ||g||^2 so it stays three dense ops.
    """
    cross = ad.matmul(z0, ad.transpose(table, (1, 0)))
    z_sq = ad.sum_last(ad.mul(z0, z0), keepdims=True)
    g_sq = ad.reshape(ad.sum_last(ad.mul(table, table), keepdims=True), (1, -1))
    return ad.sub(ad.scale(cross, 2.0), ad.add(z_sq, g_sq))


def rounding_logprob(
    z0: Tensor, ids: np.ndarray, table: Tensor, pad_mask: np.ndarray | None = None
) -> tuple[Tensor, np.ndarray]:
    """Log-probability of the token sequence under the rounding softmax.

    Probabilities are a softmax over negative squared embedding distances;
    the log-prob sums over non-padding positions.  Also returns the
    nearest-embedding argmax per position (tie -> lowest id).
    """
    ids = np.asarray(ids)
    logits = rounding_logits(z0, table)
    logp = ad.log_softmax_last(logits)
    picked = ad.gather_last(logp, ids)
    if pad_mask is not None:
        keep = (~np.asarray(pad_mask, dtype=bool)).astype(picked.data.dtype)
        picked = ad.mul(picked, Tensor(keep))
    total = ad.tsum(picked)
    return total, nearest_tokens(z0.data, table.data)


def nearest_tokens(z0: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Nearest-embedding token per position; ties resolve to the lowest id."""
    dist = (
        (z0 * z0).sum(axis=-1, keepdims=True)
        - 2.0 * z0 @ table.T
        + (table * table).sum(axis=-1)
    )
    return dist.argmin(axis=-1)


@dataclass
class LossBreakdown:
    """The four loss components (floats) plus what the trainer needs.

    total is the taped scalar; mse_term covers the sampled t >= 2 step,
    anchor_term the fresh t=1 draw against the clean embeddings,
    terminal_term the final-step mean-shrinkage penalty, rounding_nll the
    token reconstruction term.  stepwise_mse holds per-(t, i) values for
    the schedule ledger (padding excluded downstream via pad_mask).
    """

    total: Tensor
    mse_term: float
    anchor_term: float
    terminal_term: float
    rounding_nll: float
    t_values: np.ndarray  # (B,)
    stepwise_mse: np.ndarray  # (B, n)
    pad_mask: np.ndarray  # (B, n)

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def training_loss_batch(
    tgt_ids: np.ndarray,
    tgt_pad_mask: np.ndarray,
    denoise_fn,
    table: Tensor,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> LossBreakdown:
    """One training objective evaluation for a batch of framed targets.

    `denoise_fn(z_t, t_array)` runs the conditional denoiser (the caller
    closes over the encoded source and the self-conditioning protocol).
    The time step is sampled uniformly from {2..T} per batch element; the
    t=1 anchor term uses its own forward draw each call.
    """
    B, n = tgt_ids.shape
    T = sched.T
    z0, g = embed_forward(tgt_ids, table, sched, rng)

    t = rng.integers(2, T + 1, size=B)
    z_t = q_sample(z0, t, sched, rng)
    z0_hat = denoise_fn(z_t, t)
    mse_term = ad.mse(z0_hat, z0)
    diff = z0_hat.data - z0.data
    stepwise = (diff * diff).mean(axis=-1)

    t_one = np.ones(B, dtype=np.int64)
    z_1 = q_sample(z0, t_one, sched, rng)
    anchor_hat = denoise_fn(z_1, t_one)
    anchor_term = ad.mse(anchor_hat, g)

    shrink = _per_position(np.sqrt(sched.alpha_bar[T]), z0)
    terminal_term = ad.mse(ad.mul(z0, shrink), Tensor(np.zeros_like(z0.data)))

    logprob, _ = rounding_logprob(z0, tgt_ids, table, tgt_pad_mask)
    active = max(int((~tgt_pad_mask).sum()), 1)
    rounding_nll = ad.scale(logprob, -1.0 / active)

    total = ad.add(ad.add(mse_term, anchor_term), ad.add(terminal_term, rounding_nll))
    return LossBreakdown(
        total=total,
        mse_term=float(mse_term.data),
        anchor_term=float(anchor_term.data),
        terminal_term=float(terminal_term.data),
        rounding_nll=float(rounding_nll.data),
        t_values=t,
        stepwise_mse=stepwise,
        pad_mask=tgt_pad_mask,
    )


def training_loss(
    tgt_ids: np.ndarray,
    tgt_pad_mask: np.ndarray,
    denoise_fn,
    table: Tensor,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> LossBreakdown:
    """Single-pair convenience wrapper over ``training_loss_batch``."""
    return training_loss_batch(
        np.asarray(tgt_ids)[None, :],
        np.asarray(tgt_pad_mask, dtype=bool)[None, :],
        denoise_fn,
        table,
        sched,
        rng,
    )
