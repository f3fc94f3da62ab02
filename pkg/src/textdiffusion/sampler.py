"""Reverse-process sampling, candidate generation, and MBR selection.

Generation draws z_T from a standard normal and walks t = T..1.  Each step
predicts the clean sequence from the current latent (carrying the previous
prediction as self-conditioning input when enabled), then samples the next
latent from the learned reverse transition; the final step emits the mean
with no added noise.  The encoder runs exactly once per source, whatever T
is.

Two optional behaviors trade quality for diversity:
  * prior sampling: with probability p1, inside the earliest ceil(p2*T)
    reverse steps, the next latent is drawn from the forward-process prior
    around the prediction, Normal(sqrt(ab_{t-1}) z0_hat, (1-ab_{t-1}) I),
    whose variance dominates the learned transition's beta-tilde;
  * clamping: snap each predicted position to its nearest embedding before
    using it (off by default).

Tokens come from nearest-embedding rounding of the final prediction
(or of the final latent, behind a flag); text decoding truncates at the
first [SEP].
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Vocabulary, decode_target, tokenize
from .denoiser import Denoiser, EncoderMemory
from .diffusion import nearest_tokens
from .metrics import bleu
from .schedule import NoiseSchedule

__all__ = [
    "SampleConfig",
    "GenerationCandidate",
    "reverse_step",
    "generate",
    "generate_candidates",
    "mbr_select",
    "write_trace",
]


class GenerationError(RuntimeError):
    """Non-finite latent or unusable sampler configuration."""


@dataclass
class SampleConfig:
    seed: int = 0
    self_conditioning: bool = True
    clamp: bool = False
    prior_p1: float = 0.0
    prior_p2: float = 0.0
    mbr_candidates: int = 1
    round_from: str = "prediction"  # or "latent"
    trace: bool = False

    def __post_init__(self):
        for name in ("prior_p1", "prior_p2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise GenerationError(f"{name} must be in [0, 1], got {value}")
        if self.mbr_candidates < 1:
            raise GenerationError(f"mbr_candidates must be >= 1, got {self.mbr_candidates}")
        if self.round_from not in ("prediction", "latent"):
            raise GenerationError(f"round_from must be 'prediction' or 'latent', got {self.round_from!r}")


@dataclass
class GenerationCandidate:
    tokens: list[str]
    token_ids: list[int]
    seed: int
    risk: float | None = None
    trace: list[tuple[int, str]] = field(default_factory=list)


def reverse_step(
    z_t: np.ndarray,
    carry: np.ndarray | None,
    model: Denoiser,
    memory: EncoderMemory,
    t: int,
    sched: NoiseSchedule,
    cfg: SampleConfig,
    rng: np.random.Generator,
    table: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One reverse transition; returns (z_{t-1}, clean-sequence prediction).

    `carry` is the previous step's prediction (None or zeros at t = T).
    """
    n, d = z_t.shape
    self_cond = carry if (cfg.self_conditioning and carry is not None) else np.zeros_like(z_t)
    with ad.no_grad():
        z0_hat = model.denoise(Tensor(z_t), Tensor(self_cond), memory, t).data.astype(np.float64)
    if not np.all(np.isfinite(z0_hat)):
        raise GenerationError(f"non-finite prediction at reverse step t={t}")
    if cfg.clamp:
        z0_hat = table[nearest_tokens(z0_hat, table)]

    c = sched.coefficients(t)
    prior_window = t > sched.T - math.ceil(cfg.prior_p2 * sched.T)
    use_prior = (
        cfg.prior_p1 > 0.0 and prior_window and rng.random() < cfg.prior_p1
    )
    if use_prior:
        mean = np.sqrt(c.alpha_bar_prev)[:, None] * z0_hat
        std = np.sqrt(1.0 - c.alpha_bar_prev)[:, None]
    else:
        coef0 = np.sqrt(c.alpha_bar_prev) * c.beta_t / (1.0 - c.alpha_bar_t)
        coeft = np.sqrt(c.alpha_t) * (1.0 - c.alpha_bar_prev) / (1.0 - c.alpha_bar_t)
        mean = coef0[:, None] * z0_hat + coeft[:, None] * z_t
        std = np.sqrt(c.beta_tilde_t)[:, None]
    if t == 1:  # terminal step emits the mean, no noise injection
        z_prev = mean
    else:
        z_prev = mean + std * rng.standard_normal((n, d))
    if not np.all(np.isfinite(z_prev)):
        raise GenerationError(f"non-finite latent at reverse step t={t}")
    return z_prev, z0_hat


def generate(
    src_text: str,
    model: Denoiser,
    sched: NoiseSchedule,
    vocab: Vocabulary,
    cfg: SampleConfig,
    memory: EncoderMemory | None = None,
) -> GenerationCandidate:
    """Full reverse-process generation for one source sentence.

    The encoder runs once (or not at all if a prebuilt memory is passed).
    Deterministic given (parameters, schedule, config, seed).
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    table = model.params["embed.table"].data.astype(np.float64)
    if memory is None:
        src_ids = np.array(vocab.encode(tokenize(src_text)) + [vocab.sep_id])
        with ad.no_grad():
            memory = model.encode(src_ids[None, :], np.zeros((1, len(src_ids)), dtype=bool))
    n, d = model.cfg.n, model.cfg.d

    z = rng.standard_normal((n, d))
    carry: np.ndarray | None = None
    trace: list[tuple[int, str]] = []
    for t in range(sched.T, 0, -1):
        z, carry = reverse_step(z, carry, model, memory, t, sched, cfg, rng, table)
        if cfg.trace:
            snapshot = nearest_tokens(carry, table)
            trace.append((t, decode_target(snapshot, vocab)))
    rounded_source = carry if cfg.round_from == "prediction" else z
    token_ids = nearest_tokens(rounded_source, table).tolist()
    text = decode_target(token_ids, vocab)
    return GenerationCandidate(
        tokens=text.split(), token_ids=token_ids, seed=cfg.seed, trace=trace
    )


def generate_candidates(
    src_text: str,
    model: Denoiser,
    sched: NoiseSchedule,
    vocab: Vocabulary,
    cfg: SampleConfig,
    count: int,
) -> list[GenerationCandidate]:
    """Independent candidates with per-candidate seeds (base seed + index);
    the source is encoded once and shared."""
    src_ids = np.array(vocab.encode(tokenize(src_text)) + [vocab.sep_id])
    with ad.no_grad():
        memory = model.encode(src_ids[None, :], np.zeros((1, len(src_ids)), dtype=bool))
    candidates = []
    for index in range(count):
        one = dataclasses.replace(cfg, seed=cfg.seed + index)
        candidates.append(generate(src_text, model, sched, vocab, one, memory=memory))
    return candidates


def mbr_select(candidates: list[GenerationCandidate]) -> GenerationCandidate:
    """Minimum-Bayes-risk choice under negative-BLEU risk.

    risk(s) = mean over all candidates s' (self included) of -BLEU(s, s');
    ties break toward the lowest seed.
    """
    if not candidates:
        raise GenerationError("mbr_select needs at least one candidate")
    for cand in candidates:
        risks = [-bleu(cand.tokens, other.tokens) for other in candidates]
        cand.risk = sum(risks) / len(risks)
    return min(candidates, key=lambda c: (c.risk, c.seed))


def write_trace(candidate: GenerationCandidate, path: str | Path) -> None:
    """Reverse-step snapshots as JSONL: {"t": ..., "decoded_argmax_text": ...}."""
    with open(path, "w", encoding="utf-8") as handle:
        for t, text in candidate.trace:
            handle.write(json.dumps({"t": t, "decoded_argmax_text": text}) + "\n")
