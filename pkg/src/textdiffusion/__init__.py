"""Desk-scale sequence-to-sequence text generation with embedding diffusion.

Targets are embedded into continuous latents and progressively noised by a
per-token-position schedule; an encoder-decoder transformer learns to
predict the clean sequence at every step (with self-conditioning), and the
schedule recalibrates itself during training so denoising difficulty grows
linearly with the time step.  Decoding runs the reverse process and rounds
to nearest embeddings, optionally reranking seeded candidates by minimum
Bayes risk.
"""

from .autodiff import GradientTape, NumericsError, Tensor, backward, no_grad
from .config import ConfigError, RunConfig
from .corpus import CorpusError, Vocabulary, build_vocab, encode_pair, synth_corpus
from .denoiser import Denoiser, DenoiserConfig, init_parameters
from .estimator import ConditionalTextDiffusion
from .gradcheck import check_gradients
from .metrics import MetricReport, bleu, dist1, div4, evaluate, exact_match
from .optim import Adam, effective_lr
from .sampler import GenerationCandidate, SampleConfig, generate, generate_candidates, mbr_select
from .schedule import LossLedger, NoiseSchedule, adapt, coarsen, sqrt_init
from .training import Trainer, TrainingAborted, load_model

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConditionalTextDiffusion",
    "ConfigError",
    "CorpusError",
    "Denoiser",
    "DenoiserConfig",
    "GenerationCandidate",
    "GradientTape",
    "LossLedger",
    "MetricReport",
    "NoiseSchedule",
    "NumericsError",
    "RunConfig",
    "SampleConfig",
    "Tensor",
    "Trainer",
    "TrainingAborted",
    "Vocabulary",
    "adapt",
    "backward",
    "bleu",
    "build_vocab",
    "check_gradients",
    "coarsen",
    "dist1",
    "div4",
    "effective_lr",
    "encode_pair",
    "evaluate",
    "exact_match",
    "generate",
    "generate_candidates",
    "init_parameters",
    "load_model",
    "mbr_select",
    "no_grad",
    "sqrt_init",
    "synth_corpus",
]
