"""Scikit-learn style facade over the training loop and sampler.

``ConditionalTextDiffusion`` behaves like any sklearn estimator: construct
with hyperparameters, ``fit(X, y)`` on aligned lists of source/target
strings, ``predict(X)`` to generate, ``score(X, y)`` for mean sentence
BLEU.  ``get_params``/``set_params``/``clone`` work as usual, so the model
drops into pipelines and searches.
"""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator

from .config import RunConfig
from .metrics import bleu
from .sampler import SampleConfig, generate_candidates, mbr_select
from .training import Trainer

__all__ = ["ConditionalTextDiffusion"]


def _check_text_list(value, name: str) -> list[str]:
    if isinstance(value, str) or not hasattr(value, "__iter__"):
        raise ValueError(f"{name} must be an iterable of strings")
    items = list(value)
    if not items:
        raise ValueError(f"{name} is empty")
    for item in items:
        if not isinstance(item, str):
            raise ValueError(f"{name} must contain strings, found {type(item).__name__}")
    return items


class ConditionalTextDiffusion(BaseEstimator):
    """Sequence-to-sequence text generator trained by embedding diffusion.

    Parameters mirror the run configuration; defaults are desk-scale so a
    fit on a toy corpus finishes in minutes on a CPU.
    """

    def __init__(
        self,
        time_steps: int = 200,
        max_target_len: int = 16,
        max_source_len: int = 32,
        embed_dim: int = 16,
        hidden_dim: int = 32,
        ffn_dim: int = 64,
        heads: int = 2,
        encoder_layers: int = 2,
        decoder_layers: int = 2,
        dropout: float = 0.0,
        batch_size: int = 16,
        train_steps: int = 2000,
        learning_rate: float = 1e-3,
        warmup_steps: int = 100,
        adaptive_schedule: bool = True,
        schedule_update_interval: int = 250,
        schedule_stride: int = 20,
        self_conditioning: bool = True,
        clamp: bool = False,
        prior_p1: float = 0.0,
        prior_p2: float = 0.0,
        mbr_candidates: int = 1,
        random_state: int = 0,
    ):
        self.time_steps = time_steps
        self.max_target_len = max_target_len
        self.max_source_len = max_source_len
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.ffn_dim = ffn_dim
        self.heads = heads
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.dropout = dropout
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.adaptive_schedule = adaptive_schedule
        self.schedule_update_interval = schedule_update_interval
        self.schedule_stride = schedule_stride
        self.self_conditioning = self_conditioning
        self.clamp = clamp
        self.prior_p1 = prior_p1
        self.prior_p2 = prior_p2
        self.mbr_candidates = mbr_candidates
        self.random_state = random_state

    def _run_config(self, train_path: str, out_dir: str) -> RunConfig:
        return RunConfig(
            time_steps=self.time_steps,
            max_target_len=self.max_target_len,
            max_source_len=self.max_source_len,
            train_data=train_path,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            ffn_dim=self.ffn_dim,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            dropout=self.dropout,
            batch_size=self.batch_size,
            max_steps=self.train_steps,
            learning_rate=self.learning_rate,
            warmup_steps=self.warmup_steps,
            adaptive_schedule=self.adaptive_schedule,
            schedule_update_interval=self.schedule_update_interval,
            schedule_stride=self.schedule_stride,
            self_conditioning=self.self_conditioning,
            clamp=self.clamp,
            prior_p1=self.prior_p1,
            prior_p2=self.prior_p2,
            mbr_candidates=self.mbr_candidates,
            seed=self.random_state,
            checkpoint_interval=max(self.train_steps, 1),
            log_interval=max(self.train_steps // 10, 1),
            out_dir=out_dir,
        )

    def fit(self, X, y):
        """Train on aligned source (X) and target (y) sentence lists."""
        sources = _check_text_list(X, "X")
        targets = _check_text_list(y, "y")
        if len(sources) != len(targets):
            raise ValueError(f"X and y lengths differ: {len(sources)} vs {len(targets)}")
        with tempfile.TemporaryDirectory(prefix="textdiffusion-fit-") as tmp:
            train_path = f"{tmp}/train.tsv"
            from .corpus import save_pairs_tsv

            save_pairs_tsv(list(zip(sources, targets)), train_path)
            trainer = Trainer(self._run_config(train_path, f"{tmp}/run"))
            trainer.train()
            trainer.close()
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.schedule_ = trainer.sched
        self.vocab_ = trainer.vocab
        self.n_iter_ = trainer.step
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this estimator is not fitted yet; call fit first")

    def predict(self, X) -> list[str]:
        """Generate one output sentence per source sentence."""
        self._require_fitted()
        sources = _check_text_list(X, "X")
        sample_cfg = SampleConfig(
            seed=self.random_state,
            self_conditioning=self.self_conditioning,
            clamp=self.clamp,
            prior_p1=self.prior_p1,
            prior_p2=self.prior_p2,
        )
        outputs = []
        for source in sources:
            candidates = generate_candidates(
                source, self.model_, self.schedule_, self.vocab_,
                sample_cfg, self.mbr_candidates,
            )
            best = mbr_select(candidates) if self.mbr_candidates > 1 else candidates[0]
            outputs.append(" ".join(best.tokens))
        return outputs

    def score(self, X, y) -> float:
        """Mean sentence BLEU of predictions against references."""
        references = _check_text_list(y, "y")
        predictions = self.predict(X)
        scores = [
            bleu(pred.split(), ref.lower().split())
            for pred, ref in zip(predictions, references)
        ]
        return float(np.mean(scores))
