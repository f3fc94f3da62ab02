"""Training orchestration: data, steps, schedule updates, checkpoints.

Determinism contract: every stochastic choice at global step s is drawn
from a generator seeded by (seed, domain, s) — batch order by epoch, noise
and protocol coins by step — so resuming from a checkpoint at step s
continues the exact trajectory of an uninterrupted run.  Log lines are
JSONL without timestamps; a fixed (config, seed) fixes every artifact
byte.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .checkpoint import CheckpointError, read_blocks, write_blocks
from .config import RunConfig
from .corpus import (
    Batch,
    CorpusError,
    ParallelPair,
    Vocabulary,
    assemble_batch,
    build_vocab,
    encode_pair,
    load_pairs_tsv,
    synth_corpus,
)
from .denoiser import Denoiser, DenoiserConfig, init_parameters
from .diffusion import training_loss_batch
from .metrics import bleu
from .optim import Adam
from .sampler import SampleConfig, generate
from .schedule import LossLedger, NoiseSchedule, adapt, sqrt_init

__all__ = ["Trainer", "TrainingAborted", "load_model"]

_EPOCH_DOMAIN = 7
_STEP_DOMAIN = 11


class TrainingAborted(RuntimeError):
    """Numeric failure during training; the last checkpoint is retained."""


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _STEP_DOMAIN, step)))


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    order = np.arange(count)
    np.random.default_rng(np.random.SeedSequence((seed, _EPOCH_DOMAIN, epoch))).shuffle(order)
    return order


def _load_texts(cfg: RunConfig, which: str) -> list[tuple[str, str]]:
    if cfg.task:
        size = cfg.synth_size if which == "train" else max(cfg.dev_eval_samples, 32)
        seed = cfg.seed if which == "train" else cfg.seed + 90001
        return synth_corpus(
            cfg.task, size, seed,
            alphabet_size=cfg.synth_alphabet,
            min_len=cfg.synth_min_len,
            max_len=cfg.synth_max_len,
        )
    path = cfg.train_data if which == "train" else cfg.dev_data
    if not path:
        return []
    return load_pairs_tsv(path)


class Trainer:
    """Single-writer training loop over one model + schedule + ledger."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = np.float32 if cfg.dtype == "float32" else np.float64

        train_texts = _load_texts(cfg, "train")
        dev_texts = _load_texts(cfg, "dev")
        if cfg.vocab_path:
            self.vocab = Vocabulary.load(cfg.vocab_path)
        else:
            self.vocab = build_vocab(
                [s for s, _ in train_texts] + [t for _, t in train_texts]
            )
        self.train_pairs = self._encode_all(train_texts)
        self.dev_pairs = self._encode_all(dev_texts) if dev_texts else []
        self.dev_texts = dev_texts

        self.sched = sqrt_init(
            cfg.time_steps, cfg.max_target_len, s0=cfg.s0, alpha_min=cfg.alpha_min
        )
        self.ledger = LossLedger(cfg.time_steps, cfg.max_target_len, decay=cfg.ledger_decay)
        model_cfg = DenoiserConfig(
            vocab_size=len(self.vocab),
            d=cfg.embed_dim,
            hidden=cfg.hidden_dim,
            ffn=cfg.ffn_dim,
            heads=cfg.heads,
            encoder_layers=cfg.encoder_layers,
            decoder_layers=cfg.decoder_layers,
            max_source_len=cfg.max_source_len,
            n=cfg.max_target_len,
            T=cfg.time_steps,
            dropout=cfg.dropout,
        )
        params = init_parameters(
            model_cfg, np.random.default_rng(np.random.SeedSequence((cfg.seed, 3))), self.dtype
        )
        self.model = Denoiser(model_cfg, params)
        self.optimizer = Adam(
            params,
            base_lr=cfg.learning_rate,
            warmup_steps=cfg.warmup_steps,
            max_steps=cfg.max_steps,
        )
        self.step = 0
        self.best_dev_bleu = -1.0
        self._log_handle = None

    # -- data ----------------------------------------------------------------

    def _encode_all(self, texts: list[tuple[str, str]]) -> list[ParallelPair]:
        pairs = []
        for src, tgt in texts:
            pairs.append(
                encode_pair(
                    src, tgt, self.vocab,
                    n=self.cfg.max_target_len,
                    max_source_len=self.cfg.max_source_len,
                    truncate=self.cfg.truncate,
                )
            )
        if not pairs:
            raise CorpusError("training corpus is empty")
        return pairs

    def _batch_for_step(self, step: int) -> Batch:
        """Batch for global step s: epoch-shuffled order, reconstructible
        from (seed, s) alone so resumed runs replay the same data."""
        per_epoch = -(-len(self.train_pairs) // self.cfg.batch_size)
        epoch, index = divmod(step - 1, per_epoch)
        order = _epoch_order(self.cfg.seed, epoch, len(self.train_pairs))
        lo = index * self.cfg.batch_size
        chosen = order[lo:lo + self.cfg.batch_size]
        return assemble_batch(self.train_pairs, chosen, self.vocab.pad_id)

    # -- logging ---------------------------------------------------------------

    def _log(self, record: dict) -> None:
        if self._log_handle is None:
            self._log_handle = open(self.out_dir / "log.jsonl", "a", encoding="utf-8")
        self._log_handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._log_handle.flush()

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None

    # -- training ---------------------------------------------------------------

    def train_step(self) -> dict:
        """Run one optimization step; returns the log record."""
        cfg = self.cfg
        self.step += 1
        step = self.step
        rng = _step_rng(cfg.seed, step)
        batch = self._batch_for_step(step)
        self.model.train_mode(rng)
        self.optimizer.zero_grad()
        memory = self.model.encode(batch.src_ids, batch.src_pad_mask)

        def denoise_fn(z_t: Tensor, t: np.ndarray) -> Tensor:
            estimate, _branch = self.model.self_conditioned_estimate(
                z_t, memory, t, rng, enabled=cfg.self_conditioning
            )
            return estimate

        try:
            breakdown = training_loss_batch(
                batch.tgt_ids, batch.tgt_pad_mask, denoise_fn,
                self.model.params["embed.table"], self.sched, rng,
            )
            ad.backward(breakdown.total)
            lr = self.optimizer.step()
        except NumericsError as exc:
            ad.tape.clear()
            self._log({"step": step, "event": "abort", "error": str(exc)})
            raise TrainingAborted(str(exc)) from exc
        finally:
            self.model.eval_mode()

        self.ledger.record_batch(
            breakdown.t_values, breakdown.stepwise_mse, breakdown.pad_mask
        )

        record = {
            "step": step,
            "total": breakdown.total_value,
            "mse": breakdown.mse_term,
            "anchor": breakdown.anchor_term,
            "terminal": breakdown.terminal_term,
            "rounding": breakdown.rounding_nll,
            "lr": lr,
        }
        if cfg.adaptive_schedule and step % cfg.schedule_update_interval == 0:
            before = self.sched.alpha_bar
            self.sched = adapt(self.sched, self.ledger, cfg.schedule_stride)
            moved = int((~np.all(np.isclose(before, self.sched.alpha_bar), axis=0)).sum())
            self._log({"step": step, "event": "schedule_update", "positions_updated": moved})
        if cfg.log_interval and step % cfg.log_interval == 0:
            self._log(record)
        return record

    def train(self, steps: int | None = None) -> dict:
        """Run up to `steps` (default: through cfg.max_steps); returns the
        last log record."""
        cfg = self.cfg
        target = cfg.max_steps if steps is None else min(cfg.max_steps, self.step + steps)
        (self.out_dir / "config.json").write_text(self.cfg.to_json(), encoding="utf-8")
        record: dict = {}
        while self.step < target:
            record = self.train_step()
            if self.step % cfg.checkpoint_interval == 0 or self.step == target:
                self.save_checkpoint(self.out_dir / "last.ckpt")
            if cfg.dev_eval_interval and self.step % cfg.dev_eval_interval == 0:
                score = self.dev_bleu()
                self._log({"step": self.step, "event": "dev_eval", "bleu": score})
                if score > self.best_dev_bleu:
                    self.best_dev_bleu = score
                    self.save_checkpoint(self.out_dir / "best.ckpt")
        return record

    def dev_bleu(self, sample_count: int | None = None) -> float:
        """Mean sentence BLEU over (a prefix of) the dev pairs."""
        if not self.dev_texts:
            return 0.0
        count = sample_count or self.cfg.dev_eval_samples
        subset = self.dev_texts[:count]
        scores = []
        sample_cfg = SampleConfig(
            seed=self.cfg.seed,
            self_conditioning=self.cfg.self_conditioning,
            clamp=self.cfg.clamp,
        )
        for src, ref in subset:
            out = generate(src, self.model, self.sched, self.vocab, sample_cfg)
            scores.append(bleu(out.tokens, ref.lower().split()))
        return sum(scores) / len(scores)

    # -- persistence ---------------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        blocks: OrderedDict[str, np.ndarray | dict] = OrderedDict()
        blocks["meta"] = {
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "step": self.step,
            "optimizer_step": self.optimizer.state.step_count,
            "best_dev_bleu": self.best_dev_bleu,
            "vocab": [self.vocab.token_of(i) for i in range(len(self.vocab))],
        }
        for name, tensor in self.model.params.items():
            blocks[f"param/{name}"] = tensor.data
        for name, moment in self.optimizer.state.first_moment.items():
            blocks[f"opt.m/{name}"] = moment
        for name, moment in self.optimizer.state.second_moment.items():
            blocks[f"opt.v/{name}"] = moment
        blocks["schedule/alpha_bar"] = self.sched.alpha_bar
        blocks["ledger/values"] = self.ledger.values
        blocks["ledger/counts"] = self.ledger.counts
        write_blocks(path, blocks)

    @classmethod
    def from_checkpoint(cls, path: str | Path, cfg: RunConfig | None = None) -> "Trainer":
        """Rebuild a trainer mid-run.  When a config is passed explicitly
        its digest must match the checkpoint's."""
        blocks = read_blocks(path)
        meta = blocks["meta"]
        stored = RunConfig.from_dict(meta["config"])
        if cfg is not None and cfg.digest() != meta["config_digest"]:
            raise CheckpointError(
                "config digest mismatch: checkpoint was written by a different configuration"
            )
        trainer = cls(stored)
        trainer.vocab = Vocabulary(meta["vocab"])
        # Re-encode with the restored vocabulary; ids must match the run
        # that wrote the checkpoint even if the data files have drifted.
        trainer.train_pairs = trainer._encode_all(_load_texts(stored, "train"))
        if trainer.dev_texts:
            trainer.dev_pairs = trainer._encode_all(trainer.dev_texts)
        trainer.step = int(meta["step"])
        trainer.best_dev_bleu = float(meta["best_dev_bleu"])
        for name, tensor in trainer.model.params.items():
            tensor.data = np.array(blocks[f"param/{name}"], dtype=tensor.data.dtype)
        state = trainer.optimizer.state
        state.step_count = int(meta["optimizer_step"])
        for name in trainer.model.params:
            state.first_moment[name] = np.array(blocks[f"opt.m/{name}"])
            state.second_moment[name] = np.array(blocks[f"opt.v/{name}"])
        trainer.sched = NoiseSchedule(
            np.array(blocks["schedule/alpha_bar"]), alpha_min=stored.alpha_min
        )
        trainer.ledger = LossLedger(stored.time_steps, stored.max_target_len, decay=stored.ledger_decay)
        trainer.ledger.values = np.array(blocks["ledger/values"])
        trainer.ledger.counts = np.array(blocks["ledger/counts"])
        return trainer


def load_model(path: str | Path) -> tuple[Denoiser, NoiseSchedule, Vocabulary, RunConfig, LossLedger]:
    """Inference-side checkpoint loading (no optimizer state required)."""
    blocks = read_blocks(path)
    meta = blocks["meta"]
    cfg = RunConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"])
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    model_cfg = DenoiserConfig(
        vocab_size=len(vocab),
        d=cfg.embed_dim,
        hidden=cfg.hidden_dim,
        ffn=cfg.ffn_dim,
        heads=cfg.heads,
        encoder_layers=cfg.encoder_layers,
        decoder_layers=cfg.decoder_layers,
        max_source_len=cfg.max_source_len,
        n=cfg.max_target_len,
        T=cfg.time_steps,
        dropout=cfg.dropout,
    )
    params = {}
    for name, value in blocks.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = Tensor(np.array(value, dtype=dtype), requires_grad=True)
    model = Denoiser(model_cfg, params)
    sched = NoiseSchedule(np.array(blocks["schedule/alpha_bar"]), alpha_min=cfg.alpha_min)
    ledger = LossLedger(cfg.time_steps, cfg.max_target_len, decay=cfg.ledger_decay)
    ledger.values = np.array(blocks["ledger/values"])
    ledger.counts = np.array(blocks["ledger/counts"])
    return model, sched, vocab, cfg, ledger
