import logging
import math
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from core import ndauto as nd
from core.checkpoint import TrainingState, load_checkpoint, save_checkpoint
from core.config_manager import TrainRunConfig
from core.data import (BatchPrefetcher, LmBatch, collate_responses, eval_windows, load_corpus,
                       load_preference_dataset, load_sft_dataset, minibatches, sample_lm_batch)
from core.errors import ConfigurationError, NumericError
from core.log_handler import METRICS_LOGGER
from core.model import JetMoeModel, build_model, greedy_decode
from core.ndauto import Tensor
from core.objectives import (PreferenceBatch, aux_loss_means, batch_sequence_logprobs, dpo_loss,
                             implicit_reward_margin, lm_cross_entropy, weighted_total)
from core.optim import AdamW, clip_grad_norm, wsd_lr

logger = logging.getLogger(__name__)
metrics_logger = logging.getLogger(METRICS_LOGGER)

SAMPLE_PROMPT_TOKENS = 8
SAMPLE_TOKENS = 32
EVAL_BATCH_SIZE = 8


def _checkpoint_name(stage: str, step: int) -> str:
    return f"{stage}_{step:06d}.ckpt"


class TrainingManager:
    """
    Runs the pretraining, SFT, DPO and evaluation jobs for one run config.
    Checkpoints go to ``cfg.out_dir``; per-step metrics go to the metrics logger.
    """

    def __init__(self, cfg: TrainRunConfig):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.is_training = False
        self.current_job: Optional[Dict[str, Any]] = None
        self.job_history: List[Dict[str, Any]] = []

    # ------------------------------------------------------------------
    # job bookkeeping
    # ------------------------------------------------------------------

    def _start_job(self, name: str, **details) -> None:
        self.is_training = True
        self.current_job = {"name": name, "status": "running", "started": time.time(), **details}
        logger.info(f"Starting {name} job")

    def _finish_job(self, status: str, **details) -> None:
        job = self.current_job or {}
        job.update(status=status, finished=time.time(), **details)
        self.job_history.append(job)
        self.current_job = None
        self.is_training = False
        logger.info(f"{job.get('name', 'job')} {status}")

    def get_status(self) -> Dict[str, Any]:
        return {"is_training": self.is_training, "current_job": self.current_job,
                "history": list(self.job_history)}

    def _emit(self, record: Dict[str, Any]) -> None:
        metrics_logger.info(record.get("stage", "metrics"), extra={"metrics": record})

    def _new_optimizer(self) -> AdamW:
        c = self.cfg
        return AdamW(beta1=c.beta1, beta2=c.beta2, eps=c.eps, weight_decay=c.weight_decay)

    def _check_config(self, model: JetMoeModel, source) -> None:
        if model.cfg != self.cfg.model:
            raise ConfigurationError(
                f"{source} was trained with {model.cfg.to_dict()}, run config has {self.cfg.model.to_dict()}"
            )

    # ------------------------------------------------------------------
    # one optimizer step
    # ------------------------------------------------------------------

    def _apply_update(self, model: JetMoeModel, optimizer: AdamW, loss: Tensor, lr: float) -> float:
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"loss became {value}")
        nd.backward(loss)
        grads = model.grads()
        scale = clip_grad_norm(grads, self.cfg.clip_norm)
        optimizer.step(model.state_arrays(), grads, lr)
        return scale

    def lm_step(self, model: JetMoeModel, optimizer: AdamW, batch: LmBatch, lr: float) -> Dict[str, Any]:
        """Masked LM loss plus router aux losses, backward, clip, AdamW."""
        tape = nd.Tape()
        tape.watch_all(model.parameters())
        try:
            logits, aux = model.forward(batch.inputs)
            router_logits = [s.logits for s in aux]
            lm = lm_cross_entropy(logits, batch.targets, batch.mask)
            mean_b, mean_z = aux_loss_means(aux, router_logits)
            total = weighted_total(lm, mean_b, mean_z, model.cfg.loss_weights)
            scale = self._apply_update(model, optimizer, total, lr)
        finally:
            tape.release()
        return {
            "lm_loss": lm.item(),
            "balance_loss": mean_b.item(),
            "z_loss": mean_z.item(),
            "total_loss": total.item(),
            "lr": lr,
            "clip_scale": scale,
            "dispatch": [s.f.data.tolist() for s in aux],
        }

    # ------------------------------------------------------------------
    # pretraining
    # ------------------------------------------------------------------

    def pretrain(self, resume: Optional[str] = None, sample_tokens: int = SAMPLE_TOKENS) -> JetMoeModel:
        cfg = self.cfg
        if resume:
            model, training = load_checkpoint(resume)
            self._check_config(model, resume)
            optimizer = training.optimizer or self._new_optimizer()
            start = training.step
            seed = int(training.rng_state.get("seed", cfg.seed))
            logger.info(f"Resuming from {resume} at step {start}")
        else:
            model = build_model(cfg.model, cfg.seed)
            optimizer = self._new_optimizer()
            start, seed = 0, cfg.seed

        corpus = load_corpus(cfg.corpus)
        phase2 = load_corpus(cfg.phase2_corpus) if cfg.phase2_corpus else None
        swap = cfg.swap_step

        def make_batch(step: int) -> LmBatch:
            source = phase2 if phase2 is not None and step >= swap else corpus
            return sample_lm_batch(source, seed, step, cfg.batch_size, cfg.seq_len)

        self._start_job("pretrain", start_step=start, steps=cfg.steps)
        t0 = time.perf_counter()
        step = start
        prefetcher = BatchPrefetcher(make_batch, start, cfg.steps, cfg.prefetch)
        try:
            bar = tqdm(prefetcher, total=max(cfg.steps - start, 0), desc="pretrain", disable=not cfg.progress)
            for step, batch in bar:
                tick = time.perf_counter()
                if swap is not None and step == swap:
                    logger.info(f"Switching to phase-2 corpus {cfg.phase2_corpus} at step {step}")
                record = self.lm_step(model, optimizer, batch, wsd_lr(step, cfg.schedule))
                elapsed = time.perf_counter() - tick
                done = step + 1
                if step % cfg.log_interval == 0 or done == cfg.steps:
                    self._emit({"stage": "pretrain", "step": step, **record,
                                "tokens_per_sec": batch.inputs.size / max(elapsed, 1e-9),
                                "wall_time": time.perf_counter() - t0})
                bar.set_postfix(loss=f"{record['total_loss']:.4f}", lr=f"{record['lr']:.2e}")
                if done % cfg.checkpoint_interval == 0 and done < cfg.steps:
                    self._save(model, optimizer, done, seed, _checkpoint_name("pretrain", done))
            final = self._save(model, optimizer, max(cfg.steps, start), seed, "pretrain_final.ckpt")
        except Exception as e:
            self._finish_job("failed", error=str(e), step=step)
            raise
        finally:
            prefetcher.close()
        self._finish_job("completed", checkpoint=str(final))

        if sample_tokens > 0:
            prompt = corpus[:min(SAMPLE_PROMPT_TOKENS, cfg.model.max_positions)]
            sample = greedy_decode(model, prompt, sample_tokens)
            logger.info(f"Sample: {bytes(sample.astype(np.uint8).tolist()).decode('utf-8', errors='replace')!r}")
        return model

    def _save(self, model: JetMoeModel, optimizer: AdamW, step: int, seed: int, name: str) -> Path:
        training = TrainingState(optimizer=optimizer, step=step, rng_state={"seed": seed, "next_step": step})
        return save_checkpoint(model, self.out_dir / name, training)

    # ------------------------------------------------------------------
    # fine-tuning
    # ------------------------------------------------------------------

    def _load_or_build(self, path: Optional[str]) -> JetMoeModel:
        if not path:
            logger.warning("No initial checkpoint given; fine-tuning a freshly initialized model")
            return build_model(self.cfg.model, self.cfg.seed)
        model, _ = load_checkpoint(path)
        self._check_config(model, path)
        return model

    def sft(self, dataset: Optional[str] = None, init: Optional[str] = None) -> JetMoeModel:
        """Distilled SFT: response-masked LM loss at a constant learning rate."""
        stage = self.cfg.sft
        model = self._load_or_build(init or stage.init)
        examples = load_sft_dataset(dataset or stage.dataset, model.cfg.vocab_size, model.cfg.max_positions)
        batches = minibatches(len(examples), stage.batch_size, stage.epochs, self.cfg.seed)
        optimizer = self._new_optimizer()

        self._start_job("sft", examples=len(examples), steps=len(batches))
        t0 = time.perf_counter()
        try:
            for step, idx in enumerate(tqdm(batches, desc="sft", disable=not self.cfg.progress)):
                tick = time.perf_counter()
                batch = collate_responses([(examples[i].prompt, examples[i].response) for i in idx])
                record = self.lm_step(model, optimizer, batch, stage.lr)
                elapsed = time.perf_counter() - tick
                if step % self.cfg.log_interval == 0 or step == len(batches) - 1:
                    self._emit({"stage": "sft", "step": step, **record,
                                "tokens_per_sec": batch.inputs.size / max(elapsed, 1e-9),
                                "wall_time": time.perf_counter() - t0})
            final = save_checkpoint(model, self.out_dir / "sft_final.ckpt",
                                    TrainingState(optimizer=optimizer, step=len(batches)))
        except Exception as e:
            self._finish_job("failed", error=str(e))
            raise
        self._finish_job("completed", checkpoint=str(final))
        return model

    @staticmethod
    def sequence_logprobs(model: JetMoeModel, batch: LmBatch) -> Tensor:
        logits, _ = model.forward(batch.inputs)
        return batch_sequence_logprobs(logits, batch.targets, batch.mask)

    def dpo(self, dataset: Optional[str] = None, reference: Optional[str] = None,
            init: Optional[str] = None) -> JetMoeModel:
        """Distilled DPO against a frozen reference; the policy starts from the reference unless ``init`` is set."""
        stage = self.cfg.dpo
        ref_path = reference or stage.reference
        if not ref_path:
            raise ConfigurationError("dpo needs a reference checkpoint (--reference or dpo.reference)")
        ref_model, _ = load_checkpoint(ref_path)
        self._check_config(ref_model, ref_path)
        if init or stage.init:
            policy, _ = load_checkpoint(init or stage.init)
            if policy.cfg != ref_model.cfg:
                raise ConfigurationError("policy and reference checkpoints have different model configs")
        else:
            policy = ref_model.copy()

        examples = load_preference_dataset(dataset or stage.dataset, policy.cfg.vocab_size,
                                           policy.cfg.max_positions)
        batches = minibatches(len(examples), stage.batch_size, stage.epochs, self.cfg.seed)
        optimizer = self._new_optimizer()

        self._start_job("dpo", pairs=len(examples), steps=len(batches))
        t0 = time.perf_counter()
        try:
            for step, idx in enumerate(tqdm(batches, desc="dpo", disable=not self.cfg.progress)):
                tick = time.perf_counter()
                chosen = collate_responses([(examples[i].prompt, examples[i].chosen) for i in idx])
                rejected = collate_responses([(examples[i].prompt, examples[i].rejected) for i in idx])
                # reference runs without a tape, so its log-probabilities are constants
                ref_chosen = self.sequence_logprobs(ref_model, chosen)
                ref_rejected = self.sequence_logprobs(ref_model, rejected)

                tape = nd.Tape()
                tape.watch_all(policy.parameters())
                try:
                    pb = PreferenceBatch(self.sequence_logprobs(policy, chosen),
                                         self.sequence_logprobs(policy, rejected),
                                         ref_chosen, ref_rejected, eta=stage.eta)
                    loss = dpo_loss(pb)
                    margin = implicit_reward_margin(pb).data
                    scale = self._apply_update(policy, optimizer, loss, stage.lr)
                finally:
                    tape.release()

                elapsed = time.perf_counter() - tick
                if step % self.cfg.log_interval == 0 or step == len(batches) - 1:
                    self._emit({"stage": "dpo", "step": step, "dpo_loss": loss.item(), "lr": stage.lr,
                                "clip_scale": scale, "reward_margin": float(margin.mean()),
                                "preference_accuracy": float((margin > 0).mean()),
                                "tokens_per_sec": (chosen.inputs.size + rejected.inputs.size) / max(elapsed, 1e-9),
                                "wall_time": time.perf_counter() - t0})
            final = save_checkpoint(policy, self.out_dir / "dpo_final.ckpt",
                                    TrainingState(optimizer=optimizer, step=len(batches)))
        except Exception as e:
            self._finish_job("failed", error=str(e))
            raise
        self._finish_job("completed", checkpoint=str(final))
        return policy

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def eval_perplexity(self, checkpoint: str, corpus_path: Optional[str] = None) -> Dict[str, float]:
        """Token-weighted mean NLL and perplexity over non-overlapping windows of the corpus."""
        model, _ = load_checkpoint(checkpoint)
        corpus = load_corpus(corpus_path or self.cfg.corpus)
        seq_len = min(self.cfg.seq_len, model.cfg.max_positions)
        inputs, targets = eval_windows(corpus, seq_len)
        nll, count = 0.0, 0
        for i in tqdm(range(0, inputs.shape[0], EVAL_BATCH_SIZE), desc="eval", disable=not self.cfg.progress):
            x, y = inputs[i:i + EVAL_BATCH_SIZE], targets[i:i + EVAL_BATCH_SIZE]
            logits, _ = model.forward(x)
            nll += lm_cross_entropy(logits, y).item() * y.size
            count += y.size
        loss = nll / count
        result = {"loss": loss, "perplexity": math.exp(loss), "tokens": float(count)}
        self._emit({"stage": "eval", "step": 0, **result})
        logger.info(f"Eval {checkpoint}: loss {loss:.4f}, perplexity {result['perplexity']:.3f} over {count} tokens")
        return result
