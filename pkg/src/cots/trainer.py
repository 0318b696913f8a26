"""One training step per the filter-then-loss-then-push protocol, plus the run loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PairedSample, derive_seed
from .encoders import (
    EncoderConfig,
    MomentumState,
    TwoStreamModel,
    encode_batch,
    init_model,
    momentum_encode_batch,
    momentum_update,
    pad_batch,
    predict_masked_text_batch,
    predict_masked_vision_batch,
    save_checkpoint,
)
from .errors import ConfigError, NotReadyError, ParameterError
from .objectives import LossBreakdown, LossWeights, loss_cmlm, loss_cmvm, loss_i2t, loss_t2i, loss_task, total_loss
from .queues import AmfStats, NegativeQueuePair, amf_stats, filter_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    m: float = 0.99
    tau: float = 0.05
    queue_size: int = 256
    batch_size: int = 32
    epochs: int = 10
    base_lr: float = 3e-4  # desk-scale; 5e-5 is tuned for 15M pairs and large encoders
    warmup_epochs_at_base: int = 5
    weight_decay: float = 0.02
    vision_mask_rate: float = 0.40
    text_mask_rate: float = 0.15
    amf_enabled: bool = True
    amf_k: float = 2.0
    amf_warmup_min: int = 100
    w_inst: float = 1.0
    w_cmvm: float = 1.0
    w_cmlm: float = 1.0
    w_task: float = 1.0
    contrastive_from_masked: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.m <= 1.0:
            raise ConfigError("m must be in [0, 1]")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 1 or self.batch_size > self.queue_size:
            raise ConfigError("need 1 <= batch_size <= queue_size")
        for name in ("vision_mask_rate", "text_mask_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_inst, self.w_cmvm, self.w_cmlm, self.w_task)


@dataclass
class StepResult:
    breakdown: LossBreakdown
    kept: list[int]
    skipped: bool
    queue_len: int
    amf: AmfStats | None
    lr: float


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0, beta1, beta2, eps)


def adam_update(opt: OptimizerState, params: Sequence[T.Tensor], lr: float, weight_decay: float) -> None:
    """Adam with decoupled weight decay. Parameters without a gradient are skipped."""
    if len(params) != len(opt.m):
        raise ParameterError("optimizer state does not match parameter list")
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for p, m, v in zip(params, opt.m, opt.v):
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape or m.shape != p.data.shape:
            raise ParameterError("gradient/accumulator shape mismatch")
        g = p.grad
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Constant ``base_lr`` for the first epochs, then linear decay to 0 at the final step."""
    total = steps_per_epoch * cfg.epochs
    decay_start = steps_per_epoch * cfg.warmup_epochs_at_base
    last = total - 1
    if step < decay_start or decay_start >= last:
        return cfg.base_lr
    return cfg.base_lr * max(0.0, (last - step) / (last - decay_start))


# ---------------------------------------------------------------- masking


def sample_masks(sample: PairedSample, cfg: TrainConfig, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Vision: exactly ``round(rate * P)`` positions; text: Bernoulli per token, re-drawn once if empty."""
    p = len(sample.image_tokens)
    n_vis = int(round(cfg.vision_mask_rate * p))
    vision = sorted(int(i) for i in rng.choice(p, size=n_vis, replace=False)) if n_vis else []
    text: list[int] = []
    if cfg.text_mask_rate > 0:
        n = len(sample.text_tokens)
        for _ in range(2):
            text = [int(i) for i in np.flatnonzero(rng.random(n) < cfg.text_mask_rate)]
            if text:
                break
    return vision, text


# ---------------------------------------------------------------- step


@dataclass
class Trainer:
    """Mutable training state: model, momentum twins, queues, optimizer, RNG."""

    model: TwoStreamModel
    momentum: MomentumState
    queues: NegativeQueuePair
    optimizer: OptimizerState
    cfg: TrainConfig
    mask_rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, cfg: TrainConfig) -> Trainer:
        cfg.validate()
        model, momentum = init_model(enc_cfg, derive_seed(cfg.seed, "init"))
        params = model.parameters()
        return cls(
            model=model,
            momentum=momentum,
            queues=NegativeQueuePair(cfg.queue_size, enc_cfg.d_out),
            optimizer=OptimizerState.for_params(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            cfg=cfg,
            mask_rng=np.random.default_rng(derive_seed(cfg.seed, "masks")),
        )


def _encode_twice(model, stream, tokens, lengths, mask, need_masked: bool, from_masked: bool):
    """Online globals (clean pass) and states (masked pass), batched as one call."""
    params = model.stream(stream)
    cfg = model.config
    b = tokens.shape[0]
    if not need_masked:
        glob, _ = encode_batch(params, cfg, tokens, lengths)
        return glob, None
    if from_masked:
        return encode_batch(params, cfg, tokens, lengths, mask)
    both_mask = np.concatenate([mask, np.zeros_like(mask)], axis=0)
    glob, states = encode_batch(
        params, cfg, np.concatenate([tokens, tokens]), np.concatenate([lengths, lengths]), both_mask
    )
    return T.index(glob, slice(b, 2 * b)), T.index(states, slice(0, b))


def train_step(trainer: Trainer, batch: Sequence[PairedSample], lr: float) -> StepResult:
    """Run one iteration; the queue receives every sample of ``batch`` regardless of filtering.

    Order: momentum-encode the batch, filter (when the queue is warm), mask,
    online-encode the kept samples, compute losses against a queue snapshot,
    Adam step, EMA update, push.
    """
    cfg, model, enc_cfg = trainer.cfg, trainer.model, trainer.model.config
    if len(batch) == 0:
        raise ValueError("empty batch")
    img_tok, img_len = pad_batch([s.image_tokens for s in batch], enc_cfg.max_len)
    txt_tok, txt_len = pad_batch([s.text_tokens for s in batch], enc_cfg.max_len)

    # (1) momentum features of the full batch
    mom_v = momentum_encode_batch(trainer.momentum, "vision", enc_cfg, img_tok, img_len)
    mom_l = momentum_encode_batch(trainer.momentum, "text", enc_cfg, txt_tok, txt_len)

    # (2) adaptive filter
    stats = None
    kept = list(range(len(batch)))
    if cfg.amf_enabled:
        try:
            stats = amf_stats(trainer.queues, cfg.amf_k, cfg.amf_warmup_min)
            kept = filter_batch(mom_v, mom_l, stats.threshold)
        except NotReadyError:
            pass

    breakdown = LossBreakdown(kept_fraction=len(kept) / len(batch))
    skipped = not kept
    if kept:
        k = np.asarray(kept)
        w = cfg.weights
        need_vis = w.cmvm != 0.0 and cfg.vision_mask_rate > 0
        need_txt = w.cmlm != 0.0 and cfg.text_mask_rate > 0
        # (3) masks for B*
        vis_mask = np.zeros((k.size, img_tok.shape[1]), dtype=bool)
        txt_mask = np.zeros((k.size, txt_tok.shape[1]), dtype=bool)
        if need_vis or need_txt:
            for row, i in enumerate(kept):
                vpos, tpos = sample_masks(batch[i], cfg, trainer.mask_rng)
                vis_mask[row, vpos] = True
                txt_mask[row, tpos] = True
        need_vis = need_vis and vis_mask.any()
        need_txt = need_txt and txt_mask.any()
        neg_v, neg_l = trainer.queues.snapshot()

        with T.Graph() as graph:
            # (4) online encoding of B*
            f_v, s_v = _encode_twice(model, "vision", img_tok[k], img_len[k], vis_mask, need_vis, cfg.contrastive_from_masked)
            f_l, s_l = _encode_twice(model, "text", txt_tok[k], txt_len[k], txt_mask, need_txt, cfg.contrastive_from_masked)
            # (5) losses against the snapshot
            parts = {}
            if w.inst != 0.0:
                parts["l_i2t"] = loss_i2t(f_v, mom_l[k], neg_l, cfg.tau)
                parts["l_t2i"] = loss_t2i(f_l, mom_v[k], neg_v, cfg.tau)
            if w.task != 0.0:
                parts["l_task"] = loss_task(f_v, mom_l[k], neg_l, f_l, mom_v[k], neg_v, cfg.tau)
            if need_vis:
                logits = predict_masked_vision_batch(model, s_v, vis_mask, f_l)
                parts["l_cmvm"] = loss_cmvm(logits, img_tok[k][vis_mask])
            if need_txt:
                logits = predict_masked_text_batch(model, s_l, txt_mask, f_v)
                parts["l_cmlm"] = loss_cmlm(logits, txt_tok[k][txt_mask])
            total, breakdown = total_loss(weights=w, kept_fraction=len(kept) / len(batch), **parts)
        # (6) gradient step
        model.zero_grad()
        graph.backward(total)
        adam_update(trainer.optimizer, model.parameters(), lr, cfg.weight_decay)

    # (7) EMA and (8) push all of B
    momentum_update(model, trainer.momentum, cfg.m)
    trainer.queues.push_batch(mom_v, mom_l)
    trainer.step += 1
    return StepResult(breakdown, kept, skipped, len(trainer.queues), stats, lr)


# ---------------------------------------------------------------- run loop


@dataclass
class TrainResult:
    trainer: Trainer
    records: list[dict] = field(default_factory=list)
    dropped: list[list[int]] = field(default_factory=list)  # corpus indices dropped by AMF, per epoch
    skipped_steps: int = 0


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def step_record(step: int, epoch: int, res: StepResult) -> dict:
    bd = res.breakdown
    return {
        "step": step,
        "epoch": epoch,
        "lr": res.lr,
        "l_i2t": bd.l_i2t,
        "l_t2i": bd.l_t2i,
        "l_inst": bd.l_inst,
        "l_task": bd.l_task,
        "l_cmvm": bd.l_cmvm,
        "l_cmlm": bd.l_cmlm,
        "total": bd.total,
        "kept_fraction": bd.kept_fraction,
        "queue_len": res.queue_len,
        "amf_mu": None if res.amf is None else res.amf.mu,
        "amf_sigma": None if res.amf is None else res.amf.sigma,
        "amf_threshold": None if res.amf is None else res.amf.threshold,
        "skipped": res.skipped,
    }


def run_training(
    cfg: TrainConfig,
    corpus: Sequence[PairedSample],
    enc_cfg: EncoderConfig | None = None,
    out_dir=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train from scratch. With ``out_dir``, writes ``metrics.jsonl`` and ``checkpoint.npz``."""
    if not corpus:
        raise ValueError("corpus is empty")
    cfg.validate()
    if enc_cfg is None:
        enc_cfg = EncoderConfig()
    trainer = Trainer.create(enc_cfg, cfg)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    spe = steps_per_epoch(len(corpus), cfg.batch_size)
    result = TrainResult(trainer)

    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        try:
            log_file = open(out / "metrics.jsonl", "w", encoding="utf-8")
        except OSError as e:
            raise OSError(f"cannot open metrics log in {out}: {e}") from e
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(corpus))
            dropped: list[int] = []
            for b in range(spe):
                if max_steps is not None and trainer.step >= max_steps:
                    break
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                step = trainer.step
                res = train_step(trainer, [corpus[i] for i in idx], lr_at(step, cfg, spe))
                kept = set(res.kept)
                dropped.extend(int(idx[j]) for j in range(len(idx)) if j not in kept)
                result.skipped_steps += res.skipped
                if step % cfg.log_every == 0 or step == spe * cfg.epochs - 1:
                    rec = step_record(step, epoch, res)
                    result.records.append(rec)
                    if log_file is not None:
                        log_file.write(json.dumps(rec) + "\n")
            result.dropped.append(dropped)
            log.info("epoch %d done: step %d, dropped %d", epoch, trainer.step, len(dropped))
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.npz", trainer.model, trainer.momentum, trainer.step,
                        extra={"train": asdict(cfg)})
    return result
