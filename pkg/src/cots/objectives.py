"""Loss functions: queue-contrastive, symmetric-KL task alignment, masked-token CE.

All contrastive quantities are built from one logits layout per direction:
column 0 is the positive pair, columns 1..L are the queue negatives in arrival
order. Because the two queues are index-aligned, column j means the same
queued pair in both directions, which is what makes the task-level KL
meaningful.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, PreconditionError
from .tensor import Tensor


@dataclass
class LossWeights:
    inst: float = 1.0
    cmvm: float = 1.0
    cmlm: float = 1.0
    task: float = 1.0

    @classmethod
    def from_triple(cls, inst: float, token: float, task: float) -> LossWeights:
        return cls(inst=inst, cmvm=token, cmlm=token, task=task)


@dataclass
class LossBreakdown:
    l_i2t: float = 0.0
    l_t2i: float = 0.0
    l_inst: float = 0.0
    l_task: float = 0.0
    l_cmvm: float = 0.0
    l_cmlm: float = 0.0
    l_token: float = 0.0
    total: float = 0.0
    kept_fraction: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskDistributions:
    d_i2t: np.ndarray
    d_t2i: np.ndarray


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def contrastive_logits(f_query: Tensor, f_hat_pos, negatives, tau: float) -> Tensor:
    """``[N, 1 + L]`` scaled similarities: positive first, then queue entries."""
    _check_tau(tau)
    f_hat_pos = np.asarray(getattr(f_hat_pos, "data", f_hat_pos), dtype=np.float64)
    negatives = np.asarray(getattr(negatives, "data", negatives), dtype=np.float64)
    pos = T.sum(T.mul(f_query, f_hat_pos), axis=1, keepdims=True)
    if negatives.shape[0] == 0:
        return T.scale(pos, 1.0 / tau)
    neg = T.matmul(f_query, negatives.T)
    return T.scale(T.concat([pos, neg], axis=1), 1.0 / tau)


def _info_nce(logits: Tensor) -> Tensor:
    pos = T.index(logits, (slice(None), 0))
    return T.mean(T.sub(T.logsumexp(logits, axis=1), pos))


def loss_i2t(f_v, f_hat_l, neg_l, tau: float) -> Tensor:
    """Image-to-text loss against the text queue; gradient reaches ``f_v`` only."""
    return _info_nce(contrastive_logits(T.as_tensor(f_v), f_hat_l, neg_l, tau))


def loss_t2i(f_l, f_hat_v, neg_v, tau: float) -> Tensor:
    return _info_nce(contrastive_logits(T.as_tensor(f_l), f_hat_v, neg_v, tau))


def _check_aligned(neg_a, neg_b) -> None:
    la = np.shape(getattr(neg_a, "data", neg_a))[0]
    lb = np.shape(getattr(neg_b, "data", neg_b))[0]
    if la != lb:
        raise AlignmentError(f"queue lengths differ: {la} vs {lb}")


def task_distributions(f_v_i, f_hat_l_i, neg_l, f_l_i, f_hat_v_i, neg_v, tau: float) -> TaskDistributions:
    """Retrieval distributions of one pair in both directions (length ``1 + L``)."""
    _check_aligned(neg_l, neg_v)

    def row(x):
        return np.atleast_2d(np.asarray(getattr(x, "data", x), dtype=np.float64))

    with T.no_grad():
        lv = contrastive_logits(Tensor(row(f_v_i)), row(f_hat_l_i), neg_l, tau)
        ll = contrastive_logits(Tensor(row(f_l_i)), row(f_hat_v_i), neg_v, tau)
        return TaskDistributions(T.softmax_rows(lv).data[0], T.softmax_rows(ll).data[0])


def symmetric_kl(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Mean over rows of ``KL(p||q) + KL(q||p) = sum (p - q)(log p - log q)``."""
    if logits_a.shape != logits_b.shape:
        raise AlignmentError(f"distribution shapes differ: {logits_a.shape} vs {logits_b.shape}")
    lp = T.log_softmax_rows(logits_a)
    lq = T.log_softmax_rows(logits_b)
    diff = T.mul(T.sub(T.exp(lp), T.exp(lq)), T.sub(lp, lq))
    return T.mean(T.sum(diff, axis=1))


def loss_task(f_v, f_hat_l, neg_l, f_l, f_hat_v, neg_v, tau: float) -> Tensor:
    """Symmetric KL between the image-to-text and text-to-image distributions."""
    _check_aligned(neg_l, neg_v)
    return symmetric_kl(
        contrastive_logits(T.as_tensor(f_v), f_hat_l, neg_l, tau),
        contrastive_logits(T.as_tensor(f_l), f_hat_v, neg_v, tau),
    )


def loss_task_from_distributions(d_i2t: np.ndarray, d_t2i: np.ndarray) -> float:
    """Same quantity evaluated on explicit probability rows."""
    p = np.atleast_2d(np.asarray(d_i2t, dtype=np.float64))
    q = np.atleast_2d(np.asarray(d_t2i, dtype=np.float64))
    if p.shape != q.shape:
        raise AlignmentError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return float(np.mean(np.sum((p - q) * (np.log(p) - np.log(q)), axis=1)))


def masked_token_loss(logits, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size == 0 or logits.shape[0] == 0:
        raise PreconditionError("masked-token loss needs at least one masked position")
    if targets.size != logits.shape[0]:
        raise AlignmentError("one target per logits row required")
    vocab = logits.shape[1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    return T.scale(T.mean(T.pick(T.log_softmax_rows(logits), targets)), -1.0)


loss_cmvm = masked_token_loss
loss_cmlm = masked_token_loss


def total_loss(
    l_i2t: Tensor | None = None,
    l_t2i: Tensor | None = None,
    l_task: Tensor | None = None,
    l_cmvm: Tensor | None = None,
    l_cmlm: Tensor | None = None,
    weights: LossWeights | None = None,
    kept_fraction: float = 1.0,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the available components plus a float breakdown.

    Missing components count as zero. The breakdown reports unweighted
    component values; ``total`` is the weighted objective that is minimized.
    """
    w = weights or LossWeights()
    terms = []
    for value, weight in ((l_i2t, w.inst), (l_t2i, w.inst), (l_task, w.task), (l_cmvm, w.cmvm), (l_cmlm, w.cmlm)):
        if value is not None and weight != 0.0:
            terms.append(value if weight == 1.0 else T.scale(value, weight))
    total = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        total = T.add(total, t)

    def f(x):
        return 0.0 if x is None else x.item()

    bd = LossBreakdown(
        l_i2t=f(l_i2t),
        l_t2i=f(l_t2i),
        l_task=f(l_task),
        l_cmvm=f(l_cmvm),
        l_cmlm=f(l_cmlm),
        kept_fraction=float(kept_fraction),
    )
    bd.l_inst = bd.l_i2t + bd.l_t2i
    bd.l_token = bd.l_cmvm + bd.l_cmlm
    bd.total = total.item()
    return total, bd
