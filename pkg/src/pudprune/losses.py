"""Objective terms of the combined sparse-retraining loss.

All differentiable terms take and return :class:`Tensor` objects. The L1
penalty on scaling factors is handled outside the graph: its value is
added to the total and ``lam * sign(gamma)`` is added to the gamma
gradients by the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DomainError, NumericError, SizeError
from .layers import log_softmax_temperature, softmax_temperature
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.0
    alpha: float = 0.7
    beta: float = 1e-6
    eta: float = 1e-3
    tau: float = 3.0

    def __post_init__(self):
        for name in ("lam", "alpha", "beta", "eta"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class TeacherOutput:
    """Frozen teacher predictions for a block of examples."""

    softened: np.ndarray  # [M, K], rows sum to 1
    confidence: np.ndarray  # [M]
    raw_logits: np.ndarray  # [M, K]

    @classmethod
    def from_logits(cls, logits: np.ndarray, tau: float, confidence_tau: float | None = None):
        logits = np.asarray(logits, dtype=np.float64)
        soft = softmax_temperature(Tensor(logits), tau).data
        if confidence_tau is None or confidence_tau == tau:
            conf = soft.max(axis=1)
        else:
            conf = confidence(logits, confidence_tau)
        return cls(soft, conf, logits)

    def __len__(self):
        return self.softened.shape[0]


def _logits(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def supervision_loss(student_logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy (natural log) against integer labels."""
    student_logits = _logits(student_logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = student_logits.shape
    if labels.shape != (n,):
        raise SizeError(f"expected {n} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    logp = T.log_softmax(student_logits)
    return T.scale(T.reduce_sum(T.mul(logp, Tensor(onehot))), -1.0 / n)


def confidence(teacher_logits, tau: float) -> np.ndarray:
    """Per-row maximum of the temperature-softened teacher distribution."""
    return softmax_temperature(_logits(teacher_logits).detach(), tau).data.max(axis=1)


def soft_cross_entropy(student_logits: Tensor, target: np.ndarray, tau: float) -> Tensor:
    """Per-row H(target, softmax(student/tau)); ``target`` is a constant."""
    logq = log_softmax_temperature(student_logits, tau)
    return T.neg(T.reduce_sum(T.mul(logq, Tensor(target)), axis=1))


def distillation_loss(student_logits: Tensor, teacher: TeacherOutput, tau: float,
                      weighted: bool = True) -> Tensor:
    """Confidence-weighted mean cross-entropy between softened outputs."""
    student_logits = _logits(student_logits)
    if student_logits.shape[0] != len(teacher):
        raise SizeError(f"{student_logits.shape[0]} student rows vs {len(teacher)} teacher rows")
    if student_logits.shape != teacher.softened.shape:
        raise SizeError("student and teacher class counts differ")
    h = soft_cross_entropy(student_logits, teacher.softened, tau)
    if weighted:
        h = T.mul(h, Tensor(teacher.confidence))
    return T.reduce_mean(h)


def l1_sparsity(gamma_all) -> tuple[float, np.ndarray]:
    g = np.asarray(gamma_all, dtype=np.float64)
    return float(np.abs(g).sum()), np.sign(g)


def _check_prob(d: Tensor, what: str) -> None:
    if d.data.size and (np.any(d.data <= 0.0) or np.any(d.data >= 1.0)):
        raise DomainError(f"{what} discriminator outputs must lie strictly in (0, 1)")


def discriminator_loss(d_labeled: Tensor, d_unlabeled: Tensor, balance: float = 1.0) -> Tensor:
    """-[balance * mean log D(labeled) + mean log(1 - D(unlabeled))]."""
    d_labeled, d_unlabeled = _logits(d_labeled), _logits(d_unlabeled)
    if not balance > 0:
        raise ConfigError("balance must be positive")
    _check_prob(d_labeled, "labeled")
    _check_prob(d_unlabeled, "unlabeled")
    lab = T.reduce_mean(T.log(d_labeled))
    unl = T.reduce_mean(T.log(T.add(T.neg(d_unlabeled), 1.0)))
    return T.neg(T.add(T.scale(lab, balance), unl))


def aligner_loss(d_unlabeled: Tensor, d_labeled: Tensor | None = None) -> Tensor:
    """mean log(1 - D(unlabeled)), minimized by the aligner.

    Passing ``d_labeled`` adds the labeled term of the empirical value
    function as well (the literal two-term variant).
    """
    d_unlabeled = _logits(d_unlabeled)
    _check_prob(d_unlabeled, "unlabeled")
    loss = T.reduce_mean(T.log(T.add(T.neg(d_unlabeled), 1.0)))
    if d_labeled is not None:
        _check_prob(d_labeled, "labeled")
        loss = T.add(loss, T.reduce_mean(T.log(d_labeled)))
    return loss


# Logit-space forms used during training: same values, no saturation at 0/1.

def discriminator_loss_from_logits(z_labeled: Tensor, z_unlabeled: Tensor,
                                   balance: float = 1.0) -> Tensor:
    if not balance > 0:
        raise ConfigError("balance must be positive")
    lab = T.reduce_mean(T.log_sigmoid(z_labeled))
    unl = T.reduce_mean(T.log_sigmoid(T.neg(z_unlabeled)))
    return T.neg(T.add(T.scale(lab, balance), unl))


def aligner_loss_from_logits(z_unlabeled: Tensor, z_labeled: Tensor | None = None) -> Tensor:
    loss = T.reduce_mean(T.log_sigmoid(T.neg(z_unlabeled)))
    if z_labeled is not None:
        loss = T.add(loss, T.reduce_mean(T.log_sigmoid(z_labeled)))
    return loss


def rademacher_loss(outputs: Tensor) -> Tensor:
    """(1/N') * max over classes of the column sums of |outputs|."""
    outputs = _logits(outputs)
    if outputs.ndim != 2 or outputs.shape[0] < 1:
        raise DataError("rademacher_loss needs a non-empty [N', K] batch")
    col = T.reduce_sum(T.absolute(outputs), axis=0)
    return T.scale(T.reduce_max(col), 1.0 / outputs.shape[0])


@dataclass
class LossParts:
    """Individual terms of one minibatch objective (Tensors or floats)."""

    supervision: Tensor | float
    distillation: Tensor | float = 0.0
    adversarial: Tensor | float = 0.0
    rademacher: Tensor | float = 0.0
    l1: float = 0.0

    def values(self) -> dict[str, float]:
        return {name: _value(getattr(self, name))
                for name in ("supervision", "distillation", "adversarial", "rademacher", "l1")}


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """supervision + lam*l1 + alpha*distillation + beta*adversarial + eta*rademacher.

    The l1 part enters as a constant; its subgradient is applied separately.
    """
    for name, v in parts.values().items():
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite ({v})")
    terms = [(1.0, parts.supervision), (weights.alpha, parts.distillation),
             (weights.beta, parts.adversarial), (weights.eta, parts.rademacher)]
    total = None
    const = weights.lam * float(parts.l1)
    for w, term in terms:
        if isinstance(term, Tensor):
            piece = term if w == 1.0 else T.scale(term, w)
            total = piece if total is None else T.add(total, piece)
        else:
            const += w * float(term)
    if total is None:
        return Tensor(np.asarray(const))
    return T.add(total, const) if const != 0.0 else total
