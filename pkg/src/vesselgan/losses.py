"""Discriminator and generator objectives for the K+1-class semi-supervised GAN.

Logits cover the K = 2 semantic classes only; the fake-class logit is pinned
at zero. With ``s(x) = logsumexp_k l_k(x)`` the probability of being real is
``D(x) = exp(s) / (exp(s) + 1) = sigmoid(s)``, so ``log D = -softplus(-s)`` and
``log(1 - D) = -softplus(s)``.

Logit tensors are (N, K) for the center-pixel head or (N, K, H, W) for the
structured head; per-pixel terms are averaged over the patch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import NumericError, ShapeError

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)
_LOG_CEIL = math.log1p(-PROB_FLOOR)


def _tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _clamp_log(logp: torch.Tensor) -> torch.Tensor:
    return logp.clamp(_LOG_FLOOR, _LOG_CEIL)


def semantic_logsumexp(logits: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(logits, dim=1)


def real_probability(logits) -> torch.Tensor:
    """``D(x) = sum_k exp(l_k) / (sum_k exp(l_k) + 1)`` with the fake logit fixed at 0.

    The largest logit ``m`` is factored out: ``sum exp(l_k - m) / (sum exp(l_k - m) + exp(-m))``.
    """
    logits = _tensor(logits)
    if not torch.isfinite(logits).all():
        raise NumericError("logits must be finite")
    m = logits.max(dim=1, keepdim=True).values.clamp_min(0.0)
    num = torch.exp(logits - m).sum(dim=1)
    return num / (num + torch.exp(-m.squeeze(1)))


def log_real_probability(logits: torch.Tensor) -> torch.Tensor:
    return _clamp_log(-F.softplus(-semantic_logsumexp(logits)))


def log_fake_probability(logits: torch.Tensor) -> torch.Tensor:
    return _clamp_log(-F.softplus(semantic_logsumexp(logits)))


def supervised_loss(logits, labels, head: str = "structured") -> torch.Tensor:
    """Mean negative log-likelihood of the true class, conditioned on the input being real.

    ``labels`` are integer classes shaped (N,) for the center-pixel head or
    (N, H, W) for the structured head; a full (N, H, W) grid given to the
    center-pixel head is reduced to its centre pixel.
    """
    logits = _tensor(logits)
    if labels is None:
        raise ShapeError("supervised loss needs labels")
    labels = torch.as_tensor(labels).long()
    if head in ("center_pixel", "cp") and labels.dim() == 3:
        labels = labels[:, labels.shape[1] // 2, labels.shape[2] // 2]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    logp = _clamp_log(torch.log_softmax(logits, dim=1))
    picked = logp.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -picked.mean()


def adversarial_loss(fake_logits) -> torch.Tensor:
    """``-mean log p(fake | G(z)) = -mean log(1 - D(G(z)))``."""
    return -log_fake_probability(_tensor(fake_logits)).mean()


def unsupervised_loss(real_logits) -> torch.Tensor:
    """``-mean log(1 - p(fake | x)) = -mean log D(x)`` on real unlabeled inputs."""
    return -log_real_probability(_tensor(real_logits)).mean()


def generator_loss_vanilla(fake_logits, form: str = "safe") -> torch.Tensor:
    """Adversarial generator objective.

    ``form="safe"`` minimises ``-mean log D(G(z))`` (non-saturating);
    ``form="raw"`` is the literal negated adversarial loss ``mean log(1 - D(G(z)))``.
    """
    fake_logits = _tensor(fake_logits)
    if form == "safe":
        return -log_real_probability(fake_logits).mean()
    if form == "raw":
        return -adversarial_loss(fake_logits)
    raise ValueError(f"form must be 'safe' or 'raw', got {form!r}")


def feature_matching_loss(real_acts, fake_acts) -> torch.Tensor:
    """Squared L2 distance between batch-mean activations of real and generated inputs."""
    real_acts, fake_acts = _tensor(real_acts), _tensor(fake_acts)
    if real_acts.shape[1:] != fake_acts.shape[1:]:
        raise ShapeError(f"activation shapes differ: {tuple(real_acts.shape[1:])} vs {tuple(fake_acts.shape[1:])}")
    diff = real_acts.mean(dim=0) - fake_acts.mean(dim=0)
    return (diff * diff).sum()


@dataclass
class LossReport:
    L_sup: float = 0.0
    L_adv: float = 0.0
    L_unsup: float = 0.0
    L_D: float = 0.0
    L_G: float = 0.0
    n_labeled: int = 0
    n_unlabeled: int = 0
    n_fake: int = 0
    matching_layer: Optional[str] = None
    sup_skipped: bool = False
    step: int = 0
    epoch: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.L_sup, self.L_adv, self.L_unsup, self.L_D, self.L_G))


def discriminator_objective(sup: Optional[torch.Tensor], adv: Optional[torch.Tensor], unsup: Optional[torch.Tensor],
                            weights=(1.0, 1.0, 1.0)):
    """Unweighted (by default) sum of the present terms plus the matching :class:`LossReport` fields."""
    zero = None
    terms = []
    for term, w in zip((sup, adv, unsup), weights):
        if term is not None:
            terms.append(w * term)
            zero = term.new_zeros(())
    if zero is None:
        raise ValueError("discriminator objective needs at least one term")
    total = sum(terms, zero)
    values = [0.0 if t is None else float(w * t.detach()) for t, w in zip((sup, adv, unsup), weights)]
    return total, values
