"""Training objectives: reconstruction, skeleton-text KL contrast, classification."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    lam: float = 0.075

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda", "must be nonnegative")


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(name, tuple(b.shape), tuple(a.shape))


def recon_loss(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Batch mean of half the squared L2 error; the target carries no gradient."""
    _same_shape(x0_hat, x0, "features")
    return 0.5 * (x0_hat - x0.detach()).pow(2).sum(dim=-1).mean()


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError("tau", f"temperature must be positive, got {tau}")


def similarity_logits(s: torch.Tensor, l: torch.Tensor, tau: float) -> torch.Tensor:
    _check_tau(tau)
    _same_shape(s, l, "embedding")
    return F.normalize(s, dim=1) @ F.normalize(l, dim=1).T / tau


def similarity_probs(s: torch.Tensor, l: torch.Tensor, tau: float):
    """Row-softmaxed cosine similarities in both directions: (p_s2l, p_l2s)."""
    logits = similarity_logits(s, l, tau)
    return logits.softmax(dim=1), logits.T.softmax(dim=1)


def target_distributions(labels: torch.Tensor, normalize: bool = True):
    """Matching-label targets; rows are probability vectors when ``normalize``."""
    labels = torch.as_tensor(labels)
    y = (labels[:, None] == labels[None, :]).to(torch.get_default_dtype())
    if normalize:
        y = y / y.sum(dim=1, keepdim=True)
    return y, y.clone()


def _kl_rows(y: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    # 0 * log 0 := 0; y is never differentiated through, so clamping it is safe
    log_y = y.clamp_min(LOG_FLOOR).log()
    return (y * (log_y - log_p)).sum(dim=1).mean()


def contrastive_loss(p_s2l, y_s2l, p_l2s, y_l2s) -> torch.Tensor:
    """Half the sum of the row-averaged KL(y || p) in both directions.

    Probabilities below 1e-12 are floored before the log.
    """
    y_s2l = y_s2l.to(p_s2l.dtype)
    y_l2s = y_l2s.to(p_l2s.dtype)
    return 0.5 * (_kl_rows(y_s2l, p_s2l.clamp_min(LOG_FLOOR).log())
                  + _kl_rows(y_l2s, p_l2s.clamp_min(LOG_FLOOR).log()))


def skeleton_text_loss(s, l, labels, tau: float, normalize_targets: bool = True) -> torch.Tensor:
    """``contrastive_loss`` evaluated from embeddings through log-softmax.

    Agrees with the probability form wherever no probability hits the floor,
    and stays accurate at small temperatures.
    """
    logits = similarity_logits(s, l, tau)
    y, _ = target_distributions(labels, normalize_targets)
    y = y.to(logits.dtype)
    return 0.5 * (_kl_rows(y, logits.log_softmax(dim=1)) + _kl_rows(y, logits.T.log_softmax(dim=1)))


def diffusion_loss(l_recon, l_con, weights: LossWeights):
    return l_recon + weights.lam * l_con


def classification_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("batch", labels.shape[0], tuple(logits.shape))
    true = logits.gather(1, labels[:, None]).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - true).mean()


def total_loss(l_cls, l_diff):
    return l_cls + l_diff
