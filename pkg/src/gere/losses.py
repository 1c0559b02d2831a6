"""Training objectives: token CE, TM margin loss, feature and logit imitation,
and the fixed / dynamic loss-weight combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .distill import ActivationState, Thresholds, classify_states
from .tensor import Tensor

DYNAMIC_EPS = 1e-12


@dataclass(frozen=True)
class WeightStrategy:
    kind: str  # "fixed" or "dynamic"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "dynamic"):
            raise ValueError(f"unknown weight strategy {self.kind!r}")
        if self.kind == "fixed" and not self.value >= 0:
            raise ValueError(f"fixed weight must be >= 0, got {self.value}")

    @classmethod
    def fixed(cls, w: float) -> WeightStrategy:
        return cls("fixed", float(w))

    @classmethod
    def dynamic(cls) -> WeightStrategy:
        return cls("dynamic", 0.0)

    @classmethod
    def parse(cls, text: str) -> WeightStrategy:
        """``dynamic`` / ``d`` or ``fixed:<w>`` (a bare number also means fixed)."""
        text = text.strip().lower()
        if text in ("dynamic", "d", "w=d"):
            return cls.dynamic()
        if text.startswith("fixed:"):
            text = text[len("fixed:") :]
        try:
            return cls.fixed(float(text))
        except ValueError:
            raise ValueError(f"bad weight {text!r}; use 'dynamic' or 'fixed:<w>'") from None

    def __str__(self) -> str:
        return "dynamic" if self.kind == "dynamic" else f"fixed:{self.value:g}"


@dataclass
class LossBundle:
    ce: Tensor
    aux: Tensor | None
    total: Tensor
    weight_used: float


def _per_sample_mean(per: Tensor, mask: np.ndarray | None) -> Tensor:
    """Average over unmasked (token, dim) entries of each sample, then over samples.

    ``per`` is (n_t, n_d) for one sample or (B, n_t, n_d) for a batch; ``mask``
    marks valid tokens with shape (n_t,) or (B, n_t).
    """
    if per.ndim == 2:
        per = per.reshape(1, *per.shape)
        mask = None if mask is None else np.asarray(mask).reshape(1, -1)
    B, n_t, n_d = per.shape
    if mask is None:
        mask = np.ones((B, n_t), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).all():
        raise ValueError("every token is masked")
    keep = counts > 0
    w = np.where(keep[:, None], mask / np.maximum(counts, 1)[:, None] / n_d, 0.0) / keep.sum()
    return T.sum_(per * w[:, :, None].astype(per.dtype))


# -------------------------------------------------------------- CE


def lm_targets(tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and their loss mask for language-model scoring."""
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    loss_mask = np.zeros_like(mask)
    loss_mask[:, :-1] = mask[:, 1:] & mask[:, :-1]
    return targets, loss_mask


def ce_loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean token negative log-likelihood over positions where ``loss_mask`` holds."""
    if logits.shape[:-1] != np.shape(targets) or np.shape(targets) != np.shape(loss_mask):
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {np.shape(targets)}, mask {np.shape(loss_mask)}")
    if not np.any(loss_mask):
        raise ValueError("ce_loss: every position is masked")
    nll = T.take_last(T.log_softmax(logits, axis=-1), targets)
    return -T.masked_mean(nll, loss_mask)


# -------------------------------------------------------------- TM


def target_states(target: np.ndarray, thr: Thresholds) -> np.ndarray:
    """Accept either raw target values (float) or precomputed state codes (uint8)."""
    target = np.asarray(target)
    if target.dtype == np.uint8:
        return target
    return classify_states(target.astype(np.float64), thr)


def tm_loss(pred: Tensor, target: np.ndarray, thr: Thresholds, mask: np.ndarray | None = None) -> Tensor:
    """Threshold-based margin loss.

    Per entry the target's activation state selects the region the prediction
    must stay in: at most tau- for negative targets, within [tau-, tau+] for
    non-activated targets, at least tau+ for positive ones. The loss is the
    hinge distance to that region, averaged over unmasked entries.
    """
    return _per_sample_mean(tm_per_entry(pred, target, thr), mask)


def tm_per_entry(pred: Tensor, target: np.ndarray, thr: Thresholds) -> Tensor:
    """Unreduced TM hinge values, same shape as ``pred``."""
    if pred.shape[-1] != thr.n_dims:
        raise ValueError(f"prediction has {pred.shape[-1]} dims, thresholds have {thr.n_dims}")
    states = target_states(target, thr)
    if states.shape != pred.shape:
        raise ValueError(f"target shape {states.shape} does not match prediction {pred.shape}")
    dt = pred.dtype
    lo = thr.tau_minus.astype(dt)
    hi = thr.tau_plus.astype(dt)
    neg = states == ActivationState.NEG
    pos = states == ActivationState.POS
    upper = np.where(neg, lo, hi).astype(dt)  # bound from above (unused for POS)
    lower = np.where(pos, hi, lo).astype(dt)  # bound from below (unused for NEG)
    has_upper = (~pos).astype(dt)
    has_lower = (~neg).astype(dt)
    return T.max0(pred - upper) * has_upper + T.max0(lower - pred) * has_lower


# ---------------------------------------------------- feature imitation


def _check_same(pred: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {pred.shape}")
    return target.astype(pred.dtype)


def l1_feature_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    diff = pred - _check_same(pred, target)
    return _per_sample_mean(T.max0(diff) + T.max0(-diff), mask)


def l2_feature_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    diff = pred - _check_same(pred, target)
    return _per_sample_mean(diff * diff, mask)


# ------------------------------------------------------ logit imitation


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    # same arithmetic as tensor.log_softmax so identical inputs give identical outputs
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_logit_loss(
    pred_logits: Tensor,
    target_hidden: np.ndarray,
    lm_head: np.ndarray,
    temperature: float = 2.0,
    mask: np.ndarray | None = None,
) -> Tensor:
    """T^2 * KL(teacher || student) on temperature-softened distributions.

    Teacher logits are rebuilt from stored hidden states and the frozen base
    output projection; no gradient reaches them.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    dt = pred_logits.dtype
    target_logits = np.asarray(target_hidden, dtype=dt) @ np.asarray(lm_head, dtype=dt)
    if target_logits.shape != pred_logits.shape:
        raise ValueError(f"target logits {target_logits.shape} vs prediction {pred_logits.shape}")
    inv_t = dt.type(1.0 / temperature)
    log_p = _log_softmax_np(target_logits * inv_t)
    p = np.exp(log_p)
    log_q = T.log_softmax(pred_logits * inv_t, axis=-1)
    # per-token KL, then mean over tokens
    kl_tok = T.sum_(T.mul(log_q * -1.0 + log_p, p), axis=-1)
    if kl_tok.ndim == 1:
        kl_tok = kl_tok.reshape(1, -1)
        mask = None if mask is None else np.asarray(mask).reshape(1, -1)
    per = kl_tok.reshape(*kl_tok.shape, 1)
    return _per_sample_mean(per, mask) * float(temperature**2)


# --------------------------------------------------------- combination


def combine_losses(ce: Tensor, aux: Tensor | None, strategy: WeightStrategy) -> LossBundle:
    if not np.isfinite(ce.data).all() or (aux is not None and not np.isfinite(aux.data).all()):
        raise FloatingPointError("non-finite loss term")
    if aux is None:
        return LossBundle(ce, None, ce, 0.0)
    if strategy.kind == "fixed":
        w = strategy.value
    else:
        aux_val = float(aux.data)
        # degenerate aux: drop the term for this step
        w = 0.0 if aux_val <= DYNAMIC_EPS else float(ce.data) / aux_val
    if w == 0.0 and strategy.kind == "dynamic":
        return LossBundle(ce, aux, ce, 0.0)
    return LossBundle(ce, aux, ce + aux * w, w)
