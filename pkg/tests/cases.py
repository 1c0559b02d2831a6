"""Shared loss setups for gradient checks."""

import numpy as np
import pytest

from gere import tensor as T
from gere.distill import Thresholds
from gere.losses import WeightStrategy, ce_loss, combine_losses, kl_logit_loss, l1_feature_loss, l2_feature_loss, tm_loss
from gere.tensor import Tensor

GRAD_CASES = ("tm", "l1", "l2", "kl", "ce", "composite")


def band(n_d, lo, hi):
    lo_a, hi_a = np.full(n_d, lo), np.full(n_d, hi)
    return Thresholds(lo_a, hi_a, (lo_a + hi_a) / 2, (hi_a - lo_a) / 2)


def pred_of(x, dtype):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def grad_cases(dtype):
    """Loss closures and their parameters for finite-difference checks."""
    rng = np.random.default_rng(7)
    n_t, n_d, V = 4, 5, 6
    pred = pred_of(rng.normal(size=(2, n_t, n_d)) * 1.5, dtype)
    target = rng.normal(size=(2, n_t, n_d)) * 1.5
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    thr = band(n_d, -0.5, 0.5)
    # keep predictions away from the kinks so central differences are smooth
    p = pred.data
    for edge in (-0.5, 0.5):
        near = np.abs(p - edge) < 0.05
        p[near] += 0.1
    head = rng.normal(size=(n_d, V))
    w = pred_of(rng.normal(size=(n_d, V)) * 0.5, dtype)
    tokens = rng.integers(0, V, size=(2, n_t))
    return {
        "tm": ([pred], lambda: tm_loss(pred, target, thr, mask)),
        "l1": ([pred], lambda: l1_feature_loss(pred, target, mask)),
        "l2": ([pred], lambda: l2_feature_loss(pred, target, mask)),
        "kl": ([pred, w], lambda: kl_logit_loss(pred @ w, target, head, 2.0, mask)),
        "ce": ([pred, w], lambda: ce_loss(pred @ w, tokens, mask)),
        "composite": ([pred, w], _composite(pred, w, tokens, target, thr, mask)),
    }


def _composite(pred, w, tokens, target, thr, mask):
    """Joint objective with the dynamic weight; omega is detached, so the
    reference function holds it at its value at the unperturbed point."""

    def terms():
        return ce_loss(pred @ w, tokens, mask), tm_loss(pred, target, thr, mask)

    with T.no_grad():
        ce, aux = terms()
    omega = float(ce.data) / float(aux.data)

    def f():
        ce, aux = terms()
        if T.grad_enabled():
            bundle = combine_losses(ce, aux, WeightStrategy.dynamic())
            assert bundle.weight_used == pytest.approx(omega, rel=1e-12)
            return bundle.total
        return ce + aux * omega

    return f
