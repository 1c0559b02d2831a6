"""Independent scalar reference implementations used as test oracles."""

import math


def tm_scalar(target: float, pred: float, lo: float, hi: float) -> float:
    if target < lo:
        return max(pred - lo, 0.0)
    if target > hi:
        return max(hi - pred, 0.0)
    return max(pred - hi, 0.0) + max(lo - pred, 0.0)


def softmax_list(xs, t=1.0):
    m = max(x / t for x in xs)
    e = [math.exp(x / t - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def kl_scalar(teacher_logits, student_logits, t: float) -> float:
    p = softmax_list(teacher_logits, t)
    q = softmax_list(student_logits, t)
    return t * t * sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))


def harmonic(g: float, a: float) -> float:
    return 2 * g * a / (g + a)
