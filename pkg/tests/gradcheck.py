"""Finite-difference helpers shared by the unit and acceptance tests."""
import numpy as np

from ondevice_stt.ctc import ctc_loss
from ondevice_stt.model import backward, forward

# Below this magnitude a central difference at eps=1e-5 in float64 carries
# absolute noise comparable to the gradient itself.
GRAD_FLOOR = 1e-6


def rel_error(a, b, floor=GRAD_FLOOR):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def model_loss(params, feats, label):
    logits, _ = forward(params, feats)
    return ctc_loss(logits, label).loss


def model_gradcheck(params, feats, label, freeze, eps=1e-5):
    """Worst relative error over every unfrozen tensor entry, and the analytic grads."""
    logits, tape = forward(params, feats)
    grads = backward(params, tape, ctc_loss(logits, label).dlogits, freeze)
    worst = 0.0
    for name, g in grads.items():
        base = params[name]
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                bumped = base.copy()
                bumped[idx] += sign * eps
                fd[idx] += sign * model_loss(params.replace({name: bumped}), feats, label)
        fd /= 2 * eps
        worst = max(worst, float(rel_error(g, fd).max()))
    return worst, grads
