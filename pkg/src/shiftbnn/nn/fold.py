from __future__ import annotations

import numpy as np

from .activations import SignAct
from .layers import BatchNorm


class FoldError(ValueError):
    pass


def fold_threshold(beta: np.ndarray, th) -> tuple[np.ndarray, np.ndarray]:
    """Absorb a sign threshold into the preceding batch-norm bias.

    ``gamma*xhat + beta <= th``  is the same predicate as
    ``gamma*xhat + (beta - th) <= 0``, so the pair becomes ``(beta - th, 0)``.
    The difference is formed in float64, where it is exact for float32
    inputs; rounding it back to float32 would move the decision boundary.
    """
    beta = np.asarray(beta, dtype=np.float64)
    th = np.broadcast_to(np.asarray(th, dtype=np.float64), beta.shape)
    return beta - th, np.zeros_like(beta)


def fold_bn_sign(bn: BatchNorm, act: SignAct):
    """In-place fold of ``act``'s threshold into ``bn``'s bias."""
    if not isinstance(bn, BatchNorm) or not isinstance(act, SignAct):
        raise FoldError(f"cannot fold {type(act).__name__} into {type(bn).__name__}")
    th = act.th if act.cfg.per_channel else act.th[0]
    beta, _ = fold_threshold(bn.beta.value, th)
    bn.beta.value = beta
    act.threshold.value = np.zeros_like(act.threshold.value)
    act.threshold.grad = np.zeros_like(act.threshold.value)
    bn.beta.grad = np.zeros_like(beta)
