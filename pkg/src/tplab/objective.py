"""Task and loss-module objectives.

All functions are vectorised numpy.  ``l`` denotes true per-sample task
losses (cross-entropy, treated as constants) and ``lhat`` the loss-module
predictions.  Pairs for the ranking term are consecutive entries
``(0, 1), (2, 3), ...`` of the batch.
"""

from dataclasses import dataclass

import numpy as np

HARD_THRESHOLD = "hard_threshold"
HINGE = "hinge"
YOO = "yoo_convention"
AS_PRINTED = "as_printed"


@dataclass(frozen=True)
class LossCfg:
    xi: float = 0.5  # ranking margin
    zeta: float = 0.5  # L1 activation threshold
    lam: float = 0.5  # L1 scale
    eta: float = 1.0  # module-loss weight in the combined loss
    l1_mode: str = HARD_THRESHOLD
    ranking_sign_mode: str = YOO

    def __post_init__(self):
        for name in ("xi", "zeta", "lam", "eta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"LossCfg.{name} must be finite and >= 0, got {v}")
        if self.l1_mode not in (HARD_THRESHOLD, HINGE):
            raise ValueError(f"unknown l1_mode {self.l1_mode!r}")
        if self.ranking_sign_mode not in (YOO, AS_PRINTED):
            raise ValueError(f"unknown ranking_sign_mode {self.ranking_sign_mode!r}")


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, y):
    """Per-sample ``-log softmax(logits)[y]``; accepts a single vector or a batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits in cross_entropy")
    y = np.asarray(y)
    C = logits.shape[-1]
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError(f"label out of range [0, {C})")
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(y)])
    return -np.take_along_axis(lsm, y[:, None], axis=1)[:, 0]


def sign_star(v):
    """+1 for v > 0, -1 otherwise (zero counts as negative)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.where(v > 0, 1.0, -1.0)
    return float(out) if out.ndim == 0 else out


def l1_margin(l, lhat, zeta, mode=HARD_THRESHOLD):
    d = np.abs(np.asarray(l, dtype=np.float64) - np.asarray(lhat, dtype=np.float64))
    if mode == HARD_THRESHOLD:
        out = np.where(d > zeta, d, 0.0)
    elif mode == HINGE:
        out = np.maximum(0.0, d - zeta)
    else:
        raise ValueError(f"unknown l1_mode {mode!r}")
    return float(out) if out.ndim == 0 else out


def _pairs(l, lhat):
    l = np.asarray(l, dtype=np.float64)
    lhat = np.asarray(lhat, dtype=np.float64)
    B = len(l)
    if B % 2:
        raise ValueError(f"ranking loss needs an even batch, got {B}")
    if len(lhat) != B:
        raise ValueError("l and lhat must have equal length")
    return l, lhat, B


def _ranking_terms(l, lhat, xi, mode):
    s = sign_star(l[0::2] - l[1::2])
    diff = lhat[0::2] - lhat[1::2]
    if mode == YOO:
        arg = -s * diff + xi
    elif mode == AS_PRINTED:
        arg = s * diff + xi
    else:
        raise ValueError(f"unknown ranking_sign_mode {mode!r}")
    return s, arg


def ranking_loss(l, lhat, xi, mode=YOO):
    l, lhat, B = _pairs(l, lhat)
    _, arg = _ranking_terms(l, lhat, xi, mode)
    return float(2.0 / B * np.maximum(0.0, arg).sum())


def loss_module_loss(l, lhat, cfg):
    l, lhat, B = _pairs(l, lhat)
    rank = ranking_loss(l, lhat, cfg.xi, cfg.ranking_sign_mode)
    return rank + cfg.lam / B * float(np.sum(l1_margin(l, lhat, cfg.zeta, cfg.l1_mode)))


def loss_module_grad(l, lhat, cfg):
    """d loss_module_loss / d lhat.  Subgradient 0 at every kink."""
    l, lhat, B = _pairs(l, lhat)
    g = np.zeros(B)
    s, arg = _ranking_terms(l, lhat, cfg.xi, cfg.ranking_sign_mode)
    active = arg > 0
    sgn = -s if cfg.ranking_sign_mode == YOO else s
    coef = np.where(active, sgn * 2.0 / B, 0.0)
    g[0::2] += coef
    g[1::2] -= coef
    d = lhat - l
    g += np.where(np.abs(d) > cfg.zeta, np.sign(d), 0.0) * cfg.lam / B
    return g


def combined_loss(ce_batch_mean, module_loss, eta):
    return ce_batch_mean + eta * module_loss
