"""Vision-language contrastive loss, the VilHub class-preference penalty,
and their combination, with closed-form gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 1e-30


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    gamma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ValueError("tau must be a finite positive real")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be a finite non-negative real")


@dataclass(frozen=True)
class LossBreakdown:
    vl: float
    hub: float
    total: float

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.vl + other.vl, self.hub + other.hub, self.total + other.total)


def _table_matrix(table) -> np.ndarray:
    return table.vectors if hasattr(table, "vectors") else np.asarray(table)


def similarity_logits(features, table, tau: float) -> np.ndarray:
    """z_ic = <f_i, t_c> / tau for unit feature rows and unit table rows."""
    t = _table_matrix(table)
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[1] != t.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match table dim {t.shape[1]}")
    return (f @ t.T.astype(f.dtype, copy=False)) / f.dtype.type(tau)


def softmax_rows(logits) -> np.ndarray:
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    return y


def vl_loss(probs, labels) -> float:
    p = np.asarray(probs)
    y = _check_labels(labels, p.shape[1])
    picked = p[np.arange(len(y)), y]
    return float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())


def class_preference(probs) -> np.ndarray:
    return np.asarray(probs).mean(axis=0)


def vilhub_loss(pref) -> float:
    p = np.asarray(pref, dtype=np.float64)
    return float(((p - 1.0 / len(p)) ** 2).sum())


def loss_and_grad(features, table, labels, cfg: LossConfig):
    """Breakdown, probabilities and dL/dfeatures in one pass.

    Assumes unit rows, so every logit lies in [-1/tau, 1/tau] and a constant
    shift of 1/tau stabilizes the softmax without a row-max pass.
    """
    f = np.asarray(features)
    t = _table_matrix(table)
    if f.ndim != 2 or f.shape[1] != t.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match table dim {t.shape[1]}")
    y = _check_labels(labels, t.shape[0])
    n, c = len(f), t.shape[0]
    scaled = (t / cfg.tau).astype(f.dtype)
    z = f @ scaled.T
    if 2.0 / cfg.tau < 60.0:
        z -= f.dtype.type(1.0 / cfg.tau)
    else:
        z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z, out=z)
    probs /= probs.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    vl = float(-np.log(np.maximum(probs[rows, y], LOG_CLAMP).astype(np.float64)).mean())
    pref = probs.mean(axis=0, dtype=np.float64)
    hub = vilhub_loss(pref)
    breakdown = LossBreakdown(vl, hub, vl + cfg.gamma * hub)

    if cfg.gamma:
        # dL/dz = p * (1 + 2*gamma*(dev_c - <p_i, dev>)) - onehot, all over n
        dev = (pref - 1.0 / c).astype(f.dtype)
        dz = dev[None, :] - (probs @ dev)[:, None]
        dz *= f.dtype.type(2.0 * cfg.gamma)
        dz += f.dtype.type(1.0)
        dz *= probs
    else:
        dz = probs.copy()
    dz[rows, y] -= 1.0
    dz /= f.dtype.type(n)
    return breakdown, probs, dz @ scaled


def total_loss(features, table, labels, cfg: LossConfig):
    t = _table_matrix(table)
    probs = softmax_rows(similarity_logits(features, t, cfg.tau))
    vl = vl_loss(probs, labels)
    hub = vilhub_loss(class_preference(probs))
    return LossBreakdown(vl, hub, vl + cfg.gamma * hub), probs


def loss_gradient_wrt_features(features, table, labels, cfg: LossConfig) -> np.ndarray:
    return loss_and_grad(features, table, labels, cfg)[2]


def cross_entropy_with_grad(logits, labels):
    """Mean cross-entropy over rows of ``logits`` and its gradient."""
    z = np.asarray(logits)
    p = softmax_rows(z)
    y = _check_labels(labels, z.shape[1])
    loss = float(-np.log(np.maximum(p[np.arange(len(y)), y], LOG_CLAMP)).mean())
    g = p.copy()
    g[np.arange(len(y)), y] -= 1.0
    return loss, g / len(y)
