"""Training objectives over a batch of (predictions, labels), with analytic gradients.

All functions work in float64 numpy and return python floats. Gradients are
taken with respect to the predictions only; at hinge kinks and the clipping
boundary the zero subgradient is used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

UTMOS_CLIP = 0.25
RELRANK_EPS = 1e-8
LOSS_NAMES = ("mse", "mae", "contrastive", "relrank", "lcc", "ccc", "dcq", "utmos")


@dataclass(frozen=True)
class LossConfig:
    name: str = "contrastive"
    margin_contrastive: float = 0.1
    margin_rank: float = 0.5
    dcq_weight: float = 1.0

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.name!r}; choose from {', '.join(LOSS_NAMES)}")
        if self.margin_contrastive < 0 or self.margin_rank < 0:
            raise ConfigError("loss margins must be >= 0")

    @property
    def tau_clip(self) -> float:
        return UTMOS_CLIP

    @property
    def min_batch(self) -> int:
        return {"mse": 1, "mae": 1, "relrank": 4}.get(self.name, 2)


def _as_batch(preds, labels):
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"preds/labels must be equal-length non-empty vectors, got {p.shape} and {y.shape}")
    return p, y


# -- point-wise ---------------------------------------------------------------

def mse(preds, labels) -> float:
    p, y = _as_batch(preds, labels)
    return float(np.mean((p - y) ** 2))


def mse_grad(preds, labels) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    return 2.0 * (p - y) / p.size


def mae(preds, labels) -> float:
    p, y = _as_batch(preds, labels)
    return float(np.mean(np.abs(p - y)))


def mae_grad(preds, labels) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    return np.sign(p - y) / p.size


# -- ranking ------------------------------------------------------------------

def _pair_residuals(p, y):
    i, j = np.triu_indices(p.size, k=1)
    return i, j, (p[i] - p[j]) - (y[i] - y[j])


def contrastive(preds, labels, margin: float = 0.1) -> float:
    """Mean over unordered pairs of max(0, |pred gap - label gap| - margin)."""
    p, y = _as_batch(preds, labels)
    _, _, d = _pair_residuals(p, y)
    return float(np.mean(np.maximum(0.0, np.abs(d) - margin)))


def contrastive_grad(preds, labels, margin: float = 0.1) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    i, j, d = _pair_residuals(p, y)
    w = np.where(np.abs(d) - margin > 0, np.sign(d), 0.0) / d.size
    g = np.zeros_like(p)
    np.add.at(g, i, w)
    np.add.at(g, j, -w)
    return g


def extreme_indices(labels) -> tuple[int, int, int, int]:
    """(argmax, second max, second min, argmin) of labels; ties go to the lower index."""
    y = np.asarray(labels, dtype=np.float64)
    idx = np.arange(y.size)
    desc = np.lexsort((idx, -y))
    asc = np.lexsort((idx, y))
    return int(desc[0]), int(desc[1]), int(asc[1]), int(asc[0])


def _relrank_terms(p, y, margin):
    s1, s2, s3, s4 = extreme_indices(y)
    span = y[s1] - y[s4] + RELRANK_EPS
    top = p[s2] - p[s1] + margin * (y[s1] - y[s2]) / span
    bottom = p[s4] - p[s3] + margin * (y[s3] - y[s4]) / span
    return (s1, s2, s3, s4), top, bottom


def rel_rank(preds, labels, margin: float = 0.5) -> float:
    """Hinge pair at each end of the label range: top two and bottom two utterances."""
    p, y = _as_batch(preds, labels)
    if p.size < 4:
        raise ValueError("rel_rank needs a batch of at least 4")
    _, top, bottom = _relrank_terms(p, y, margin)
    return float(max(0.0, top) + max(0.0, bottom))


def rel_rank_grad(preds, labels, margin: float = 0.5) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    (s1, s2, s3, s4), top, bottom = _relrank_terms(p, y, margin)
    g = np.zeros_like(p)
    if top > 0:
        g[s2] += 1.0
        g[s1] -= 1.0
    if bottom > 0:
        g[s4] += 1.0
        g[s3] -= 1.0
    return g


# -- correlation --------------------------------------------------------------

def _moments(p, y):
    dp, dy = p - p.mean(), y - y.mean()
    return dp, dy, np.mean(dp * dp), np.mean(dy * dy), np.mean(dp * dy)


def _degenerate(p, y) -> bool:
    # exact constancy; a computed variance can be a tiny positive round-off
    return np.ptp(p) == 0 or np.ptp(y) == 0


def lcc_loss(preds, labels) -> float:
    """1 - Pearson correlation (population moments); 1 when either side is constant."""
    p, y = _as_batch(preds, labels)
    if _degenerate(p, y):
        return 1.0
    _, _, vp, vy, cov = _moments(p, y)
    return float(1.0 - cov / np.sqrt(vp * vy))


def lcc_loss_grad(preds, labels) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    if _degenerate(p, y):
        return np.zeros_like(p)
    dp, dy, vp, vy, cov = _moments(p, y)
    sp, sy = np.sqrt(vp), np.sqrt(vy)
    rho = cov / (sp * sy)
    return -(dy / (sp * sy) - rho * dp / vp) / p.size


def ccc_loss(preds, labels) -> float:
    p, y = _as_batch(preds, labels)
    if _degenerate(p, y):
        return 1.0
    _, _, vp, vy, cov = _moments(p, y)
    return float(1.0 - 2.0 * cov / (vp + vy + (p.mean() - y.mean()) ** 2))


def ccc_loss_grad(preds, labels) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    if _degenerate(p, y):
        return np.zeros_like(p)
    dp, dy, vp, vy, cov = _moments(p, y)
    n = p.size
    shift = p.mean() - y.mean()
    denom = vp + vy + shift**2
    d_cov = dy / n
    d_denom = 2.0 * dp / n + 2.0 * shift / n
    return -2.0 * (d_cov * denom - cov * d_denom) / denom**2


# -- hybrid -------------------------------------------------------------------

def _ordered_pairs(y):
    i, j = np.nonzero(y[:, None] > y[None, :])
    return i, j


def dcq_loss(preds, labels, weight: float = 1.0, margin: float = 0.5) -> float:
    """MSE plus a hinge on every label-ordered pair whose predictions are not `margin` apart."""
    p, y = _as_batch(preds, labels)
    i, j = _ordered_pairs(y)
    rank = float(np.mean(np.maximum(0.0, margin - (p[i] - p[j])))) if i.size else 0.0
    return mse(p, y) + weight * rank


def dcq_loss_grad(preds, labels, weight: float = 1.0, margin: float = 0.5) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    g = mse_grad(p, y)
    i, j = _ordered_pairs(y)
    if i.size:
        active = (margin - (p[i] - p[j]) > 0) * (weight / i.size)
        np.add.at(g, i, -active)
        np.add.at(g, j, active)
    return g


def clipped_mse(preds, labels, tau: float = UTMOS_CLIP) -> float:
    p, y = _as_batch(preds, labels)
    e = p - y
    return float(np.mean(np.where(np.abs(e) > tau, e * e, 0.0)))


def clipped_mse_grad(preds, labels, tau: float = UTMOS_CLIP) -> np.ndarray:
    p, y = _as_batch(preds, labels)
    e = p - y
    return np.where(np.abs(e) > tau, 2.0 * e, 0.0) / p.size


def utmos_loss(preds, labels, margin: float = 0.1) -> float:
    return clipped_mse(preds, labels) + 0.5 * contrastive(preds, labels, margin)


def utmos_loss_grad(preds, labels, margin: float = 0.1) -> np.ndarray:
    return clipped_mse_grad(preds, labels) + 0.5 * contrastive_grad(preds, labels, margin)


# -- dispatch -----------------------------------------------------------------

def _kwargs(cfg: LossConfig) -> dict:
    if cfg.name in ("contrastive", "utmos"):
        return {"margin": cfg.margin_contrastive}
    if cfg.name == "relrank":
        return {"margin": cfg.margin_rank}
    if cfg.name == "dcq":
        return {"weight": cfg.dcq_weight, "margin": cfg.margin_rank}
    return {}


_TABLE = {
    "mse": (mse, mse_grad),
    "mae": (mae, mae_grad),
    "contrastive": (contrastive, contrastive_grad),
    "relrank": (rel_rank, rel_rank_grad),
    "lcc": (lcc_loss, lcc_loss_grad),
    "ccc": (ccc_loss, ccc_loss_grad),
    "dcq": (dcq_loss, dcq_loss_grad),
    "utmos": (utmos_loss, utmos_loss_grad),
}


def _resolve(loss) -> LossConfig:
    return loss if isinstance(loss, LossConfig) else LossConfig(name=loss)


def loss_value(loss, preds, labels) -> float:
    """Evaluate a loss given by name or LossConfig."""
    cfg = _resolve(loss)
    return _TABLE[cfg.name][0](preds, labels, **_kwargs(cfg))


def gradient(loss, preds, labels) -> np.ndarray:
    """d loss / d preds for a loss given by name or LossConfig."""
    cfg = _resolve(loss)
    return _TABLE[cfg.name][1](preds, labels, **_kwargs(cfg))


def kink_distance(loss, preds, labels) -> float:
    """Distance of the batch to the nearest non-differentiable point of the loss (inf if smooth)."""
    cfg = _resolve(loss)
    p, y = _as_batch(preds, labels)
    e = p - y
    gaps: list[np.ndarray] = []
    if cfg.name == "mae":
        gaps.append(np.abs(e))
    if cfg.name in ("contrastive", "utmos"):
        _, _, d = _pair_residuals(p, y)
        gaps.append(np.abs(np.abs(d) - cfg.margin_contrastive))
    if cfg.name == "utmos":
        gaps.append(np.abs(np.abs(e) - UTMOS_CLIP))
    if cfg.name == "relrank":
        _, top, bottom = _relrank_terms(p, y, cfg.margin_rank)
        gaps.append(np.abs([top, bottom]))
    if cfg.name == "dcq":
        i, j = _ordered_pairs(y)
        gaps.append(np.abs(cfg.margin_rank - (p[i] - p[j])))
    if cfg.name in ("lcc", "ccc") and _degenerate(p, y):
        return 0.0
    sizes = [g for g in gaps if np.size(g)]
    return float(min(np.min(g) for g in sizes)) if sizes else float("inf")
