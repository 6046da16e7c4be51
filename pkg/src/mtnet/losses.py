"""Translation, classification and global losses.

Each image loss exists twice: a differentiable version built from tape ops
(used for training) and a plain-numpy ``*_value`` twin used by evaluation
and as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor

LN10 = math.log(10.0)
PSNR_CAP_DB = 100.0
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite translation loss.

    ``psnr_sign=-1`` rewards higher PSNR; ``+1`` reproduces the literal
    ``+ w4 * PSNR`` form. ``psnr_squared`` switches PSNR to the
    ``c_max**2`` convention. ``class_balance`` multiplies the
    classification term of the global loss (1 keeps the plain sum).
    """

    w1: float = 0.15
    w2: float = 0.15
    w3: float = 0.60
    w4: float = 0.20
    psnr_sign: int = -1
    psnr_squared: bool = False
    class_balance: float = 1.0

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            w = getattr(self, name)
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"{name}={w} outside [0, 1]")
        if self.psnr_sign not in (-1, 1):
            raise ValueError(f"psnr_sign must be +1 or -1, got {self.psnr_sign}")
        if self.class_balance < 0:
            raise ValueError("class_balance must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SSIMConstants:
    c_max: float

    def __post_init__(self):
        if not self.c_max > 0:
            raise ValueError(f"c_max must be positive, got {self.c_max}")

    @property
    def c1(self) -> float:
        return (0.01 * self.c_max) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.c_max) ** 2

    @classmethod
    def from_reference(cls, x) -> "SSIMConstants":
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        return cls(float(data.max()))


@dataclass
class LossReport:
    mse: float
    mae: float
    ssim: float
    psnr: float
    l_trans: float
    l_class: float
    l_global: float

    FIELDS = ("mse", "mae", "ssim", "psnr", "l_trans", "l_class", "l_global")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def mean(cls, reports, weights=None) -> "LossReport":
        reports = list(reports)
        w = np.ones(len(reports)) if weights is None else np.asarray(weights, dtype=float)
        w = w / w.sum()
        return cls(**{k: float(sum(wi * getattr(r, k) for wi, r in zip(w, reports))) for k in cls.FIELDS})


def _same_shape(x, y, what: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{what}: shape mismatch {x.shape} vs {y.shape}")


# ---------------------------------------------------------------------------
# differentiable losses


def mse(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mse")
    return ops.mean_all(ops.square(ops.sub(x, y)))


def mae(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mae")
    return ops.mean_all(ops.abs_(ops.sub(x, y)))


def ssim_global(x: Tensor, y: Tensor, c: SSIMConstants) -> Tensor:
    """Single-window SSIM from whole-volume means, variances and covariance."""
    _same_shape(x, y, "ssim_global")
    mu_x = ops.mean_all(x)
    mu_y = ops.mean_all(y)
    dx = ops.sub(x, mu_x)
    dy = ops.sub(y, mu_y)
    var_x = ops.mean_all(ops.square(dx))
    var_y = ops.mean_all(ops.square(dy))
    cov = ops.mean_all(ops.mul(dx, dy))
    num = ops.mul(ops.add(ops.scale(ops.mul(mu_x, mu_y), 2.0), c.c1),
                  ops.add(ops.scale(cov, 2.0), c.c2))
    den = ops.mul(ops.add(ops.add(ops.square(mu_x), ops.square(mu_y)), c.c1),
                  ops.add(ops.add(var_x, var_y), c.c2))
    return ops.div(num, den)


def psnr(x: Tensor, y: Tensor, c_max: float, squared: bool = False, cap: float | None = PSNR_CAP_DB) -> Tensor:
    """``10 * log10(c_max / MSE)`` in dB, optionally with ``c_max**2``.

    Above ``cap`` the result is the constant ``cap`` (zero gradient); with
    ``cap=None`` identical inputs give ``+inf``.
    """
    if c_max <= 0:
        raise ValueError(f"c_max must be positive, got {c_max}")
    err = mse(x, y)
    peak = c_max * c_max if squared else c_max
    value = psnr_from_mse(err.item(), peak)
    if cap is not None and value >= cap:
        return Tensor(np.asarray(cap, dtype=x.dtype))
    if not np.isfinite(value):
        return Tensor(np.asarray(np.inf, dtype=x.dtype))
    # 10*log10(peak) - 10*log10(mse)
    return ops.add(ops.scale(ops.log(err), -10.0 / LN10), 10.0 * math.log10(peak))


def translation_loss(x: Tensor, y: Tensor, w: LossWeights | None = None, c: SSIMConstants | None = None,
                     parts: dict | None = None) -> Tensor:
    """Weighted sum of MSE, MAE, (1 - SSIM) and the signed, capped PSNR.

    ``x`` is the reference (true) volume and ``y`` the prediction. When
    ``parts`` is given it is filled with the float value of every term.
    """
    w = w or LossWeights()
    c = c or SSIMConstants.from_reference(x)
    t_mse = mse(x, y)
    t_mae = mae(x, y)
    t_ssim = ssim_global(x, y, c)
    t_psnr = psnr(x, y, c.c_max, squared=w.psnr_squared, cap=PSNR_CAP_DB)
    loss = ops.add(
        ops.add(ops.scale(t_mse, w.w1), ops.scale(t_mae, w.w2)),
        ops.add(ops.scale(ops.sub(1.0, t_ssim), w.w3), ops.scale(t_psnr, w.psnr_sign * w.w4)),
    )
    if parts is not None:
        parts.update(mse=t_mse.item(), mae=t_mae.item(), ssim=t_ssim.item(), psnr=t_psnr.item())
    return loss


def classification_loss(probs: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy with a base-10 logarithm.

    ``labels`` is one-hot ``(N, K)``; probabilities are floored at 1e-12.
    """
    onehot = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if probs.ndim != 2 or onehot.shape != probs.shape:
        raise ValueError(f"probs {probs.shape} and labels {onehot.shape} must both be (N, K)")
    if not np.all((onehot == 0) | (onehot == 1)) or not np.all(onehot.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot with exactly one 1 per row")
    if np.any(probs.data < 0):
        raise ValueError("negative probability")
    n = probs.shape[0]
    logp = ops.log(ops.clamp_min(probs, PROB_FLOOR))
    picked = ops.sum_all(ops.mul(logp, Tensor(onehot.astype(probs.dtype))))
    return ops.scale(picked, -1.0 / (n * LN10))


def global_loss(l_trans: Tensor, l_class: Tensor, balance: float = 1.0) -> Tensor:
    for name, t in (("l_trans", l_trans), ("l_class", l_class)):
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"{name} is not finite")
    return ops.add(l_trans, ops.scale(l_class, balance)) if balance != 1.0 else ops.add(l_trans, l_class)


# ---------------------------------------------------------------------------
# numpy twins


def mse_value(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _same_shape(x, y, "mse")
    return float(np.mean((x - y) ** 2))


def mae_value(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _same_shape(x, y, "mae")
    return float(np.mean(np.abs(x - y)))


def ssim_value(x, y, c_max: float | None = None) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _same_shape(x, y, "ssim")
    c = SSIMConstants(float(x.max()) if c_max is None else c_max)
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    return float((2 * mx * my + c.c1) * (2 * cov + c.c2) / ((mx**2 + my**2 + c.c1) * (vx + vy + c.c2)))


def psnr_from_mse(mse_val: float, peak: float) -> float:
    if mse_val <= 0:
        return math.inf
    return 10.0 * math.log10(peak / mse_val)


def psnr_value(x, y, c_max: float | None = None, squared: bool = False) -> float:
    """PSNR in dB; ``+inf`` for identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    c_max = float(x.max()) if c_max is None else c_max
    if c_max <= 0:
        raise ValueError(f"c_max must be positive, got {c_max}")
    return psnr_from_mse(mse_value(x, y), c_max * c_max if squared else c_max)
