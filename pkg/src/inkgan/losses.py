"""Adversarial, reconstruction, total-variation and cycle objectives.

Discriminator outputs are raw patch logits; both GAN losses apply the
sigmoid internally in logit space (via softplus), which is numerically
stable and has the same optima as the probability-space formulation. The
generator uses the non-saturating form -mean log sigma(fake).
"""

from dataclasses import dataclass

from . import tensor as ts
from .errors import ConfigError, ShapeError

OBJECTIVES = ("pix2pix", "pix2pix_tv", "cyclegan")


@dataclass
class LossConfig:
    """Objective selector and loss weights.

    Defaults carry the training recipe: lambda_l1=100, lambda_tv=0.0001,
    lambda_cyc=10. tv_enabled must agree with the objective. tv_mean switches
    the TV term from the raw sum over neighbor differences to a per-pixel
    mean (desk-scale experiments only; the sum is the reference definition).
    """

    objective: str = "pix2pix"
    lambda_l1: float = 100.0
    lambda_tv: float = 0.0001
    lambda_cyc: float = 10.0
    tv_enabled: bool = False
    tv_mean: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if min(self.lambda_l1, self.lambda_tv, self.lambda_cyc) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.tv_enabled != (self.objective == "pix2pix_tv"):
            raise ConfigError(
                f"tv_enabled={self.tv_enabled} inconsistent with objective {self.objective!r}"
            )

    @classmethod
    def for_objective(cls, objective, **overrides):
        return cls(objective=objective, tv_enabled=objective == "pix2pix_tv", **overrides)


def d_loss(real_logits, fake_logits):
    """Discriminator BCE: real patches against 1, fake patches against 0.

    Equals -(mean log sigma(real) + mean log(1 - sigma(fake))), computed
    from logits so extreme confidence stays finite.
    """
    if real_logits.data.shape != fake_logits.data.shape:
        raise ShapeError(
            f"d_loss: logit shapes {real_logits.data.shape} and "
            f"{fake_logits.data.shape} differ"
        )
    real_term = ts.mean(ts.softplus(ts.scalar_mul(real_logits, -1.0)))
    fake_term = ts.mean(ts.softplus(fake_logits))
    return ts.add(real_term, fake_term)


def g_adv_loss(fake_logits):
    """Non-saturating generator term: -mean log sigma(fake logits)."""
    return ts.mean(ts.softplus(ts.scalar_mul(fake_logits, -1.0)))


def l1_loss(y, y_hat):
    """Mean absolute difference over all elements."""
    return ts.mean(ts.absolute(ts.sub(y, y_hat)))


def tv_loss(y_hat, mean=False):
    """Total variation: sum of |vertical| + |horizontal| neighbor differences.

    Raw sum over batch, channels and all neighbor pairs (no wraparound, no
    padding); a 1x1 spatial tensor has no neighbors and scores 0. With
    mean=True the sum is divided by the element count B*C*H*W.
    """
    if y_hat.data.ndim != 4:
        raise ShapeError(f"tv_loss: expected 4-D NCHW tensor, got {y_hat.data.shape}")
    b, c, h, w = y_hat.data.shape
    terms = []
    if h >= 2:
        down = ts.crop(y_hat, 1, h, 0, w)
        up = ts.crop(y_hat, 0, h - 1, 0, w)
        terms.append(ts.sum(ts.absolute(ts.sub(down, up))))
    if w >= 2:
        right = ts.crop(y_hat, 0, h, 1, w)
        left = ts.crop(y_hat, 0, h, 0, w - 1)
        terms.append(ts.sum(ts.absolute(ts.sub(right, left))))
    if not terms:
        return ts.Tensor(0.0, dtype=y_hat.data.dtype)
    total = terms[0] if len(terms) == 1 else ts.add(terms[0], terms[1])
    if mean:
        total = ts.scalar_mul(total, 1.0 / (b * c * h * w))
    return total


def cycle_loss(x, f_g_x, y, g_f_y):
    """Round-trip reconstruction: l1(F(G(x)), x) + l1(G(F(y)), y)."""
    return ts.add(l1_loss(x, f_g_x), l1_loss(y, g_f_y))


def pix2pix_objective(d_fake_logits, y, y_hat, cfg):
    """Generator total and its components for the paired objective.

    Returns (total, parts) with parts holding float values of g_adv, l1 and
    tv; total is g_adv + lambda_l1 * l1 + lambda_tv * tv (tv only when
    enabled), built from exactly those sub-expressions so the reported
    decomposition is reproducible.
    """
    if cfg.objective not in ("pix2pix", "pix2pix_tv"):
        raise ConfigError(f"pix2pix objective requested with config {cfg.objective!r}")
    adv = g_adv_loss(d_fake_logits)
    rec = l1_loss(y, y_hat)
    total = ts.add(adv, ts.scalar_mul(rec, cfg.lambda_l1))
    parts = {"g_adv": adv.item(), "l1": rec.item(), "tv": 0.0}
    if cfg.tv_enabled:
        tv = tv_loss(y_hat, mean=cfg.tv_mean)
        total = ts.add(total, ts.scalar_mul(tv, cfg.lambda_tv))
        parts["tv"] = tv.item()
    return total, parts


def total_pix2pix(d_fake_logits, y, y_hat, cfg):
    """Scalar generator objective: g_adv + lambda_l1*l1 (+ lambda_tv*tv)."""
    total, _ = pix2pix_objective(d_fake_logits, y, y_hat, cfg)
    return total
