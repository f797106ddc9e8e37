"""Adversarial, pixel-wise L1 and cycle-consistency objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, log_sigmoid

VARIANTS = ("bce", "least_squares")


@dataclass
class LossWeights:
    lambda_l1: float = 100.0
    lambda_cycle: float = 10.0
    adversarial_variant: str = "bce"

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_cycle"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if self.adversarial_variant not in VARIANTS:
            raise ConfigError(f"adversarial_variant must be one of {VARIANTS}")


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown adversarial variant {variant!r}")


def adv_loss_discriminator(real_logits, fake_logits, variant="bce"):
    """Discriminator loss on a real and a fake logit grid.

    ``fake_logits`` must come from a detached generator output so that no
    gradient reaches the generator.
    """
    _check_variant(variant)
    real_logits, fake_logits = as_tensor(real_logits), as_tensor(fake_logits)
    if real_logits.shape != fake_logits.shape:
        raise DimensionError(f"logit grids differ: {real_logits.shape} vs {fake_logits.shape}")
    if variant == "bce":
        # log(1 - sigmoid(x)) == log_sigmoid(-x)
        return -log_sigmoid(real_logits).mean() - log_sigmoid(-fake_logits).mean()
    r = real_logits - 1.0
    return ((r * r).mean() + (fake_logits * fake_logits).mean()) * 0.5


def adv_loss_generator(fake_logits, variant="bce"):
    """Non-saturating generator loss: the generator maximizes log D(fake)."""
    _check_variant(variant)
    fake_logits = as_tensor(fake_logits)
    if variant == "bce":
        return -log_sigmoid(fake_logits).mean()
    r = fake_logits - 1.0
    return (r * r).mean() * 0.5


def l1_loss(prediction, target):
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(f"l1_loss: shapes {prediction.shape} and {target.shape} differ")
    return (prediction - target).abs().mean()


def cycle_loss(x_s, x_t, g_st, g_ts) -> Tensor:
    """Forward (S->T->S) plus backward (T->S->T) reconstruction L1."""
    x_s, x_t = as_tensor(x_s), as_tensor(x_t)
    forward_term = l1_loss(g_ts(g_st(x_s)), x_s)
    backward_term = l1_loss(g_st(g_ts(x_t)), x_t)
    return forward_term + backward_term
