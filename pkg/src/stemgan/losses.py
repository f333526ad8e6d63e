"""Training objectives: patch BCE adversarial terms, intensity and image-
gradient reconstruction terms, and the weighted generator/discriminator
objectives.

All reductions are means (per grid, per pixel) so magnitudes do not depend
on resolution or patch-grid size; the weights keep a stable meaning across
datasets. Spatial operations treat the last two tensor dimensions as
height and width.
"""

from dataclasses import dataclass

import torch

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_int: float = 1.0
    lambda_gra: float = 1.0
    lambda_adv: float = 0.05

    def validate(self):
        for name in ("lambda_int", "lambda_gra", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_int == self.lambda_gra == self.lambda_adv == 0:
            raise ValueError("at least one loss weight must be > 0")
        return self


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.get_default_dtype())


def bce(pred, target) -> torch.Tensor:
    """Mean binary cross entropy of probabilities ``pred`` against 0/1 targets."""
    pred = _as_tensor(pred)
    target = _as_tensor(target).to(pred.dtype)
    if target.ndim == 0:
        target = target.expand_as(pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def adv_loss_d(grid_real, grid_fake) -> torch.Tensor:
    """Critic loss: real patches scored toward 1, fake patches toward 0."""
    grid_real = _as_tensor(grid_real)
    grid_fake = _as_tensor(grid_fake)
    if grid_real.shape != grid_fake.shape:
        raise ValueError(
            f"shape mismatch: real {tuple(grid_real.shape)} vs fake {tuple(grid_fake.shape)}"
        )
    return bce(grid_real, torch.ones_like(grid_real)) + bce(
        grid_fake, torch.zeros_like(grid_fake)
    )


def adv_loss_g(grid_fake) -> torch.Tensor:
    """Generator's adversarial term: fake patches scored toward 1."""
    grid_fake = _as_tensor(grid_fake)
    return bce(grid_fake, torch.ones_like(grid_fake))


def intensity_loss(pred, truth) -> torch.Tensor:
    """Per-pixel mean squared difference between prediction and ground truth."""
    pred = _as_tensor(pred)
    truth = _as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    return ((pred - truth) ** 2).mean()


def gradient_loss(pred, truth) -> torch.Tensor:
    """Difference of absolute image gradients along both spatial axes.

    Horizontal and vertical gradients are adjacent-pixel differences; each
    term is averaged over its own valid positions, then the two are summed.
    """
    pred = _as_tensor(pred)
    truth = _as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if pred.ndim < 2 or pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise ValueError("frames must be at least 2x2 for gradient loss")
    dh_p = (pred[..., :, 1:] - pred[..., :, :-1]).abs()
    dh_t = (truth[..., :, 1:] - truth[..., :, :-1]).abs()
    dv_p = (pred[..., 1:, :] - pred[..., :-1, :]).abs()
    dv_t = (truth[..., 1:, :] - truth[..., :-1, :]).abs()
    return (dh_p - dh_t).abs().mean() + (dv_p - dv_t).abs().mean()


def generator_objective(pred, truth, grid_fake, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of intensity, gradient and adversarial generator terms."""
    total = _as_tensor(0.0)
    if weights.lambda_int:
        total = total + weights.lambda_int * intensity_loss(pred, truth)
    if weights.lambda_gra:
        total = total + weights.lambda_gra * gradient_loss(pred, truth)
    if weights.lambda_adv:
        total = total + weights.lambda_adv * adv_loss_g(grid_fake)
    return total


def discriminator_objective(grid_real, grid_fake) -> torch.Tensor:
    """The critic trains on its adversarial loss alone."""
    return adv_loss_d(grid_real, grid_fake)
