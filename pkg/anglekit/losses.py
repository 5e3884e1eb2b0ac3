"""
Training losses.

Classification uses a hybrid of a focal term and a soft F-beta term over the
whole batch. Localization uses the KR loss: heatmap MSE plus a soft overlap
(Dice-style) term computed per sample and averaged.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Literal, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from anglekit.errors import ConfigError, GradCheckError

logger = logging.getLogger('anglekit_losses')

# probabilities are clamped to [PRED_EPS, 1 - PRED_EPS] before any log
PRED_EPS = 1e-7
GRAD_CHECK_MAX_ELEMENTS = 64


class FocalParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(default=2.0, gt=0)
    gamma: float = Field(default=2.0, ge=0)


class FBetaParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(default=2.0, gt=0)
    eps: float = Field(default=1e-6, gt=0)


class HybridParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rho1: float = Field(default=0.5, ge=0)
    rho2: float = Field(default=0.5, ge=0)


class KRParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rho3: float = Field(default=100.0, ge=0)
    rho4: float = Field(default=0.2, ge=0)
    eps: float = Field(default=1e-6, gt=0)


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    focal: FocalParams = FocalParams()
    fbeta: FBetaParams = FBetaParams()
    hybrid: HybridParams = HybridParams()
    kr: KRParams = KRParams()
    # (1 + beta^2) numerator instead of (1 + beta)
    fbeta_conventional: bool = False
    # alpha_t = alpha*y + (1-alpha)*(1-y), needs alpha in (0, 1)
    class_balanced_alpha: bool = False
    loc_loss: Literal["kr", "mse"] = "kr"


def _check_pair(pred: torch.Tensor, target: torch.Tensor, name: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{name}: prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError(f"{name}: empty batch")


def focal_loss(pred: torch.Tensor, target: torch.Tensor, params: FocalParams = FocalParams(),
               class_balanced_alpha: bool = False) -> torch.Tensor:
    """
    Mean over elements of -alpha * (1 - p_t)^gamma * log(p_t), with
    p_t = y' for positives and 1 - y' for negatives.
    """
    _check_pair(pred, target, "focal_loss")
    p = pred.clamp(PRED_EPS, 1.0 - PRED_EPS)
    p_t = target * p + (1.0 - target) * (1.0 - p)
    if class_balanced_alpha:
        if not 0 < params.alpha < 1:
            raise ConfigError(f"class_balanced_alpha needs alpha in (0, 1), got {params.alpha}")
        alpha = params.alpha * target + (1.0 - params.alpha) * (1.0 - target)
    else:
        alpha = params.alpha
    return (-alpha * (1.0 - p_t) ** params.gamma * torch.log(p_t)).mean()


def fbeta_loss(pred: torch.Tensor, target: torch.Tensor, params: FBetaParams = FBetaParams(),
               conventional: bool = False) -> torch.Tensor:
    """
    1 - (w*TP + eps) / (w*TP + beta^2*FN + FP + eps) from batch-level soft counts
    TP = sum(y*y'), FP = sum((1-y)*y'), FN = sum(y*(1-y')). The weight w is
    (1 + beta), or (1 + beta^2) when `conventional`.
    """
    _check_pair(pred, target, "fbeta_loss")
    weight = 1.0 + (params.beta ** 2 if conventional else params.beta)
    tp = (target * pred).sum()
    fp = ((1.0 - target) * pred).sum()
    fn = (target * (1.0 - pred)).sum()
    score = (weight * tp + params.eps) / (weight * tp + params.beta ** 2 * fn + fp + params.eps)
    return 1.0 - score


def hybrid_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return (cfg.hybrid.rho1 * focal_loss(pred, target, cfg.focal, cfg.class_balanced_alpha)
            + cfg.hybrid.rho2 * fbeta_loss(pred, target, cfg.fbeta, cfg.fbeta_conventional))


def _per_sample(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1) if t.dim() >= 3 else t.reshape(1, -1)


def kr_loss(pred: torch.Tensor, target: torch.Tensor, params: KRParams = KRParams()) -> torch.Tensor:
    """
    rho3 * MSE(y, y') + rho4 * (1 - 2*sum(y*y') / (sum(y) + sum(y') + eps)).

    Inputs of shape (N, ...) with 3+ dims are treated as N samples whose overlap
    terms are averaged; a bare 2D map is one sample.
    """
    _check_pair(pred, target, "kr_loss")
    p, y = _per_sample(pred), _per_sample(target)
    mse = ((y - p) ** 2).mean()
    overlap = 1.0 - 2.0 * (y * p).sum(dim=1) / (y.sum(dim=1) + p.sum(dim=1) + params.eps)
    return params.rho3 * mse + params.rho4 * overlap.mean()


def heatmap_mse_loss(pred: torch.Tensor, target: torch.Tensor, params: KRParams = KRParams()) -> torch.Tensor:
    """MSE-only heatmap loss with the same rho3 weight as the KR loss."""
    _check_pair(pred, target, "heatmap_mse_loss")
    return params.rho3 * ((target - pred) ** 2).mean()


class HybridLoss(nn.Module):
    def __init__(self, cfg: LossConfig = LossConfig()) -> None:
        super().__init__()
        self.cfg = cfg

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return hybrid_loss(pred, target, self.cfg)


class HeatmapLoss(nn.Module):
    def __init__(self, cfg: LossConfig = LossConfig()) -> None:
        super().__init__()
        self.cfg = cfg
        self._fn = kr_loss if cfg.loc_loss == "kr" else heatmap_mse_loss

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return self._fn(pred, target, self.cfg.kr)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(loss_fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], tol: float = 1e-4,
               step: float = 1e-5, wrt: Tuple[int, ...] = (0,)) -> GradCheckReport:
    """
    Compare autograd gradients of `loss_fn(*inputs)` against central differences
    in float64, for every element of the inputs indexed by `wrt`.

    The relative error of each element is |g_auto - g_num| / max(|g_auto|, |g_num|, 1e-6).

    Raises:
        GradCheckError: the loss is not finite at a checked point
        ValueError: more than GRAD_CHECK_MAX_ELEMENTS elements would be checked
    """
    xs = [t.detach().to(torch.float64).clone() for t in inputs]
    n_elements = sum(xs[i].numel() for i in wrt)
    if n_elements > GRAD_CHECK_MAX_ELEMENTS:
        raise ValueError(f"grad_check checks at most {GRAD_CHECK_MAX_ELEMENTS} elements, got {n_elements}")
    for i in wrt:
        xs[i].requires_grad_(True)
    loss = loss_fn(*xs)
    if not torch.isfinite(loss):
        raise GradCheckError(f"Loss is not finite at the checked point: {loss.item()}")
    analytic = torch.autograd.grad(loss, [xs[i] for i in wrt])

    max_rel, max_abs = 0.0, 0.0
    with torch.no_grad():
        for grad, i in zip(analytic, wrt):
            flat = xs[i].view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                f_plus = loss_fn(*xs).item()
                flat[j] = orig - step
                f_minus = loss_fn(*xs).item()
                flat[j] = orig
                if not (torch.isfinite(torch.tensor(f_plus)) and torch.isfinite(torch.tensor(f_minus))):
                    raise GradCheckError(f"Loss became non-finite when probing element {j} of input {i}")
                numeric = (f_plus - f_minus) / (2.0 * step)
                auto = grad.view(-1)[j].item()
                abs_err = abs(auto - numeric)
                max_abs = max(max_abs, abs_err)
                max_rel = max(max_rel, abs_err / max(abs(auto), abs(numeric), 1e-6))
    report = GradCheckReport(max_rel, max_abs, tol, n_elements)
    logger.debug(f"grad_check: {report}")
    return report


def build_classification_criterion(cfg: LossConfig) -> nn.Module:
    return HybridLoss(cfg)


def build_localization_criterion(cfg: LossConfig) -> nn.Module:
    return HeatmapLoss(cfg)
