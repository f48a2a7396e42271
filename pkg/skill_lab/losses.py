"""
Losses - masked cross-entropy, numeral regression, EWC and their combination

    L_Q = L_CE + λ₁ · L_REG
    L   = L_Q  + λ₂ · L_EWC

L_REG compares the true result value y with ŷ, a differentiable reading of
the model's digit distributions at the masked result positions. L_EWC is the
Fisher-weighted quadratic pull towards the anchor parameters. λ₁ may follow
an exponential-moving-average schedule updated once per epoch.
"""
import logging
import math
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import numerics as nx
from .errors import ConfigError, DataError, IntegrityError
from .model import BoundParameters, ParameterVector

logger = logging.getLogger(__name__)

EMA_WEIGHTS = ((0.99, 0.01), (0.01, 0.99))
TOTAL_TOLERANCE = 1e-6


class LossBreakdown(BaseModel):
    """One step's loss components and the weights that combined them"""
    ce: float = Field(ge=0)
    reg: float = Field(ge=0)
    ewc: float = Field(ge=0)
    lambda1: float = Field(ge=0, le=1)
    lambda2: float = Field(ge=0)
    total: float

    @model_validator(mode="after")
    def _total_matches(self) -> "LossBreakdown":
        expected = self.ce + self.lambda1 * self.reg + self.lambda2 * self.ewc
        if abs(self.total - expected) > TOTAL_TOLERANCE * max(1.0, abs(expected)):
            raise ValueError(f"total {self.total} != ce + λ₁·reg + λ₂·ewc = {expected}")
        return self

    @property
    def quantitative(self) -> float:
        """L_Q = ce + λ₁·reg"""
        return self.ce + self.lambda1 * self.reg


class Lambda1Schedule(BaseModel):
    """λ₁ either held constant or moved towards reg/(ce+reg) once per epoch"""
    mode: Literal["constant", "ema"] = "constant"
    seed_value: float = Field(default=1e-4, ge=0, le=1)
    w_prev: float = 0.99
    w_curr: float = 0.01
    value: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "Lambda1Schedule":
        if (self.w_prev, self.w_curr) not in EMA_WEIGHTS:
            raise ValueError(f"EMA weights must be one of {EMA_WEIGHTS}, got ({self.w_prev}, {self.w_curr})")
        if self.value is None:
            self.value = self.seed_value
        return self

    @property
    def current(self) -> float:
        return float(self.value)


SCHEDULE_PRESETS: Dict[str, Lambda1Schedule] = {
    "off": Lambda1Schedule(mode="constant", seed_value=0.0),
    "const-1e-3": Lambda1Schedule(mode="constant", seed_value=1e-3),
    "const-1e-4": Lambda1Schedule(mode="constant", seed_value=1e-4),
    "ema-slow": Lambda1Schedule(mode="ema", seed_value=1e-4, w_prev=0.99, w_curr=0.01),
    "ema-fast": Lambda1Schedule(mode="ema", seed_value=1e-4, w_prev=0.01, w_curr=0.99),
}


def schedule_preset(name: str) -> Lambda1Schedule:
    try:
        return SCHEDULE_PRESETS[name].model_copy()
    except KeyError:
        raise ConfigError(f"unknown λ₁ schedule {name!r}; choose from {sorted(SCHEDULE_PRESETS)}") from None


class RegressionMode(BaseModel):
    formula: Literal["euclidean", "literal_abs"] = "euclidean"
    decode: Literal["soft", "hard"] = "soft"
    space: Literal["linear", "log"] = "linear"
    cap: Optional[float] = Field(default=None, gt=0)


def ce_loss(logits: nx.Tensor, targets: np.ndarray, masked_positions: Tuple[np.ndarray, np.ndarray]) -> nx.Tensor:
    """Mean negative log-likelihood of the targets over all masked positions"""
    batch_index, position_index = masked_positions
    if len(targets) == 0:
        raise DataError("cross-entropy needs at least one masked position")
    rows = nx.index_rows(logits, batch_index, position_index)
    picked = nx.pick(nx.log_softmax(rows), np.asarray(targets))
    return nx.scale(nx.mean_all(picked), -1.0)


def soft_decode_numeral(
    logits: nx.Tensor,
    masked_positions: Tuple[np.ndarray, np.ndarray],
    span_layout: np.ndarray,
    digit_ids: np.ndarray,
    batch_size: Optional[int] = None,
) -> nx.Tensor:
    """
    Expected numeral value per example from the digit distributions

    Args:
        logits: (batch, seq, vocab) model output
        masked_positions: (batch_index, position_index) of every masked slot
        span_layout: Place value of each masked slot, 0 for non-digit slots
        digit_ids: Vocabulary ids of '0'..'9'
        batch_size: Number of examples (defaults to logits' batch dimension)

    Returns:
        (batch,) float64 tensor: Σ_slots E[digit] · place_value
    """
    batch_index, position_index = masked_positions
    span_layout = np.asarray(span_layout, dtype=np.float64)
    batch_size = logits.shape[0] if batch_size is None else batch_size
    has_digit = np.zeros(batch_size, dtype=bool)
    has_digit[batch_index[span_layout != 0]] = True
    if not has_digit.all():
        missing = np.flatnonzero(~has_digit).tolist()
        raise DataError(f"masked span of example(s) {missing} contains no digit slots")

    rows = nx.index_rows(logits, batch_index, position_index)
    digit_probs = nx.softmax(nx.cast(nx.take_columns(rows, digit_ids), np.float64))
    expected = nx.matmul(digit_probs, np.arange(10, dtype=np.float64).reshape(10, 1))
    weighted = nx.mul(nx.reshape(expected, (len(span_layout),)), span_layout)
    segments = np.zeros((batch_size, len(span_layout)))
    segments[batch_index, np.arange(len(span_layout))] = 1.0
    return nx.reshape(nx.matmul(segments, nx.reshape(weighted, (len(span_layout), 1))), (batch_size,))


def hard_decode_numeral(predicted: str) -> Optional[float]:
    try:
        return float(predicted)
    except ValueError:
        return None


def reg_loss(
    y: Union[np.ndarray, float],
    y_hat: Union[nx.Tensor, np.ndarray, float],
    mode: Optional[RegressionMode] = None,
) -> nx.Tensor:
    """euclidean: sqrt(Σ (y−ŷ)²); literal_abs: sqrt(|Σ (y²−ŷ²)|)"""
    mode = mode or RegressionMode()
    if mode.space != "linear":
        raise ConfigError("log-space numeral regression is not implemented; use space='linear'")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if not np.all(np.isfinite(y)):
        raise DataError("regression targets must be finite")
    y_hat = y_hat if isinstance(y_hat, nx.Tensor) else nx.Tensor(np.atleast_1d(np.asarray(y_hat, dtype=np.float64)))
    if y_hat.shape != y.shape:
        raise DataError(f"regression target shape {y.shape} does not match prediction shape {y_hat.shape}")

    if mode.formula == "euclidean":
        loss = nx.sqrt(nx.sum_all(nx.square(nx.sub(y_hat, y))))
    else:
        loss = nx.sqrt(nx.absolute(nx.sum_all(nx.sub(y * y, nx.square(y_hat)))))
    if mode.cap is not None:
        loss = nx.clip_max(loss, mode.cap)
    return loss


def _check_manifests(theta_manifest, anchor: ParameterVector, fisher) -> None:
    if theta_manifest != anchor.manifest:
        raise IntegrityError("EWC anchor was built for a different architecture (slice manifest mismatch)")
    if fisher.manifest != anchor.manifest:
        raise IntegrityError(f"Fisher scores for task {fisher.task_id!r} do not match the anchor's slice manifest")


def ewc_loss(theta: Union[BoundParameters, ParameterVector], anchor: ParameterVector, fisher) -> nx.Tensor:
    """Σ_i ½ F_i (θ_i − θ*_i)², differentiable in θ when θ is bound to a record"""
    _check_manifests(theta.manifest, anchor, fisher)
    flat = theta.flat() if isinstance(theta, BoundParameters) else nx.Tensor(theta.values)
    return nx.quadratic_penalty(flat, anchor.values, fisher.values)


def total_loss(ce: float, reg: float, ewc: float, lambda1: float, lambda2: float) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"loss weights must be non-negative, got λ₁={lambda1}, λ₂={lambda2}")
    return LossBreakdown(
        ce=ce, reg=reg, ewc=ewc, lambda1=lambda1, lambda2=lambda2,
        total=ce + lambda1 * reg + lambda2 * ewc,
    )


def combine(
    ce: nx.Tensor, reg: Optional[nx.Tensor], ewc: Optional[nx.Tensor], lambda1: float, lambda2: float
) -> nx.Tensor:
    """Differentiable ce + λ₁·reg + λ₂·ewc; terms with weight 0 are left out of the graph"""
    total = ce
    if lambda1 and reg is not None:
        total = nx.add(total, nx.scale(reg, lambda1))
    if lambda2 and ewc is not None:
        total = nx.add(total, nx.scale(ewc, lambda2))
    return total


def update_lambda1(schedule: Lambda1Schedule, epoch_mean_ce: float, epoch_mean_reg: float) -> Lambda1Schedule:
    """λ₁ ← w_prev·λ_prev + w_curr·reg/(ce+reg); unchanged for constant mode or zero losses"""
    if schedule.mode == "constant":
        return schedule
    denominator = epoch_mean_ce + epoch_mean_reg
    if denominator <= 0 or not math.isfinite(denominator):
        logger.warning("λ₁ update skipped: ce + reg = %s", denominator)
        return schedule
    lambda_current = epoch_mean_reg / denominator
    value = schedule.w_prev * schedule.current + schedule.w_curr * lambda_current
    return schedule.model_copy(update={"value": value})
