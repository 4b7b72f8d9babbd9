"""Comparison strategies: retraining, gradient ascent, NPO and hard pruning."""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from ucan.data import TokenBatch
from ucan.errors import ConfigError, EmptyLogError
from ucan.model import (
    AdapterModel,
    ModelConfig,
    TrainConfig,
    backward,
    build_model,
    fit_deployed,
    forward,
    set_trainable,
)
from ucan.risk import RiskReport

logger = logging.getLogger(__name__)

# Bound on |log(pi_theta / pi_ref)| before the NPO softplus.
LOG_RATIO_CLAMP = 50.0


class Method:
    """Baseline strategies."""

    RETRAIN = "retrain"
    GA = "ga"
    NPO = "npo"
    PRUNE = "prune"

    ALL = (RETRAIN, GA, NPO, PRUNE)


@dataclass(frozen=True)
class BaselineConfig:
    """Hyperparameters shared by the baselines.

    ``steps`` counts epochs over the forget rows for GA and NPO.
    """

    method: str = Method.GA
    lr: float = 1e-2
    steps: int = 3
    batch_size: int = 32
    npo_beta: float = 0.1
    prune_fraction: float = 0.1
    divergence_factor: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        """Check the fields the selected method uses.

        Raises:
            ConfigError: If a field is invalid.
        """
        if self.method not in Method.ALL:
            raise ConfigError("method", f"unknown method {self.method!r}")
        if self.method in (Method.GA, Method.NPO):
            if self.lr <= 0:
                raise ConfigError("lr", "must be positive")
            if self.steps < 0:
                raise ConfigError("steps", "must be non-negative")
            if self.batch_size < 1:
                raise ConfigError("batch_size", "must be positive")
        if self.method == Method.NPO and self.npo_beta <= 0:
            raise ConfigError("npo_beta", "must be positive")
        if self.method == Method.GA and self.divergence_factor <= 1:
            raise ConfigError("divergence_factor", "must exceed 1")
        if self.method == Method.PRUNE and not 0.0 <= self.prune_fraction <= 1.0:
            raise ConfigError("prune_fraction", "must lie in [0, 1]")


@dataclass
class BaselineResult:
    """Model produced by a gradient baseline plus its loss trace."""

    model: AdapterModel
    losses: list[float] = field(default_factory=list)
    diverged: bool = False


def retrain_on_remain(
    model_config: ModelConfig,
    retain_rows: TokenBatch,
    hyper: TrainConfig,
    init_seed: int,
) -> AdapterModel:
    """Fit a fresh model, backbone then adapters, on retain-side rows only.

    Raises:
        EmptyLogError: If there are no retain rows.
    """
    if len(retain_rows) == 0:
        raise EmptyLogError("retain set is empty; nothing to retrain on")
    model = build_model(model_config, init_seed)
    return fit_deployed(model, retain_rows, retain_rows, hyper)


def _epoch_batches(
    rows: TokenBatch, batch_size: int, generator: torch.Generator
) -> list[TokenBatch]:
    order = torch.randperm(len(rows), generator=generator)
    return [
        rows.select(order[start : start + batch_size])
        for start in range(0, len(rows), batch_size)
    ]


def gradient_ascent(
    model: AdapterModel, forget_rows: TokenBatch, config: BaselineConfig
) -> BaselineResult:
    """Raise next-item cross-entropy on the forget rows, adapters only.

    Works on a copy. Stops early, flagging divergence, once a batch loss
    exceeds ``divergence_factor`` times the first one.
    """
    config.validate()
    model = copy.deepcopy(model)
    params = set_trainable(model, backbone=False)
    optimizer = torch.optim.SGD(params, lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    result = BaselineResult(model)
    initial: Optional[float] = None
    for epoch in range(config.steps):
        for part in _epoch_batches(forget_rows, config.batch_size, generator):
            logits, _ = forward(model, part)
            loss = F.cross_entropy(logits, part.target)
            value = float(loss)
            initial = value if initial is None else initial
            result.losses.append(value)
            if not math.isfinite(value) or value > config.divergence_factor * initial:
                logger.warning(
                    "gradient ascent diverged at epoch %d (loss %.4g)", epoch, value
                )
                result.diverged = True
                model.eval()
                return result
            optimizer.zero_grad()
            backward(-loss)
            optimizer.step()
    model.eval()
    return result


def npo_loss(
    logp_theta: torch.Tensor, logp_ref: torch.Tensor, beta: float
) -> torch.Tensor:
    """Mean of ``(2/beta) * log(1 + (pi_theta / pi_ref) ** beta)``.

    Inputs are per-sample log-probabilities of the target item. The log
    ratio is clamped to ``[-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP]``.
    """
    log_ratio = logp_theta - logp_ref
    if not bool(torch.isfinite(log_ratio).all()):
        logger.warning("non-finite NPO log ratio clamped")
        log_ratio = torch.nan_to_num(log_ratio, nan=0.0)
    log_ratio = log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    return (2.0 / beta) * F.softplus(beta * log_ratio).mean()


def _target_logp(model: AdapterModel, rows: TokenBatch) -> torch.Tensor:
    logits, _ = forward(model, rows)
    return F.log_softmax(logits, dim=-1).gather(1, rows.target.unsqueeze(1)).squeeze(1)


def npo_unlearn(
    model: AdapterModel, forget_rows: TokenBatch, config: BaselineConfig
) -> BaselineResult:
    """Minimise the NPO loss against a frozen copy of the deployed model."""
    config.validate()
    reference = copy.deepcopy(model).eval()
    model = copy.deepcopy(model)
    params = set_trainable(model, backbone=False)
    optimizer = torch.optim.SGD(params, lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed)
    result = BaselineResult(model)
    for _ in range(config.steps):
        for part in _epoch_batches(forget_rows, config.batch_size, generator):
            with torch.no_grad():
                logp_ref = _target_logp(reference, part)
            loss = npo_loss(_target_logp(model, part), logp_ref, config.npo_beta)
            result.losses.append(float(loss))
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
    model.eval()
    return result


def _top_fraction(scores: torch.Tensor, fraction: float) -> torch.Tensor:
    k = math.floor(fraction * scores.numel())
    order = torch.sort(scores, descending=True, stable=True).indices
    return order[:k]


def hard_prune(
    model: AdapterModel,
    report: RiskReport,
    prune_fraction: Optional[float] = None,
    tau: Optional[float] = None,
) -> AdapterModel:
    """Zero the ``W_A`` columns of the highest-risk dimensions.

    Exactly one of ``prune_fraction`` (top share per layer) or ``tau``
    (risk strictly above the threshold) picks the columns. Works on a copy.
    """
    if (prune_fraction is None) == (tau is None):
        raise ConfigError("prune", "give exactly one of prune_fraction or tau")
    if prune_fraction is not None and not 0.0 <= prune_fraction <= 1.0:
        raise ConfigError("prune_fraction", "must lie in [0, 1]")
    model = copy.deepcopy(model)
    with torch.no_grad():
        for index, (layer, risk) in enumerate(zip(model.layers, report.layers)):
            if tau is not None:
                columns = torch.nonzero(risk.r_dim > tau, as_tuple=False).flatten()
            else:
                assert prune_fraction is not None
                columns = _top_fraction(risk.r_dim, prune_fraction)
            layer.w_a[:, columns] = 0.0
            logger.info(
                "hard prune layer %d: %d columns zeroed", index, columns.numel()
            )
    return model
