"""One-shot soft attenuation of adapter columns."""

import copy
import logging
import time
from dataclasses import dataclass, field

import torch

from ucan.data import TokenBatch
from ucan.errors import ContractError, DimensionError
from ucan.model import AdapterModel
from ucan.risk import RiskReport, Target, UcanConfig, score_layers
from ucan.signals import ActivationSummary, collect_summary

logger = logging.getLogger(__name__)


@dataclass
class LayerPlan:
    """Selected dimensions and retention factors for one layer."""

    selected: torch.Tensor
    alpha: torch.Tensor


@dataclass
class InterventionPlan:
    """Per-layer selections; ``alpha`` is 1.0 outside the selection."""

    layers: list[LayerPlan]

    def n_selected(self) -> int:
        """Total number of selected dimensions across layers."""
        return sum(int(layer.selected.numel()) for layer in self.layers)


@dataclass
class UnlearnResult:
    """Output of :func:`unlearn`."""

    model: AdapterModel
    report: RiskReport
    plan: InterventionPlan
    summary: ActivationSummary
    timing: dict[str, float] = field(default_factory=dict)


def select_intervention(r_dim: torch.Tensor, tau_risk: float) -> torch.Tensor:
    """Indices whose risk strictly exceeds the threshold."""
    return torch.nonzero(r_dim > tau_risk, as_tuple=False).flatten()


def retention_factor(
    r: float, tau: float, alpha_max: float, beta: float, eps: float
) -> float:
    """Retention factor of one selected dimension.

    Args:
        r: Fused risk, strictly above ``tau``.
        tau: Selection threshold.
        alpha_max: Factor at the threshold.
        beta: Decay exponent.
        eps: Denominator floor.

    Returns:
        ``alpha_max * (1 - (r - tau) / (1 - tau + eps)) ** beta``.

    Raises:
        ContractError: If ``r <= tau``.
    """
    if r <= tau:
        raise ContractError(f"risk {r} does not exceed tau {tau}")
    base = max(0.0, 1.0 - (r - tau) / (1.0 - tau + eps))
    return alpha_max * base**beta


def retention_factors(r_dim: torch.Tensor, config: UcanConfig) -> LayerPlan:
    """Vectorised selection and decay for one layer."""
    selected = select_intervention(r_dim, config.tau_risk)
    alpha = torch.ones_like(r_dim)
    if selected.numel():
        if config.hard_mask:
            alpha[selected] = 0.0
        else:
            risk = r_dim[selected]
            base = 1.0 - (risk - config.tau_risk) / (1.0 - config.tau_risk + config.eps)
            alpha[selected] = config.alpha_max * base.clamp_min(0.0) ** config.beta
    return LayerPlan(selected, alpha)


def plan_intervention(report: RiskReport, config: UcanConfig) -> InterventionPlan:
    """Build the plan for every layer of a risk report."""
    plan = InterventionPlan(
        [retention_factors(layer.r_dim, config) for layer in report.layers]
    )
    for index, layer in enumerate(plan.layers):
        logger.info("layer %d: %d dimensions selected", index, layer.selected.numel())
    return plan


def apply_column_scaling(weight: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Multiply column ``j`` of ``weight`` by ``alpha[j]`` in place.

    Raises:
        DimensionError: If ``alpha`` does not match the column count.
    """
    if weight.dim() != 2 or weight.shape[1] != alpha.shape[0]:
        raise DimensionError("alpha", weight.shape[-1], tuple(alpha.shape))
    with torch.no_grad():
        weight.mul_(alpha.to(weight.dtype).unsqueeze(0))
    return weight


def merged_copy(model: AdapterModel) -> AdapterModel:
    """Dense copy with each adapter folded into its base weight."""
    merged = copy.deepcopy(model)
    with torch.no_grad():
        for layer in merged.layers:
            layer.w0.add_(layer.delta())
            layer.w_b.zero_()
    return merged


def apply_plan(
    model: AdapterModel, plan: InterventionPlan, target: str
) -> AdapterModel:
    """Fold a plan into the weights.

    Adapter mode scales ``W_A`` columns of ``model`` in place. Full mode
    scales the merged dense weight of a copy and leaves ``model`` untouched.

    Returns:
        The model carrying the attenuated weights.
    """
    if len(plan.layers) != len(model.layers):
        raise DimensionError("plan layers", len(model.layers), len(plan.layers))
    if target == Target.FULL:
        model = merged_copy(model)
    for layer, layer_plan in zip(model.layers, plan.layers):
        if not layer_plan.selected.numel():
            continue
        weight = layer.w0 if target == Target.FULL else layer.w_a
        apply_column_scaling(weight.data, layer_plan.alpha)
    return model


def unlearn(
    model: AdapterModel,
    forget_batches: TokenBatch,
    retain_batches: TokenBatch,
    config: UcanConfig,
) -> UnlearnResult:
    """Run the full gradient-free pipeline on a deployed model.

    Statistics are collected with forward passes only, layers are scored,
    and the retention factors are folded into the weights. In adapter mode
    the call owns ``model`` and edits it in place.

    Args:
        model: Deployed model.
        forget_batches: Forget-side rows.
        retain_batches: Retain-side rows.
        config: Pipeline hyperparameters.

    Returns:
        The attenuated model with its report, plan, summary and stage timings.
    """
    config.validate()
    timing = {}
    start = time.perf_counter()
    summary = collect_summary(model, forget_batches, retain_batches, config.batch_size)
    timing["statistics_s"] = time.perf_counter() - start

    start = time.perf_counter()
    with torch.no_grad():
        report = score_layers(model, summary, config)
        plan = plan_intervention(report, config)
        model = apply_plan(model, plan, config.target)
    timing["intervention_s"] = time.perf_counter() - start
    logger.info(
        "Attenuated %d dimensions (%s mode) in %.3fs",
        plan.n_selected(),
        config.target,
        sum(timing.values()),
    )
    return UnlearnResult(model, report, plan, summary, timing)
