"""Per-dimension risk scoring: contrastive gap calibrated by utility importance."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ucan.checkpoint import save_tensors
from ucan.errors import ConfigError, DimensionError
from ucan.model import AdapterLayer, AdapterModel
from ucan.quant import DEFAULT_BLOCK_SIZE, dequantized_proxy
from ucan.signals import EPS, ActivationSummary, finalize_norm

logger = logging.getLogger(__name__)


class Target:
    """Which weights the intervention scales."""

    ADAPTER = "adapter"
    FULL = "full"


class Ablation:
    """Components that can be switched off."""

    NO_UTILITY = "F"
    NO_CONTRAST = "C"
    HARD_MASK = "H"


class GapMode:
    """Forms of the contrastive gap."""

    SCALED = "scaled"  # ReLU(v_f - gamma * v_r)
    MARGIN = "margin"  # ReLU((v_f - v_r) - gamma)


@dataclass(frozen=True)
class UcanConfig:
    """Hyperparameters of the one-shot attenuation pipeline."""

    gamma: float = 0.5
    fusion_lambda: float = 0.3
    tau_risk: float = 0.2
    alpha_max: float = 0.1
    beta: float = 2.0
    eps: float = EPS
    target: str = Target.ADAPTER
    quant_proxy: bool = False
    quant_block_size: int = DEFAULT_BLOCK_SIZE
    ablations: tuple[str, ...] = field(default_factory=tuple)
    gap_mode: str = GapMode.SCALED
    batch_size: int = 256

    @property
    def no_utility(self) -> bool:
        return Ablation.NO_UTILITY in self.ablations

    @property
    def no_contrast(self) -> bool:
        return Ablation.NO_CONTRAST in self.ablations

    @property
    def hard_mask(self) -> bool:
        return Ablation.HARD_MASK in self.ablations

    def validate(self) -> None:
        """Check every field.

        Raises:
            ConfigError: If a field is out of range.
        """
        if self.gamma <= 0:
            raise ConfigError("gamma", "must be positive")
        if not 0.0 <= self.fusion_lambda <= 1.0:
            raise ConfigError("lambda", "must lie in [0, 1]")
        if not 0.0 <= self.tau_risk <= 1.0:
            raise ConfigError("tau", "must lie in [0, 1]")
        if not 0.0 < self.alpha_max <= 1.0:
            raise ConfigError("alpha_max", "must lie in (0, 1]")
        if self.beta <= 0:
            raise ConfigError("beta", "must be positive")
        if self.eps < 0:
            raise ConfigError("eps", "must be non-negative")
        if self.target not in (Target.ADAPTER, Target.FULL):
            raise ConfigError("target", f"unknown target {self.target!r}")
        if self.gap_mode not in (GapMode.SCALED, GapMode.MARGIN):
            raise ConfigError("gap_mode", f"unknown gap mode {self.gap_mode!r}")
        known = {Ablation.NO_UTILITY, Ablation.NO_CONTRAST, Ablation.HARD_MASK}
        for ablation in self.ablations:
            if ablation not in known:
                raise ConfigError("ablation", f"unknown ablation {ablation!r}")
        if self.quant_block_size < 1:
            raise ConfigError("quant_block_size", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")

    def describe(self) -> str:
        """Plain-text ``key = value`` echo of the configuration."""
        return "".join(f"{key} = {value}\n" for key, value in asdict(self).items())


@dataclass
class LayerRisk:
    """Scores for one layer's input dimensions."""

    r_gap: torch.Tensor
    r_imp: torch.Tensor
    gap_norm: torch.Tensor
    imp_norm: torch.Tensor
    r_dim: torch.Tensor


@dataclass
class RiskReport:
    """Risk scores for every adapted layer."""

    layers: list[LayerRisk]
    config: UcanConfig

    def to_tensors(self) -> dict[str, torch.Tensor]:
        """Named tensors ``R_dim.<l>``, ``r_gap.<l>``, ``r_imp.<l>``."""
        tensors = {}
        for index, layer in enumerate(self.layers):
            tensors[f"R_dim.{index}"] = layer.r_dim
            tensors[f"r_gap.{index}"] = layer.r_gap
            tensors[f"r_imp.{index}"] = layer.r_imp
        return tensors


def _same_dims(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(what, tuple(a.shape), tuple(b.shape))


def contrast_gap(
    v_f: torch.Tensor, v_r: torch.Tensor, gamma: float, mode: str = GapMode.SCALED
) -> torch.Tensor:
    """Positive excess of forget-side over retain-side activation.

    Args:
        v_f: Forget-side mean activations.
        v_r: Retain-side mean activations.
        gamma: Tolerance margin (> 0).
        mode: ``GapMode.SCALED`` or ``GapMode.MARGIN``.

    Returns:
        Non-negative gap per dimension.
    """
    _same_dims(v_f, v_r, "v_r")
    if gamma <= 0:
        raise ConfigError("gamma", "must be positive")
    if mode == GapMode.MARGIN:
        return torch.relu((v_f - v_r) - gamma)
    return torch.relu(v_f - gamma * v_r)


def minmax_norm(v: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Layer-wise min-max normalisation ``(v - min) / (max - min + eps)``."""
    if v.numel() == 0:
        raise DimensionError("vector", "non-empty", 0)
    low = v.min()
    return (v - low) / (v.max() - low + eps)


def utility_importance(w_proxy: torch.Tensor, norms: torch.Tensor) -> torch.Tensor:
    """Column mean magnitude times input activation norm.

    Args:
        w_proxy: (d_out, d_in) weight or its dequantised proxy.
        norms: (d_in,) non-negative activation norms.

    Returns:
        ``(1/d_out) * ||W[:, j]||_1 * norms[j]`` for each column ``j``.
    """
    if w_proxy.dim() != 2 or w_proxy.shape[1] != norms.shape[0]:
        raise DimensionError("norms", w_proxy.shape[-1], tuple(norms.shape))
    return column_importance(w_proxy.to(norms.dtype).abs().mean(dim=0), norms)


def column_importance(magnitude: torch.Tensor, norms: torch.Tensor) -> torch.Tensor:
    """Per-column mean magnitude times input activation norm."""
    _same_dims(magnitude, norms, "norms")
    return magnitude.to(norms.dtype) * norms


def fuse_risk_raw(
    gap_norm: torch.Tensor, imp_norm: torch.Tensor, lam: float
) -> torch.Tensor:
    """Pre-normalisation fused risk ``ReLU(lam*gap - (1-lam)*imp)``."""
    _same_dims(gap_norm, imp_norm, "imp_norm")
    return torch.relu(lam * gap_norm - (1.0 - lam) * imp_norm)


def fuse_risk(
    gap_norm: torch.Tensor, imp_norm: torch.Tensor, lam: float, eps: float = EPS
) -> torch.Tensor:
    """Fused risk re-normalised to ``[0, 1]``."""
    return minmax_norm(fuse_risk_raw(gap_norm, imp_norm, lam), eps)


def effective_weight(layer: AdapterLayer, target: str) -> torch.Tensor:
    """Weight whose columns the intervention scales.

    ``W_B W_A`` in adapter mode, the merged ``W0 + W_B W_A`` in full mode.
    Only the quantisation proxy needs it whole.
    """
    with torch.no_grad():
        if target == Target.FULL:
            return layer.w0 + layer.delta()
        return layer.delta()


def column_magnitude(
    layer: AdapterLayer, target: str, chunk: int = 256
) -> torch.Tensor:
    """Mean absolute value of each effective-weight column.

    The product ``W_B W_A`` is formed ``chunk`` columns at a time and each
    block is reduced to its column means before the next one is built.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    with torch.no_grad():
        means = []
        for start in range(0, layer.d_in, chunk):
            stop = start + chunk
            block = layer.w_b @ layer.w_a[:, start:stop]
            if target == Target.FULL:
                block = block + layer.w0[:, start:stop]
            means.append(block.abs().mean(dim=0))
        return torch.cat(means)


def score_layer(
    layer: AdapterLayer, summary: ActivationSummary, index: int, config: UcanConfig
) -> LayerRisk:
    """Score one layer's input dimensions."""
    norms = finalize_norm(summary.S(index), config.eps)
    if config.quant_proxy:
        weight = effective_weight(layer, config.target)
        proxy = dequantized_proxy(weight, config.quant_block_size)
        r_imp = utility_importance(proxy, norms)
    else:
        r_imp = column_importance(column_magnitude(layer, config.target), norms)

    v_f = summary.v_f(index)
    r_gap = contrast_gap(v_f, summary.v_r(index), config.gamma, config.gap_mode)
    if config.no_contrast:
        gap_norm = minmax_norm(v_f, config.eps)
    else:
        gap_norm = minmax_norm(r_gap, config.eps)

    if config.no_utility:
        imp_norm = torch.zeros_like(r_imp)
    else:
        imp_norm = minmax_norm(r_imp, config.eps)

    r_dim = fuse_risk(gap_norm, imp_norm, config.fusion_lambda, config.eps)
    return LayerRisk(r_gap, r_imp, gap_norm, imp_norm, r_dim)


def score_layers(
    model: AdapterModel, summary: ActivationSummary, config: UcanConfig
) -> RiskReport:
    """Score every adapted layer of a model.

    Args:
        model: Deployed model (read only).
        summary: Finalised activation summary.
        config: Scoring hyperparameters and ablations.

    Returns:
        Risk report with one entry per layer.
    """
    config.validate()
    if len(summary.layers) != len(model.layers):
        raise DimensionError("summary layers", len(model.layers), len(summary.layers))
    layers = []
    for index, layer in enumerate(model.layers):
        risk = score_layer(layer, summary, index, config)
        logger.debug(
            "layer %d: max gap %.4g, max importance %.4g",
            index,
            float(risk.r_gap.max()),
            float(risk.r_imp.max()),
        )
        layers.append(risk)
    return RiskReport(layers, config)


def save_risk_report(path: Path, report: RiskReport) -> Path:
    """Dump a report as a named-tensor file plus a ``.config.txt`` echo.

    Returns:
        Path of the config echo.
    """
    path = Path(path)
    meta = {"kind": "risk-report", **asdict(report.config)}
    save_tensors(path, report.to_tensors(), meta)
    echo = path.with_suffix(".config.txt")
    echo.write_text(report.config.describe(), encoding="utf-8")
    return echo
