"""Masked activation statistics over the forget and retain sides.

Accumulators keep float64 sums and counts, so any batching or sharding of the
same samples merges to the same result up to rounding.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from ucan.checkpoint import save_tensors
from ucan.data import Side, TokenBatch, check_mask
from ucan.errors import ContractError, DimensionError
from ucan.model import ActivationCapture, AdapterModel, forward

logger = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class LayerStats:
    """Running sums for one adapted layer's input space."""

    forget_sum: torch.Tensor
    retain_sum: torch.Tensor
    sq_sum: torch.Tensor
    forget_count: int = 0
    retain_count: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "LayerStats":
        """Empty accumulator for a ``dim``-wide layer input."""
        return cls(
            torch.zeros(dim, dtype=torch.float64),
            torch.zeros(dim, dtype=torch.float64),
            torch.zeros(dim, dtype=torch.float64),
        )

    @property
    def dim(self) -> int:
        return int(self.sq_sum.shape[0])

    def merge(self, other: "LayerStats") -> "LayerStats":
        """Combine two accumulators of the same width."""
        if other.dim != self.dim:
            raise DimensionError("layer stats", self.dim, other.dim)
        return LayerStats(
            self.forget_sum + other.forget_sum,
            self.retain_sum + other.retain_sum,
            self.sq_sum + other.sq_sum,
            self.forget_count + other.forget_count,
            self.retain_count + other.retain_count,
        )


@dataclass
class ActivationSummary:
    """Per-layer forget/retain means and retain-side squared sums."""

    layers: list[LayerStats]

    @classmethod
    def empty(cls, dims: Sequence[int]) -> "ActivationSummary":
        """Summary with zeroed accumulators for the given layer widths."""
        return cls([LayerStats.zeros(d) for d in dims])

    @classmethod
    def for_model(cls, model: AdapterModel) -> "ActivationSummary":
        """Summary sized for every adapted layer of ``model``."""
        return cls.empty([layer.d_in for layer in model.layers])

    def merge(self, other: "ActivationSummary") -> "ActivationSummary":
        """Combine summaries built from disjoint shards."""
        if len(other.layers) != len(self.layers):
            raise DimensionError("summary layers", len(self.layers), len(other.layers))
        merged = [a.merge(b) for a, b in zip(self.layers, other.layers)]
        return ActivationSummary(merged)

    def v_f(self, layer: int) -> torch.Tensor:
        """Mean forget-side activation vector of a layer."""
        stats = self.layers[layer]
        if stats.forget_count == 0:
            raise ContractError(f"layer {layer}: no forget samples accumulated")
        return stats.forget_sum / stats.forget_count

    def v_r(self, layer: int) -> torch.Tensor:
        """Mean retain-side activation vector of a layer."""
        stats = self.layers[layer]
        if stats.retain_count == 0:
            raise ContractError(f"layer {layer}: no retain samples accumulated")
        return stats.retain_sum / stats.retain_count

    def S(self, layer: int) -> torch.Tensor:  # noqa: N802
        """Accumulated squared retain-side activations of a layer."""
        return self.layers[layer].sq_sum

    def to_tensors(self) -> dict[str, torch.Tensor]:
        """Named tensors ``v_f.<l>``, ``v_r.<l>`` and ``S.<l>`` for dumping."""
        tensors = {}
        for index in range(len(self.layers)):
            tensors[f"v_f.{index}"] = self.v_f(index)
            tensors[f"v_r.{index}"] = self.v_r(index)
            tensors[f"S.{index}"] = self.S(index)
        return tensors


def masked_mean(capture: ActivationCapture, mask: torch.Tensor) -> list[torch.Tensor]:
    """Average each layer input over mask=1 positions, per sample.

    Args:
        capture: Layer inputs, each (batch, seq_len, d_in).
        mask: Binary (batch, seq_len) mask.

    Returns:
        One (batch, d_in) tensor per layer.

    Raises:
        ContractError: If a mask row selects nothing.
    """
    check_mask(mask)
    weights = mask.to(torch.float64).unsqueeze(-1)
    counts = weights.sum(dim=1)
    return [(h.to(torch.float64) * weights).sum(dim=1) / counts for h in capture.inputs]


def accumulate_side(
    summary: ActivationSummary, sample_vectors: Sequence[torch.Tensor], side: str
) -> ActivationSummary:
    """Add per-sample vectors to one side's running mean.

    Args:
        summary: Accumulator to update in place.
        sample_vectors: One (n_samples, d_in) tensor per layer.
        side: ``Side.FORGET`` or ``Side.RETAIN``.

    Returns:
        The updated summary.
    """
    if side not in (Side.FORGET, Side.RETAIN):
        raise ValueError(f"unknown side {side!r}")
    if len(sample_vectors) != len(summary.layers):
        raise DimensionError("layers", len(summary.layers), len(sample_vectors))
    for stats, vectors in zip(summary.layers, sample_vectors):
        if vectors.shape[-1] != stats.dim:
            raise DimensionError("sample vector", stats.dim, vectors.shape[-1])
        vectors = vectors.to(torch.float64).reshape(-1, stats.dim)
        if side == Side.FORGET:
            stats.forget_sum += vectors.sum(dim=0)
            stats.forget_count += vectors.shape[0]
        else:
            stats.retain_sum += vectors.sum(dim=0)
            stats.retain_count += vectors.shape[0]
    return summary


def accumulate_sq(
    summary: ActivationSummary,
    activations: Sequence[torch.Tensor],
    mask: Optional[torch.Tensor] = None,
) -> ActivationSummary:
    """Add squared retain-side activations to ``S``.

    Args:
        summary: Accumulator to update in place.
        activations: One tensor per layer, either (batch, seq_len, d_in) with
            ``mask`` selecting the positions, or (n, d_in) plain vectors.
        mask: Binary (batch, seq_len) mask for token-level activations.

    Returns:
        The updated summary.
    """
    if len(activations) != len(summary.layers):
        raise DimensionError("layers", len(summary.layers), len(activations))
    for stats, x in zip(summary.layers, activations):
        if x.shape[-1] != stats.dim:
            raise DimensionError("activation", stats.dim, x.shape[-1])
        x = x.to(torch.float64)
        if mask is not None:
            x = x * mask.to(torch.float64).unsqueeze(-1)
        stats.sq_sum += (x * x).reshape(-1, stats.dim).sum(dim=0)
    return summary


def finalize_norm(S: torch.Tensor, eps: float = EPS) -> torch.Tensor:  # noqa: N803
    """Column activation norms ``sqrt(S + eps)``."""
    return torch.sqrt(S + eps)


def _accumulate_batch(
    model: AdapterModel, summary: ActivationSummary, batch: TokenBatch, side: str
) -> None:
    _, capture = forward(model, batch, capture=True)
    assert capture is not None
    accumulate_side(summary, masked_mean(capture, batch.mask), side)
    if side == Side.RETAIN:
        accumulate_sq(summary, capture.inputs, batch.mask)


def collect_summary(
    model: AdapterModel,
    forget_batches: TokenBatch,
    retain_batches: TokenBatch,
    batch_size: int = 32,
) -> ActivationSummary:
    """Run forward-only passes over both sides and fill every accumulator.

    Args:
        model: Deployed model; weights are only read.
        forget_batches: Forget-side rows.
        retain_batches: Retain-side rows.
        batch_size: Rows per forward pass.

    Returns:
        Summary for every adapted layer.
    """
    summary = ActivationSummary.for_model(model)
    with torch.no_grad():
        sides = ((Side.FORGET, forget_batches), (Side.RETAIN, retain_batches))
        for side, rows in sides:
            for batch in rows.batches(batch_size):
                _accumulate_batch(model, summary, batch, side)
    logger.info(
        "Collected activations from %d forget / %d retain rows",
        len(forget_batches),
        len(retain_batches),
    )
    return summary


def save_summary(path: Path, summary: ActivationSummary) -> None:
    """Dump a summary as a named-tensor file."""
    counts = [[s.forget_count, s.retain_count] for s in summary.layers]
    meta = {"kind": "activation-summary", "counts": counts}
    save_tensors(path, summary.to_tensors(), meta)
