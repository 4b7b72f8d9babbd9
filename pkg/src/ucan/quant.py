"""Blockwise absmax 4-bit quantisation onto the normal-float codebook."""

from dataclasses import dataclass

import torch

from ucan.errors import DimensionError

# 16 normal-float levels, scaled so the extremes are -1 and 1.
NF4_CODEBOOK = torch.tensor(
    [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.44070982933044434,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ],
    dtype=torch.float32,
)

DEFAULT_BLOCK_SIZE = 64


@dataclass
class QuantState:
    """Codes and per-block scales of a quantised matrix."""

    codes: torch.Tensor
    scales: torch.Tensor
    block_size: int
    shape: tuple[int, ...]

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


def max_codebook_gap() -> float:
    """Largest distance between adjacent codebook levels."""
    return float((NF4_CODEBOOK[1:] - NF4_CODEBOOK[:-1]).max())


def quantize(weight: torch.Tensor, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantState:
    """Quantise a tensor blockwise; a short final block is allowed.

    Args:
        weight: Tensor of any shape.
        block_size: Elements per absmax block.

    Returns:
        Quantisation state.

    Raises:
        DimensionError: If ``weight`` is empty.
    """
    if weight.numel() == 0:
        raise DimensionError("weight", "non-empty tensor", tuple(weight.shape))
    if block_size < 1:
        raise ValueError("block_size must be positive")
    flat = weight.detach().reshape(-1).to(torch.float32)
    pad = (-flat.numel()) % block_size
    blocks = torch.nn.functional.pad(flat, (0, pad)).view(-1, block_size)
    scales = blocks.abs().amax(dim=1)
    safe = torch.where(scales > 0, scales, torch.ones_like(scales))
    normalised = blocks / safe.unsqueeze(1)
    codes = (normalised.unsqueeze(-1) - NF4_CODEBOOK).abs().argmin(dim=-1)
    return QuantState(codes.to(torch.uint8), scales, block_size, tuple(weight.shape))


def dequantize(state: QuantState) -> torch.Tensor:
    """Recover the float proxy of a quantised tensor."""
    values = NF4_CODEBOOK[state.codes.long()] * state.scales.unsqueeze(1)
    return values.reshape(-1)[: state.numel].reshape(state.shape)


def error_bound(state: QuantState) -> torch.Tensor:
    """Per-block bound on ``|W - dequantize(quantize(W))|``."""
    return state.scales * (max_codebook_gap() / 2.0)


def dequantized_proxy(
    weight: torch.Tensor, block_size: int = DEFAULT_BLOCK_SIZE
) -> torch.Tensor:
    """Round-trip a weight through the codec."""
    return dequantize(quantize(weight, block_size))
