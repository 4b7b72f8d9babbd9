"""Low-rank-adapter next-item recommender."""

import logging
import math
import threading
from collections.abc import Iterator
from dataclasses import dataclass
from typing import Any, Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from ucan.data import TokenBatch
from ucan.errors import ConfigError, DimensionError, InputError, NumericError

logger = logging.getLogger(__name__)


class GradientOpCounter:
    """Process-wide count of backward passes."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    @property
    def count(self) -> int:
        """Number of backward passes issued so far."""
        with self._lock:
            return self._count

    def increment(self) -> None:
        """Record one backward pass."""
        with self._lock:
            self._count += 1


GRADIENT_OPS = GradientOpCounter()


class Stage:
    """Phases of fitting the deployed model."""

    BASE = "base"
    ADAPTER = "adapter"


def backward(loss: torch.Tensor) -> None:
    """Run ``loss.backward()`` and record it on the gradient-op counter."""
    GRADIENT_OPS.increment()
    loss.backward()


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the recommender.

    ``n_items`` of 0 means "take it from the data" and is resolved before a
    model is built.
    """

    n_items: int = 0
    n_reserved: int = 4
    embed_dim: int = 32
    hidden_dim: int = 64
    n_layers: int = 2
    rank: int = 4
    tie_output: bool = False

    @property
    def vocab_size(self) -> int:
        """Reserved ids plus one token per item."""
        return self.n_reserved + self.n_items

    def layer_dims(self) -> list[tuple[int, int]]:
        """Return ``(d_in, d_out)`` for each adapted layer."""
        dims = [self.embed_dim] + [self.hidden_dim] * self.n_layers
        return list(zip(dims[:-1], dims[1:]))

    def validate(self) -> None:
        """Check the configuration.

        Raises:
            ConfigError: If a field is invalid.
        """
        if self.n_items < 1:
            raise ConfigError("n_items", "must be positive")
        if self.n_layers < 1:
            raise ConfigError("n_layers", "need at least one adapted layer")
        if not 1 <= self.rank < min(self.embed_dim, self.hidden_dim):
            raise ConfigError("rank", "must be positive and below the layer widths")
        if self.tie_output and self.embed_dim != self.hidden_dim:
            raise ConfigError("tie_output", "needs embed_dim == hidden_dim")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for fitting the deployed model.

    ``base_epochs`` covers the backbone stage, ``epochs`` the adapter stage.
    """

    lr: float = 0.1
    epochs: int = 30
    base_epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        """Check the configuration.

        Raises:
            ConfigError: If a field is invalid.
        """
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be non-negative")
        if self.base_epochs < 0:
            raise ConfigError("base_epochs", "must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")


@dataclass
class ActivationCapture:
    """Inputs seen by each adapted layer, one (batch, seq_len, d_in) tensor each."""

    inputs: list[torch.Tensor]


def _uniform(
    shape: tuple[int, ...], bound: float, generator: torch.Generator
) -> torch.Tensor:
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


def adapter_output(
    x: torch.Tensor, w0: torch.Tensor, w_b: torch.Tensor, w_a: torch.Tensor
) -> torch.Tensor:
    """Compute ``W0 x + W_B (W_A x)`` over the last axis of ``x``."""
    return x @ w0.T + (x @ w_a.T) @ w_b.T


class AdapterLayer(nn.Module):
    """Frozen base weight plus a trainable low-rank delta."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rank: int,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        """Create a layer.

        Args:
            d_in: Input width.
            d_out: Output width.
            rank: Adapter rank.
            generator: Seeded generator for the initial weights.
        """
        super().__init__()
        generator = generator or torch.Generator().manual_seed(0)
        bound = 1.0 / math.sqrt(d_in)
        w0 = _uniform((d_out, d_in), bound, generator)
        self.w0 = nn.Parameter(w0, requires_grad=False)
        self.w_a = nn.Parameter(_uniform((rank, d_in), bound, generator))
        self.w_b = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def d_in(self) -> int:
        return int(self.w0.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.w0.shape[0])

    @property
    def rank(self) -> int:
        return int(self.w_a.shape[0])

    def trainable_count(self) -> int:
        """Number of adapter parameters, ``d_out*r + r*d_in``."""
        return self.d_out * self.rank + self.rank * self.d_in

    def delta(self) -> torch.Tensor:
        """Dense ``W_B W_A`` (d_out, d_in)."""
        return self.w_b @ self.w_a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError("layer input", self.d_in, x.shape[-1])
        return adapter_output(x, self.w0, self.w_b, self.w_a)


def adapter_forward(layer: AdapterLayer, x: torch.Tensor) -> torch.Tensor:
    """Apply one adapter layer to a vector or batch of vectors.

    Raises:
        DimensionError: If the trailing axis of ``x`` is not ``d_in``.
    """
    return layer(x)


class AdapterModel(nn.Module):
    """Embeddings, a stack of adapter layers with tanh, mean pooling, item head.

    Layers are applied per token; pooling averages the last hidden state over
    mask=1 positions only.
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        """Build a freshly initialised model.

        Args:
            config: Model shape.
            seed: Seed for every initial weight.
        """
        super().__init__()
        config.validate()
        self.config = config
        self.lineage: dict[str, Any] = {}
        generator = torch.Generator().manual_seed(seed)
        self.embedding = nn.Embedding(config.vocab_size, config.embed_dim)
        with torch.no_grad():
            self.embedding.weight.copy_(
                torch.randn(config.vocab_size, config.embed_dim, generator=generator)
            )
        self.layers = nn.ModuleList(
            AdapterLayer(d_in, d_out, config.rank, generator)
            for d_in, d_out in config.layer_dims()
        )
        self.output: Optional[nn.Linear] = None
        if not config.tie_output:
            self.output = nn.Linear(config.hidden_dim, config.n_items)
            bound = 1.0 / math.sqrt(config.hidden_dim)
            with torch.no_grad():
                self.output.weight.copy_(
                    _uniform((config.n_items, config.hidden_dim), bound, generator)
                )
                self.output.bias.zero_()

    def backbone_parameters(self) -> Iterator[nn.Parameter]:
        """Embedding and output head parameters (never W0)."""
        yield from self.embedding.parameters()
        if self.output is not None:
            yield from self.output.parameters()

    def adapter_parameters(self) -> Iterator[nn.Parameter]:
        """All ``W_A`` and ``W_B`` matrices."""
        for layer in self.layers:
            yield layer.w_a
            yield layer.w_b

    def forward(
        self, tokens: torch.Tensor, mask: torch.Tensor, capture: bool = False
    ) -> tuple[torch.Tensor, Optional[ActivationCapture]]:
        vocab = self.config.vocab_size
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= vocab):
            raise InputError(f"token ids must lie in [0, {self.config.vocab_size})")
        hidden = self.embedding(tokens)
        captured = []
        for layer in self.layers:
            if capture:
                captured.append(hidden.detach().clone())
            hidden = torch.tanh(layer(hidden))
        weights = mask.unsqueeze(-1)
        pooled = (hidden * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)
        if self.output is not None:
            logits = self.output(pooled)
        else:
            item_rows = self.embedding.weight[self.config.n_reserved :]
            logits = pooled @ item_rows.T
        return logits, ActivationCapture(captured) if capture else None


def forward(
    model: AdapterModel, batch: TokenBatch, capture: bool = False
) -> tuple[torch.Tensor, Optional[ActivationCapture]]:
    """Score every item for each row of a batch.

    Args:
        model: The recommender.
        batch: Templated rows.
        capture: Whether to record every adapted layer's input.

    Returns:
        Tuple of (logits over items, capture or None).
    """
    return model(batch.tokens, batch.mask, capture=capture)


def predict_logits(
    model: AdapterModel, batch: TokenBatch, batch_size: int = 256
) -> torch.Tensor:
    """Gradient-free logits for a possibly large batch."""
    with torch.no_grad():
        chunks = [forward(model, part)[0] for part in batch.batches(batch_size)]
    if not chunks:
        return torch.zeros(0, model.config.n_items)
    return torch.cat(chunks)


def mean_loss(model: AdapterModel, batch: TokenBatch, batch_size: int = 256) -> float:
    """Mean next-item cross-entropy over a batch, without gradients."""
    logits = predict_logits(model, batch, batch_size)
    return float(F.cross_entropy(logits, batch.target))


def set_trainable(
    model: AdapterModel, backbone: bool, adapters: bool = True
) -> list[nn.Parameter]:
    """Set ``requires_grad`` flags and return the parameters to optimise.

    ``W0`` is always frozen.
    """
    for layer in model.layers:
        layer.w0.requires_grad_(False)
    for param in model.adapter_parameters():
        param.requires_grad_(adapters)
    for param in model.backbone_parameters():
        param.requires_grad_(backbone)
    params = list(model.adapter_parameters()) if adapters else []
    if backbone:
        params += list(model.backbone_parameters())
    return params


def _fit(
    model: AdapterModel,
    batch: TokenBatch,
    params: list[nn.Parameter],
    hyper: TrainConfig,
    epochs: int,
    on_epoch: Optional[Callable[[int, float], None]],
) -> AdapterModel:
    optimizer = torch.optim.SGD(params, lr=hyper.lr)
    generator = torch.Generator().manual_seed(hyper.seed)
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(batch), generator=generator)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, len(batch), hyper.batch_size)):
            part = batch.select(order[start : start + hyper.batch_size])
            logits, _ = forward(model, part)
            loss = F.cross_entropy(logits, part.target)
            if not torch.isfinite(loss):
                raise NumericError(
                    "training loss is not finite",
                    {"epoch": epoch, "step": step, "lr": hyper.lr},
                )
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            total += float(loss) * len(part)
            seen += len(part)
        epoch_loss = total / max(seen, 1)
        logger.info("epoch %d loss %.4f", epoch + 1, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss)
    model.eval()
    return model


def train_base(
    model: AdapterModel,
    batch: TokenBatch,
    hyper: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> AdapterModel:
    """Fit embeddings and output head for ``hyper.base_epochs`` epochs.

    Adapters are held fixed. With ``W_B`` still at zero they contribute
    nothing, so this fits the backbone alone.

    Raises:
        NumericError: If a loss becomes NaN or infinite.
    """
    hyper.validate()
    params = set_trainable(model, backbone=True, adapters=False)
    return _fit(model, batch, params, hyper, hyper.base_epochs, on_epoch)


def train_adapter(
    model: AdapterModel,
    batch: TokenBatch,
    hyper: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> AdapterModel:
    """Fit the adapters on next-item rows with plain SGD.

    Embeddings, head and every ``W0`` stay frozen.

    Args:
        model: Model to train in place.
        batch: Training rows.
        hyper: Learning rate, epochs, batch size and seed.
        on_epoch: Optional callback receiving (epoch, mean loss).

    Returns:
        The trained model.

    Raises:
        NumericError: If a loss becomes NaN or infinite.
    """
    hyper.validate()
    params = set_trainable(model, backbone=False)
    return _fit(model, batch, params, hyper, hyper.epochs, on_epoch)


def fit_deployed(
    model: AdapterModel,
    base_rows: TokenBatch,
    rows: TokenBatch,
    hyper: TrainConfig,
    on_epoch: Optional[Callable[[str, int, float], None]] = None,
) -> AdapterModel:
    """Fit the backbone on ``base_rows``, then the adapters on ``rows``.

    The base stage never sees rows outside ``base_rows``, so whatever the
    model learns from the rest of ``rows`` is held by the adapters.

    Args:
        model: Freshly built model, trained in place.
        base_rows: Rows for the backbone stage.
        rows: Rows for the adapter stage.
        hyper: Shared hyperparameters; ``base_epochs`` and ``epochs`` set the
            length of each stage.
        on_epoch: Optional callback receiving (stage, epoch, mean loss).

    Returns:
        The deployed model.
    """

    def report(stage: str) -> Optional[Callable[[int, float], None]]:
        if on_epoch is None:
            return None
        callback = on_epoch
        return lambda epoch, loss: callback(stage, epoch, loss)

    logger.info("Fitting backbone on %d rows", len(base_rows))
    train_base(model, base_rows, hyper, report(Stage.BASE))
    logger.info("Fitting adapters on %d rows", len(rows))
    return train_adapter(model, rows, hyper, report(Stage.ADAPTER))


def build_model(config: ModelConfig, seed: int) -> AdapterModel:
    """Build a model with seeded initial weights."""
    return AdapterModel(config, seed=seed)
