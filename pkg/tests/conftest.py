"""Shared fixtures: a small seeded log and a briefly trained model."""

import copy

import pytest
import torch

from ucan.data import (
    InteractionLog,
    Queries,
    TemplateSpec,
    TokenBatch,
    build_queries,
    forget_retain_split,
    generate_synthetic,
)
from ucan.model import AdapterModel, ModelConfig, TrainConfig, fit_deployed

N_USERS = 12
N_ITEMS = 40

SMALL_MODEL = ModelConfig(n_items=N_ITEMS, embed_dim=8, hidden_dim=12, rank=2)


@pytest.fixture(scope="session")
def split() -> tuple[InteractionLog, InteractionLog]:
    """Forget/retain sides of a planted synthetic log."""
    log, spec = generate_synthetic(N_USERS, N_ITEMS, seed=3)
    return forget_retain_split(log, spec)


@pytest.fixture(scope="session")
def queries(split: tuple[InteractionLog, InteractionLog]) -> Queries:
    """Row sets of the synthetic split."""
    forget, retain = split
    return build_queries(forget, retain, TemplateSpec(max_len=16))


@pytest.fixture(scope="session")
def _trained(queries: Queries) -> AdapterModel:
    model = AdapterModel(SMALL_MODEL, seed=0)
    hyper = TrainConfig(epochs=3, base_epochs=3, batch_size=16)
    return fit_deployed(model, queries.retain_train, queries.train, hyper)


@pytest.fixture
def trained_model(_trained: AdapterModel) -> AdapterModel:
    """Private copy of a briefly trained small model."""
    return copy.deepcopy(_trained)


@pytest.fixture
def fresh_model() -> AdapterModel:
    """Untrained small model."""
    return AdapterModel(SMALL_MODEL, seed=0)


def random_batch(
    n_rows: int, seq_len: int, vocab: int, seed: int = 0, n_reserved: int = 4
) -> TokenBatch:
    """Random rows with a template prefix of 2 and at least one history token."""
    generator = torch.Generator().manual_seed(seed)
    tokens = torch.randint(n_reserved, vocab, (n_rows, seq_len), generator=generator)
    tokens[:, :2] = torch.tensor([1, 2])
    lengths = torch.randint(1, seq_len - 1, (n_rows,), generator=generator)
    positions = torch.arange(seq_len).unsqueeze(0)
    mask = ((positions >= 2) & (positions < 2 + lengths.unsqueeze(1))).float()
    keep = mask.bool() | (positions < 2)
    tokens = torch.where(keep, tokens, torch.zeros_like(tokens))
    target = torch.randint(0, vocab - n_reserved, (n_rows,), generator=generator)
    return TokenBatch(tokens, mask, target)
