"""Forgetting and utility metrics for an original/unlearned model pair."""

import csv
import io
import json
import logging
import math
import time
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, NamedTuple, Optional, TypeVar

import torch
import torch.nn.functional as F

from ucan.data import TokenBatch
from ucan.errors import DimensionError, NumericError
from ucan.model import GRADIENT_OPS, AdapterModel, predict_logits

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PROB_FLOOR = 1e-12
CUTOFFS = (5, 10)

T = TypeVar("T")


@dataclass
class RankedList:
    """Ranked recommendations for a set of queries.

    Ties are broken by ascending item id.

    Attributes:
        top_items: (n_queries, k) item ids in descending score order.
        truth: (n_queries,) ground-truth item ids.
        ranks: (n_queries,) 1-based rank of the truth in the full ranking.
    """

    top_items: torch.Tensor
    truth: torch.Tensor
    ranks: torch.Tensor

    def __len__(self) -> int:
        return int(self.truth.shape[0])


class TopKScores(NamedTuple):
    """Recall, MRR and NDCG at one cut-off."""

    recall: float
    mrr: float
    ndcg: float

    def mean(self) -> float:
        """Arithmetic mean of the three scores."""
        return (self.recall + self.mrr + self.ndcg) / 3.0


def rank_items(
    logits: torch.Tensor, truth: torch.Tensor, k: int = max(CUTOFFS)
) -> RankedList:
    """Rank items per query by descending score.

    Args:
        logits: (n_queries, n_items) scores.
        truth: (n_queries,) ground-truth ids.
        k: Length of the stored top list.

    Returns:
        Ranked lists with the truth's full-ranking position.
    """
    if logits.shape[0] != truth.shape[0]:
        raise DimensionError("truth", logits.shape[0], truth.shape[0])
    order = torch.sort(logits, dim=1, descending=True, stable=True).indices
    truth_score = logits.gather(1, truth.unsqueeze(1))
    ids = torch.arange(logits.shape[1]).unsqueeze(0)
    tied_before = (logits == truth_score) & (ids < truth.unsqueeze(1))
    ahead = (logits > truth_score) | tied_before
    ranks = ahead.sum(dim=1) + 1
    return RankedList(order[:, :k], truth, ranks)


def _check(lists: RankedList, k: int) -> None:
    if k < 1:
        raise ValueError("K must be at least 1")
    if len(lists) == 0:
        raise NumericError("ranking metric over an empty query set")


def recall_at_k(lists: RankedList, k: int) -> float:
    """Share of queries with the truth in the top ``k``."""
    _check(lists, k)
    return float((lists.ranks <= k).double().mean())


def mrr_at_k(lists: RankedList, k: int) -> float:
    """Mean reciprocal rank, zero beyond ``k``."""
    _check(lists, k)
    ranks = lists.ranks.double()
    return float(torch.where(ranks <= k, 1.0 / ranks, torch.zeros_like(ranks)).mean())


def ndcg_at_k(lists: RankedList, k: int) -> float:
    """Single-target NDCG, ``1/log2(rank+1)`` within ``k``, zero beyond."""
    _check(lists, k)
    ranks = lists.ranks.double()
    gains = 1.0 / torch.log2(ranks + 1.0)
    return float(torch.where(ranks <= k, gains, torch.zeros_like(ranks)).mean())


def topk_scores(lists: RankedList, k: int) -> TopKScores:
    """All three ranking metrics at one cut-off."""
    return TopKScores(recall_at_k(lists, k), mrr_at_k(lists, k), ndcg_at_k(lists, k))


def ranking_metrics(lists: RankedList) -> dict[str, float]:
    """Recall/MRR/NDCG at every cut-off, keyed like ``recall@10``."""
    metrics = {}
    for k in CUTOFFS:
        scores = topk_scores(lists, k)
        metrics[f"recall@{k}"] = scores.recall
        metrics[f"mrr@{k}"] = scores.mrr
        metrics[f"ndcg@{k}"] = scores.ndcg
    return metrics


def tradeoff_at_10(
    forget_o: TopKScores,
    retain_o: TopKScores,
    forget_u: TopKScores,
    retain_u: TopKScores,
) -> float:
    """Relative forgetting gain minus relative utility loss, in percent.

    Args:
        forget_o: Original model, forget side, @10.
        retain_o: Original model, retain side, @10.
        forget_u: Unlearned model, forget side, @10.
        retain_u: Unlearned model, retain side, @10.

    Raises:
        NumericError: If an original-model mean is zero.
    """
    e_o, u_o = forget_o.mean(), retain_o.mean()
    if e_o == 0 or u_o == 0:
        raise NumericError("trade-off undefined: original @10 mean is zero")
    forget_gain = (e_o - forget_u.mean()) / e_o
    retain_loss = (u_o - retain_u.mean()) / u_o
    return 100.0 * (forget_gain - retain_loss)


def _log_probs(logits: torch.Tensor) -> torch.Tensor:
    probs = F.softmax(logits.double(), dim=-1).clamp_min(PROB_FLOOR)
    return probs.log()


def kl_from_logits(logits_o: torch.Tensor, logits_u: torch.Tensor) -> float:
    """Mean ``KL(P_o || P_u)`` over rows, with probabilities floored."""
    if logits_o.shape != logits_u.shape:
        raise DimensionError("logits", tuple(logits_o.shape), tuple(logits_u.shape))
    return kl_from_log_probs(_log_probs(logits_o), _log_probs(logits_u))


def kl_from_log_probs(log_p: torch.Tensor, log_q: torch.Tensor) -> float:
    """Mean ``sum_y P(y) (log P(y) - log Q(y))`` over rows."""
    terms = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    value = float(terms.mean())
    if not math.isfinite(value):
        raise NumericError("KL divergence is not finite")
    return max(value, 0.0)


def kl_divergence(
    model_o: AdapterModel, model_u: AdapterModel, forget_batches: TokenBatch
) -> float:
    """``KL(P_original || P_unlearned)`` averaged over forget queries."""
    return kl_from_logits(
        predict_logits(model_o, forget_batches), predict_logits(model_u, forget_batches)
    )


def top1(logits: torch.Tensor) -> torch.Tensor:
    """Argmax per row, lowest item id on ties."""
    return torch.sort(logits, dim=1, descending=True, stable=True).indices[:, 0]


def shift_from_logits(logits_o: torch.Tensor, logits_u: torch.Tensor) -> float:
    """Percentage of rows whose top-1 item differs."""
    if logits_o.shape[0] == 0:
        raise NumericError("prediction shift over an empty query set")
    return 100.0 * float((top1(logits_o) != top1(logits_u)).double().mean())


def prediction_shift(
    model_o: AdapterModel, model_u: AdapterModel, forget_batches: TokenBatch
) -> float:
    """Percentage of forget queries whose top-1 recommendation changes."""
    return shift_from_logits(
        predict_logits(model_o, forget_batches), predict_logits(model_u, forget_batches)
    )


def perplexity_from_target_probs(probs: torch.Tensor) -> float:
    """``exp`` of the mean negative log-probability of the targets."""
    nll = -probs.double().clamp_min(PROB_FLOOR).log()
    return math.exp(float(nll.mean()))


def perplexity(model: AdapterModel, forget_batches: TokenBatch) -> float:
    """Perplexity of the ground-truth items over forget queries."""
    logits = predict_logits(model, forget_batches).double()
    probs = F.softmax(logits, dim=-1).gather(1, forget_batches.target.unsqueeze(1))
    return perplexity_from_target_probs(probs.squeeze(1))


@dataclass
class RunStats:
    """Cost of one unlearning run."""

    wall_clock_s: float
    throughput_samples_per_s: float
    gradient_op_count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "wall_clock_s": self.wall_clock_s,
            "throughput_samples_per_s": self.throughput_samples_per_s,
            "gradient_op_count": self.gradient_op_count,
        }


def throughput(n_samples: int, seconds: float) -> float:
    """Samples per second, finite even for a zero-length interval."""
    return n_samples / max(seconds, 1e-9)


def measure_run(fn: Callable[[], T], n_samples: int) -> tuple[T, RunStats]:
    """Time a strategy call and count the backward passes it issues.

    Args:
        fn: Zero-argument callable running the strategy.
        n_samples: Number of samples the strategy processes.

    Returns:
        Tuple of (fn's result, run statistics).
    """
    ops_before = GRADIENT_OPS.count
    start = time.perf_counter()
    result = fn()
    elapsed = time.perf_counter() - start
    ops = GRADIENT_OPS.count - ops_before
    stats = RunStats(elapsed, throughput(n_samples, elapsed), ops)
    logger.info(
        "run took %.3fs (%.1f samples/s, %d gradient ops)",
        stats.wall_clock_s,
        stats.throughput_samples_per_s,
        stats.gradient_op_count,
    )
    return result, stats


@dataclass
class EvalReport:
    """All metrics for one (method, dataset, seed) run."""

    method: str
    dataset: str
    seed: int
    config_hash: str
    forget: dict[str, float]
    retain: dict[str, float]
    tradeoff_at_10: float
    kl: float
    pred_shift_pct: float
    ppl: float
    run: RunStats = field(default_factory=lambda: RunStats(0.0, 0.0, 0))
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        """Report as a dict with a fixed key order."""
        return {
            "schema_version": self.schema_version,
            "method": self.method,
            "dataset": self.dataset,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "forget": dict(self.forget),
            "retain": dict(self.retain),
            "tradeoff_at_10": self.tradeoff_at_10,
            "kl": self.kl,
            "pred_shift_pct": self.pred_shift_pct,
            "ppl": self.ppl,
            **self.run.to_dict(),
        }

    def to_json(self) -> str:
        """One JSON document, keys in stable order."""
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def csv_row(self) -> dict[str, Any]:
        """Flat row with ``forget.`` / ``retain.`` prefixed metric columns."""
        row = self.to_dict()
        for side in ("forget", "retain"):
            for key, value in row.pop(side).items():
                row[f"{side}.{key}"] = value
        return row


def write_csv(path: Path, rows: list[Mapping[str, Any]], append: bool = False) -> None:
    """Write rows with a header, or append them under an existing header."""
    path = Path(path)
    if not rows:
        return
    fieldnames = list(rows[0].keys())
    exists = append and path.is_file() and path.stat().st_size > 0
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
    if not exists:
        writer.writeheader()
    writer.writerows(rows)
    with open(path, "a" if exists else "w", encoding="utf-8", newline="") as handle:
        handle.write(buffer.getvalue())


def write_report(out_dir: Path, report: EvalReport) -> tuple[Path, Path]:
    """Write ``report.json`` and append to ``report.csv`` in ``out_dir``."""
    out_dir = Path(out_dir)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    json_path.write_text(report.to_json(), encoding="utf-8")
    write_csv(csv_path, [report.csv_row()], append=True)
    return json_path, csv_path


def side_scores(model: AdapterModel, queries: TokenBatch) -> dict[str, float]:
    """Ranking metrics of a model on one side's queries."""
    return ranking_metrics(rank_items(predict_logits(model, queries), queries.target))


def _at_10(metrics: Mapping[str, float]) -> TopKScores:
    return TopKScores(metrics["recall@10"], metrics["mrr@10"], metrics["ndcg@10"])


def evaluate(
    model_o: AdapterModel,
    model_u: AdapterModel,
    forget_eval: TokenBatch,
    retain_eval: TokenBatch,
    method: str = "ucan",
    dataset: str = "synthetic",
    seed: int = 0,
    config_hash: str = "",
    run: Optional[RunStats] = None,
) -> EvalReport:
    """Compute every metric for an original/unlearned pair.

    Args:
        model_o: Original deployed model.
        model_u: Unlearned model.
        forget_eval: Forget-side queries.
        retain_eval: Retain-side queries.
        method: Label of the strategy.
        dataset: Label of the dataset.
        seed: Run seed.
        config_hash: Hash of the run configuration.
        run: Cost of the unlearning run, if measured.

    Returns:
        The full report.
    """
    forget_o = side_scores(model_o, forget_eval)
    forget_u = side_scores(model_u, forget_eval)
    retain_o = side_scores(model_o, retain_eval)
    retain_u = side_scores(model_u, retain_eval)
    return EvalReport(
        method=method,
        dataset=dataset,
        seed=seed,
        config_hash=config_hash,
        forget=forget_u,
        retain=retain_u,
        tradeoff_at_10=tradeoff_at_10(
            _at_10(forget_o), _at_10(retain_o), _at_10(forget_u), _at_10(retain_u)
        ),
        kl=kl_divergence(model_o, model_u, forget_eval),
        pred_shift_pct=prediction_shift(model_o, model_u, forget_eval),
        ppl=perplexity(model_u, forget_eval),
        run=run or RunStats(0.0, 0.0, 0),
    )
