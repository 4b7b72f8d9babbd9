"""End-to-end runs on the seeded synthetic log with a planted forget cluster.

These fit a full-size model and take a few seconds; they run with the rest of
the suite and can be skipped with ``pytest -m "not slow"``.
"""

import dataclasses
from typing import NamedTuple

import pytest

from ucan.baselines import Method
from ucan.cli import UCAN, StrategyRun, run_strategy
from ucan.config import RunConfig, derive_seed
from ucan.data import Queries, build_queries, forget_retain_split, generate_synthetic
from ucan.evaluation import EvalReport, evaluate, kl_divergence
from ucan.model import AdapterModel, build_model, fit_deployed
from ucan.risk import Ablation

pytestmark = pytest.mark.slow


class Deployed(NamedTuple):
    """A deployed model with the config and queries it was built from."""

    config: RunConfig
    model: AdapterModel
    queries: Queries


@pytest.fixture(scope="module")
def deployed() -> Deployed:
    """Model fitted on 50 users and 100 items with the defaults."""
    config = RunConfig()
    log, spec = generate_synthetic(
        config.dataset.n_users,
        config.dataset.n_items,
        derive_seed(config.seed, "synthetic"),
        config.dataset.planted_cluster_fraction,
    )
    forget, retain = forget_retain_split(log, spec)
    queries = build_queries(forget, retain, config.template)
    model_config = dataclasses.replace(config.model, n_items=log.n_items)
    config = dataclasses.replace(config, model=model_config)
    model = build_model(model_config, derive_seed(config.seed, "init"))
    fit_deployed(model, queries.retain_train, queries.train, config.train_hyper())
    return Deployed(config, model, queries)


def run(deployed: Deployed, method: str = UCAN, **ucan_changes: object) -> StrategyRun:
    """Run one strategy on the deployed model."""
    config = deployed.config
    if ucan_changes:
        ucan = dataclasses.replace(config.ucan, **ucan_changes)
        config = dataclasses.replace(config, ucan=ucan)
    return run_strategy(method, deployed.model, deployed.queries, config)


def run_and_evaluate(
    deployed: Deployed, method: str = UCAN, **ucan_changes: object
) -> EvalReport:
    """Run one strategy on the deployed model and score it."""
    result = run(deployed, method, **ucan_changes)
    return evaluate(
        deployed.model,
        result.model,
        deployed.queries.forget_eval,
        deployed.queries.retain_eval,
        method=method,
        run=result.stats,
    )


def relative_drop(report: EvalReport, side: str, original: EvalReport) -> float:
    """Relative fall of Recall@10 on one side."""
    before = getattr(original, side)["recall@10"]
    after = getattr(report, side)["recall@10"]
    return (before - after) / before


class TestPlantedForgetting:
    """Forgetting direction on the planted cluster."""

    def test_forget_drops_retain_holds(self, deployed: Deployed) -> None:
        """Test the cluster is forgotten while retain quality holds."""
        identity = run_and_evaluate(deployed, UCAN, tau_risk=1.0)
        report = run_and_evaluate(deployed)
        assert relative_drop(report, "forget", identity) >= 0.30
        assert relative_drop(report, "retain", identity) <= 0.10

    def test_beats_gradient_ascent(self, deployed: Deployed) -> None:
        """Test attenuation has a positive trade-off above gradient ascent's."""
        report = run_and_evaluate(deployed)
        ascent = run_and_evaluate(deployed, Method.GA)
        assert report.tradeoff_at_10 > 0.0
        assert report.tradeoff_at_10 > ascent.tradeoff_at_10

    def test_retrain_misses_cluster(self, deployed: Deployed) -> None:
        """Test a model never fitted on the cluster recalls less of it."""
        identity = run_and_evaluate(deployed, UCAN, tau_risk=1.0)
        retrained = run_and_evaluate(deployed, Method.RETRAIN)
        assert retrained.forget["recall@10"] < identity.forget["recall@10"]

    def test_recall_falls_with_coverage(self, deployed: Deployed) -> None:
        """Test forget recall does not rise as the threshold admits more dims."""
        recalls = [
            run_and_evaluate(deployed, tau_risk=tau).forget["recall@10"]
            for tau in (0.4, 0.3, 0.2, 0.1)
        ]
        one_query = 1.0 / len(deployed.queries.forget_eval)
        assert all(b <= a + one_query for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] <= recalls[0]


class TestAblationOrdering:
    """Soft decay against binary deletion of the same selection."""

    def test_same_selection(self, deployed: Deployed) -> None:
        """Test the hard mask changes the decay, not which dims are chosen."""
        full = run(deployed)
        hard = run(deployed, ablations=(Ablation.HARD_MASK,))
        assert full.extra["n_selected"] == hard.extra["n_selected"] > 0

    def test_hard_mask_moves_retain_further(self, deployed: Deployed) -> None:
        """Test binary deletion disturbs retain predictions more than soft decay."""
        retain = deployed.queries.retain_eval
        full = run(deployed).model
        hard = run(deployed, ablations=(Ablation.HARD_MASK,)).model
        assert kl_divergence(deployed.model, hard, retain) >= kl_divergence(
            deployed.model, full, retain
        )

    def test_hard_mask_no_better_on_retain(self, deployed: Deployed) -> None:
        """Test binary deletion keeps no more retain recall than soft decay."""
        full = run_and_evaluate(deployed)
        hard = run_and_evaluate(deployed, ablations=(Ablation.HARD_MASK,))
        assert hard.retain["recall@10"] <= full.retain["recall@10"]


class TestEfficiency:
    """Gradient-free contract and wall clock against the gradient baselines."""

    def test_gradient_ops(self, deployed: Deployed) -> None:
        """Test only the gradient baselines issue backward passes."""
        assert run_and_evaluate(deployed).run.gradient_op_count == 0
        for method in (Method.GA, Method.NPO):
            assert run_and_evaluate(deployed, method).run.gradient_op_count > 0

    def test_faster_than_gradient_ascent(self, deployed: Deployed) -> None:
        """Test one-shot attenuation finishes before three ascent epochs."""
        report = run_and_evaluate(deployed)
        ascent = run_and_evaluate(deployed, Method.GA)
        assert report.run.wall_clock_s < ascent.run.wall_clock_s
