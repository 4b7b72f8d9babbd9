"""Command-line interface for training, unlearning and evaluating."""

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

from ucan.attenuate import unlearn
from ucan.baselines import (
    Method,
    gradient_ascent,
    hard_prune,
    npo_unlearn,
    retrain_on_remain,
)
from ucan.checkpoint import load_checkpoint, save_checkpoint
from ucan.config import (
    RunConfig,
    Source,
    config_hash,
    derive_seed,
    load_config,
    save_config,
)
from ucan.data import (
    InteractionLog,
    Queries,
    SplitSpec,
    TemplateSpec,
    build_queries,
    five_core_filter,
    forget_retain_split,
    generate_synthetic,
    load_ml100k,
    manifest_sha256,
    read_manifest,
    write_manifest,
)
from ucan.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    EmptyLogError,
    UcanError,
)
from ucan.evaluation import (
    EvalReport,
    RunStats,
    evaluate,
    measure_run,
    write_csv,
    write_report,
)
from ucan.model import AdapterModel, build_model, fit_deployed
from ucan.risk import (
    Ablation,
    GapMode,
    RiskReport,
    Target,
    save_risk_report,
    score_layers,
)
from ucan.signals import ActivationSummary, collect_summary, save_summary

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

UCAN = "ucan"
STRATEGIES = (UCAN,) + Method.ALL

DEPLOYED = "deployed.ckpt"
UNLEARNED = "unlearned.ckpt"
MANIFEST = "split.tsv"
TRAIN_LOG = "train_log.tsv"
RUN_SUFFIX = ".run.json"

# Top-level RunConfig fields that flags may set; section fields use dotted dests.
CONFIG_KEYS = ("seed", "output_dir")


@dataclasses.dataclass
class StrategyRun:
    """Model produced by one strategy plus what it measured along the way."""

    model: AdapterModel
    stats: RunStats
    report: Optional[RiskReport] = None
    summary: Optional[ActivationSummary] = None
    extra: dict[str, Any] = dataclasses.field(default_factory=dict)


def configure_logging(verbosity: int) -> None:
    """Set the root log level from the number of ``-v`` flags."""
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", type=Path, help="TOML config file")
    parser.add_argument(
        "--seed", type=int, default=argparse.SUPPRESS, help="Run seed (default: 0)"
    )
    parser.add_argument(
        "-o",
        "--out",
        dest="output_dir",
        default=argparse.SUPPRESS,
        help="Output directory (overrides UCAN_OUTPUT_DIR and the config file)",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )


def _add_dataset_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("dataset")
    group.add_argument("--dataset", dest="dataset.source", choices=Source.ALL)
    group.add_argument("--data", dest="dataset.path", help="ML-100k u.data file")
    group.add_argument("--titles", dest="dataset.titles_path", help="ML-100k u.item")
    group.add_argument("--n-users", dest="dataset.n_users", type=int)
    group.add_argument("--n-items", dest="dataset.n_items", type=int)
    group.add_argument("--forget-fraction", dest="dataset.forget_fraction", type=float)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", dest="train.epochs", type=int)
    group.add_argument("--base-epochs", dest="train.base_epochs", type=int)
    group.add_argument("--lr", dest="train.lr", type=float)
    group.add_argument("--batch-size", dest="train.batch_size", type=int)
    group.add_argument("--rank", dest="model.rank", type=int)


def _add_ucan_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("attenuation")
    group.add_argument("--gamma", dest="ucan.gamma", type=float)
    group.add_argument("--lambda", dest="ucan.fusion_lambda", type=float)
    group.add_argument("--tau", dest="ucan.tau_risk", type=float)
    group.add_argument("--alpha-max", dest="ucan.alpha_max", type=float)
    group.add_argument("--beta", dest="ucan.beta", type=float)
    group.add_argument(
        "--target", dest="ucan.target", choices=(Target.ADAPTER, Target.FULL)
    )
    group.add_argument(
        "--gap-mode", dest="ucan.gap_mode", choices=(GapMode.SCALED, GapMode.MARGIN)
    )
    group.add_argument(
        "--ablation",
        dest="ucan.ablations",
        action="append",
        choices=(Ablation.NO_UTILITY, Ablation.NO_CONTRAST, Ablation.HARD_MASK),
        help="Switch off a component: F utility, C contrast, H soft decay (repeatable)",
    )
    group.add_argument("--quant-proxy", dest="ucan.quant_proxy", action="store_true")


def _add_baseline_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("baselines")
    group.add_argument("--method", dest="baseline.method", choices=Method.ALL)
    group.add_argument("--steps", dest="baseline.steps", type=int)
    group.add_argument("--baseline-lr", dest="baseline.lr", type=float)
    group.add_argument("--npo-beta", dest="baseline.npo_beta", type=float)
    group.add_argument("--prune-fraction", dest="baseline.prune_fraction", type=float)


def _add_artifact_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--checkpoint",
        type=Path,
        help=f"Deployed checkpoint (default: <out>/{DEPLOYED})",
    )
    parser.add_argument(
        "--manifest",
        "--forget-manifest",
        dest="manifest",
        type=Path,
        help=f"Split manifest (default: <out>/{MANIFEST})",
    )


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser.

    Every config flag defaults to "unset" so that only flags given on the
    command line override the config file.

    Returns:
        Configured ArgumentParser instance.
    """
    parser = argparse.ArgumentParser(
        prog="ucan",
        description="Gradient-free unlearning for low-rank-adapter recommenders.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        return commands.add_parser(
            name, help=help_text, argument_default=argparse.SUPPRESS
        )

    train = add_command("train", "Train the deployed model")
    split = add_command("split", "Write the forget/retain manifest only")
    for sub in (train, split):
        _add_common_flags(sub)
        _add_dataset_flags(sub)
    _add_train_flags(train)

    unlearn_cmd = add_command("unlearn", "One-shot attenuation")
    baseline = add_command("baseline", "Run a comparison strategy")
    for sub in (unlearn_cmd, baseline):
        _add_common_flags(sub)
        _add_artifact_flags(sub)
        _add_ucan_flags(sub)
        sub.add_argument("--output", type=Path, help="Output checkpoint path")
    _add_baseline_flags(baseline)
    _add_train_flags(baseline)

    evaluate_cmd = add_command("eval", "Compare two checkpoints")
    _add_common_flags(evaluate_cmd)
    evaluate_cmd.add_argument("candidate", type=Path, help="Unlearned checkpoint")
    evaluate_cmd.add_argument(
        "--original", type=Path, help=f"Original checkpoint (default: <out>/{DEPLOYED})"
    )
    evaluate_cmd.add_argument(
        "--manifest", type=Path, help=f"Split manifest (default: <out>/{MANIFEST})"
    )
    evaluate_cmd.add_argument("--label", help="Method label for the report")
    evaluate_cmd.add_argument("--run", type=Path, help="<method>.run.json with timing")

    sweep = add_command("sweep", "Evaluate a grid of settings")
    _add_common_flags(sweep)
    _add_artifact_flags(sweep)
    _add_ucan_flags(sweep)
    _add_baseline_flags(sweep)
    _add_train_flags(sweep)
    sweep.add_argument(
        "--param",
        required=True,
        choices=("tau", "lambda", "method"),
        help="Swept value",
    )
    sweep.add_argument(
        "--values",
        help="Comma-separated grid (default: 0.1,0.2,0.3,0.4 or every method)",
    )
    return parser


def collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Config overrides given on the command line, keyed ``section.field``.

    Args:
        args: Parsed arguments.

    Returns:
        Mapping of dotted config keys to flag values.
    """
    return {
        key: value
        for key, value in vars(args).items()
        if "." in key or key in CONFIG_KEYS
    }


def output_dir(config: RunConfig) -> Path:
    """Create and return the run's output directory."""
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, document: dict[str, Any]) -> None:
    """Write a JSON document with a trailing newline."""
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")


def load_interactions(config: RunConfig) -> tuple[InteractionLog, SplitSpec]:
    """Load or generate the interaction log and the split that goes with it.

    Args:
        config: Run configuration.

    Returns:
        Tuple of (log, split spec).

    Raises:
        DataError: If the log file is missing or nothing survives filtering.
    """
    dataset = config.dataset
    if dataset.source == Source.ML100K:
        assert dataset.path is not None
        path = Path(dataset.path)
        if not path.is_file():
            raise DataError(f"{path}: interaction file does not exist")
        titles = Path(dataset.titles_path) if dataset.titles_path else None
        log = five_core_filter(load_ml100k(path, titles), dataset.core)
        if not log.events:
            raise EmptyLogError(f"no events survive the {dataset.core}-core filter")
        return log, config.split_spec()

    log, spec = generate_synthetic(
        dataset.n_users,
        dataset.n_items,
        derive_seed(config.seed, "synthetic"),
        dataset.planted_cluster_fraction,
    )
    if spec.forget_items is None:
        spec = config.split_spec()
    return log, spec


def make_split(
    config: RunConfig, out: Path
) -> tuple[InteractionLog, InteractionLog, str]:
    """Split the configured log and write its manifest.

    Returns:
        Tuple of (forget, retain, manifest SHA-256).
    """
    log, spec = load_interactions(config)
    forget, retain = forget_retain_split(log, spec)
    if not retain.events:
        raise EmptyLogError("retain side of the split is empty")
    digest = write_manifest(out / MANIFEST, forget, retain)
    return forget, retain, digest


def template_from_lineage(model: AdapterModel) -> TemplateSpec:
    """Template the model was trained with, as recorded in its checkpoint."""
    try:
        raw = dict(model.lineage["template"])
        raw["template_tokens"] = tuple(raw["template_tokens"])
        return TemplateSpec(**raw)
    except (KeyError, TypeError) as exc:
        raise CheckpointError("checkpoint does not record its template") from exc


def run_file(method: str) -> str:
    """Name of the run record a strategy writes, e.g. ``ga.run.json``."""
    return f"{method}{RUN_SUFFIX}"


def dataset_from_lineage(model: AdapterModel, config: RunConfig) -> str:
    """Dataset a checkpoint was trained on, else the configured source."""
    return str(model.lineage.get("dataset", config.dataset.source))


def check_lineage(model: AdapterModel, manifest_digest: str, path: Path) -> None:
    """Refuse a checkpoint that was not trained on this manifest.

    Raises:
        CheckpointError: If the recorded manifest hash differs.
    """
    recorded = model.lineage.get("manifest_sha256")
    if recorded != manifest_digest:
        raise CheckpointError(
            f"{path}: checkpoint/manifest mismatch (hash check: "
            f"recorded {recorded}, manifest {manifest_digest})"
        )


def load_deployed(
    checkpoint: Path, manifest: Path
) -> tuple[AdapterModel, Queries, str]:
    """Load a deployed checkpoint and rebuild its queries from the manifest.

    Returns:
        Tuple of (model, queries, manifest SHA-256).

    Raises:
        CheckpointError: If the pair does not belong together.
    """
    model = load_checkpoint(checkpoint)
    forget, retain = read_manifest(manifest)
    digest = manifest_sha256(manifest)
    check_lineage(model, digest, checkpoint)
    if forget.n_items != model.config.n_items:
        raise CheckpointError(
            f"{checkpoint}: vocabulary of {model.config.n_items} items, "
            f"manifest has {forget.n_items}"
        )
    return model, build_queries(forget, retain, template_from_lineage(model)), digest


def run_strategy(
    method: str, model: AdapterModel, queries: Queries, config: RunConfig
) -> StrategyRun:
    """Run attenuation or one baseline on a copy of the deployed model.

    Args:
        method: ``ucan`` or one of ``Method.ALL``.
        model: Deployed model; left untouched.
        queries: Row sets rebuilt from the manifest.
        config: Run configuration.

    Returns:
        The resulting model with its run statistics.
    """
    forget_rows, retain_rows = queries.forget_train, queries.retain_train
    if method == UCAN:
        deployed = copy.deepcopy(model)
        result, stats = measure_run(
            lambda: unlearn(deployed, forget_rows, retain_rows, config.ucan),
            len(forget_rows) + len(retain_rows),
        )
        extra = {"n_selected": result.plan.n_selected(), "stages_s": result.timing}
        return StrategyRun(result.model, stats, result.report, result.summary, extra)

    hyper = config.baseline_hyper(method)
    hyper.validate()
    if method == Method.RETRAIN:
        train_hyper = config.train_hyper()
        retrained, stats = measure_run(
            lambda: retrain_on_remain(
                model.config,
                queries.retain_train,
                train_hyper,
                derive_seed(config.seed, "init"),
            ),
            len(queries.retain_train) * (train_hyper.base_epochs + train_hyper.epochs),
        )
        retrained.lineage = dict(model.lineage)
        return StrategyRun(retrained, stats)

    if method == Method.PRUNE:

        def prune() -> tuple[AdapterModel, RiskReport, ActivationSummary]:
            summary = collect_summary(
                model, forget_rows, retain_rows, config.ucan.batch_size
            )
            report = score_layers(model, summary, config.ucan)
            pruned = hard_prune(model, report, prune_fraction=hyper.prune_fraction)
            return pruned, report, summary

        (pruned, report, summary), stats = measure_run(
            prune, len(forget_rows) + len(retain_rows)
        )
        return StrategyRun(pruned, stats, report, summary)

    strategy = gradient_ascent if method == Method.GA else npo_unlearn
    outcome, stats = measure_run(
        lambda: strategy(model, forget_rows, hyper), len(forget_rows) * hyper.steps
    )
    extra = {
        "diverged": outcome.diverged,
        "final_loss": outcome.losses[-1] if outcome.losses else None,
    }
    return StrategyRun(outcome.model, stats, extra=extra)


def run_document(
    method: str, config: RunConfig, parent: AdapterModel, run: StrategyRun
) -> dict[str, Any]:
    """Audit record of one strategy run."""
    return {
        "method": method,
        "config_hash": config_hash(config),
        "parent_config_hash": parent.lineage.get("config_hash"),
        "target": config.ucan.target,
        "ablations": list(config.ucan.ablations),
        **run.stats.to_dict(),
        **run.extra,
    }


def read_run_stats(path: Path) -> RunStats:
    """Timing fields of a ``<method>.run.json`` file."""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        return RunStats(
            float(document["wall_clock_s"]),
            float(document["throughput_samples_per_s"]),
            int(document["gradient_op_count"]),
        )
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: not a run file") from exc


def cmd_split(args: argparse.Namespace, config: RunConfig) -> int:
    """Write the forget/retain manifest."""
    out = output_dir(config)
    forget, retain, digest = make_split(config, out)
    print(f"Forget events: {len(forget)}")
    print(f"Retain events: {len(retain)}")
    print(f"Manifest: {out / MANIFEST} (sha256 {digest[:16]})")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the deployed model and write checkpoint, manifest and logs."""
    out = output_dir(config)
    forget, retain, digest = make_split(config, out)
    queries = build_queries(forget, retain, config.template)
    model_config = dataclasses.replace(
        config.model, n_items=forget.n_items, n_reserved=config.template.n_reserved
    )
    config = dataclasses.replace(config, model=model_config)
    config.validate()

    model = build_model(model_config, derive_seed(config.seed, "init"))
    model.lineage = {
        "config_hash": config_hash(config),
        "manifest_sha256": digest,
        "dataset": config.dataset.source,
        "template": dataclasses.asdict(config.template),
    }
    losses: list[tuple[str, int, float]] = []
    fit_deployed(
        model,
        queries.retain_train,
        queries.train,
        config.train_hyper(),
        on_epoch=lambda stage, epoch, loss: losses.append((stage, epoch, loss)),
    )

    save_checkpoint(model, out / DEPLOYED)
    save_config(out / "config.json", config)
    lines = ["stage\tepoch\tloss"] + [
        f"{stage}\t{epoch}\t{loss:.6f}" for stage, epoch, loss in losses
    ]
    (out / TRAIN_LOG).write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(
        f"Backbone: {len(queries.retain_train)} rows, "
        f"{config.train.base_epochs} epoch(s)"
    )
    print(f"Adapters: {len(queries.train)} rows, {config.train.epochs} epoch(s)")
    if losses:
        print(f"Final loss: {losses[-1][2]:.4f}")
    print(f"Checkpoint: {out / DEPLOYED}")
    print(f"Config hash: {config_hash(config)}")
    return 0


def _resolve_artifacts(
    args: argparse.Namespace, out: Path
) -> tuple[Path, Path]:
    checkpoint = getattr(args, "checkpoint", None) or out / DEPLOYED
    manifest = getattr(args, "manifest", None) or out / MANIFEST
    return Path(checkpoint), Path(manifest)


def _write_audit(out: Path, prefix: str, run: StrategyRun) -> None:
    if run.summary is not None:
        save_summary(out / f"{prefix}.summary.tensors", run.summary)
    if run.report is not None:
        save_risk_report(out / f"{prefix}.risk.tensors", run.report)


def cmd_unlearn(args: argparse.Namespace, config: RunConfig) -> int:
    """Apply one-shot attenuation to the deployed model."""
    out = output_dir(config)
    checkpoint, manifest = _resolve_artifacts(args, out)
    model, queries, _ = load_deployed(checkpoint, manifest)
    config = dataclasses.replace(
        config, model=model.config, template=template_from_lineage(model)
    )
    ucan = config.ucan
    print(
        f"gamma={ucan.gamma} lambda={ucan.fusion_lambda} tau={ucan.tau_risk} "
        f"alpha_max={ucan.alpha_max} beta={ucan.beta}"
    )

    run = run_strategy(UCAN, model, queries, config)
    target = getattr(args, "output", None) or out / UNLEARNED
    save_checkpoint(run.model, target)
    _write_audit(out, UCAN, run)
    write_json(out / run_file(UCAN), run_document(UCAN, config, model, run))

    n_selected = run.extra["n_selected"]
    print(f"Attenuated {n_selected} dimension(s) in {run.stats.wall_clock_s:.3f}s")
    print(f"Checkpoint: {target}")
    return 0


def cmd_baseline(args: argparse.Namespace, config: RunConfig) -> int:
    """Run the configured baseline on the deployed model."""
    out = output_dir(config)
    checkpoint, manifest = _resolve_artifacts(args, out)
    model, queries, _ = load_deployed(checkpoint, manifest)
    config = dataclasses.replace(
        config, model=model.config, template=template_from_lineage(model)
    )
    method = config.baseline.method

    run = run_strategy(method, model, queries, config)
    target = getattr(args, "output", None) or out / f"{method}.ckpt"
    save_checkpoint(run.model, target)
    _write_audit(out, method, run)
    write_json(out / run_file(method), run_document(method, config, model, run))

    stats = run.stats
    print(f"{method}: {stats.wall_clock_s:.3f}s")
    print(f"Gradient ops: {stats.gradient_op_count}")
    if run.extra.get("diverged"):
        print("Warning: loss diverged; stopped early")
    print(f"Checkpoint: {target}")
    return 0


def evaluate_pair(
    original: Path,
    candidate: Path,
    manifest: Path,
    config: RunConfig,
    method: str,
    run: Optional[RunStats] = None,
) -> EvalReport:
    """Evaluate a candidate checkpoint against the original.

    Raises:
        DataError: If the manifest is missing.
        CheckpointError: If the lineages or vocabularies disagree.
    """
    if not Path(manifest).is_file():
        raise DataError(f"{manifest}: manifest does not exist")
    model_o, queries, digest = load_deployed(original, manifest)
    model_u = load_checkpoint(candidate)
    check_lineage(model_u, digest, candidate)
    if model_u.lineage.get("config_hash") != model_o.lineage.get("config_hash"):
        raise CheckpointError(f"{candidate}: lineage differs from {original}")
    if model_u.config.n_items != model_o.config.n_items:
        raise CheckpointError(
            f"{candidate}: vocabulary mismatch "
            f"({model_u.config.n_items} vs {model_o.config.n_items} items)"
        )
    return evaluate(
        model_o,
        model_u,
        queries.forget_eval,
        queries.retain_eval,
        method=method,
        dataset=dataset_from_lineage(model_o, config),
        seed=config.seed,
        config_hash=str(model_o.lineage.get("config_hash", "")),
        run=run,
    )


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    """Write JSON and CSV reports for a checkpoint pair."""
    out = output_dir(config)
    original = getattr(args, "original", None) or out / DEPLOYED
    manifest = getattr(args, "manifest", None) or out / MANIFEST
    run_path = getattr(args, "run", None)
    run = read_run_stats(run_path) if run_path else None
    label = getattr(args, "label", None) or UCAN

    report = evaluate_pair(
        Path(original), args.candidate, Path(manifest), config, label, run
    )
    json_path, csv_path = write_report(out, report)

    print(f"Forget Recall@10: {report.forget['recall@10']:.4f}")
    print(f"Retain Recall@10: {report.retain['recall@10']:.4f}")
    print(f"Trade-off@10: {report.tradeoff_at_10:.2f}")
    print(f"KL: {report.kl:.4f}")
    print(f"Prediction shift: {report.pred_shift_pct:.1f}%")
    print(f"Perplexity: {report.ppl:.2f}")
    print(f"Reports: {json_path}, {csv_path}")
    return 0


def parse_grid(param: str, values: Optional[str]) -> list[Any]:
    """Grid points for a sweep, numeric grids sorted ascending.

    Raises:
        ConfigError: If the grid is empty or holds an unknown value.
    """
    if param == "method":
        grid = (values or ",".join(STRATEGIES)).split(",")
        grid = [v.strip() for v in grid if v.strip()]
        unknown = [v for v in grid if v not in STRATEGIES]
        if unknown:
            raise ConfigError("values", f"unknown method(s) {', '.join(unknown)}")
    else:
        try:
            raw = (values or "0.1,0.2,0.3,0.4").split(",")
            grid = sorted(float(v) for v in raw if v.strip())
        except ValueError as exc:
            raise ConfigError("values", "expected comma-separated numbers") from exc
    if not grid:
        raise ConfigError("values", "grid is empty")
    return grid


def _grid_config(config: RunConfig, param: str, value: Any) -> tuple[str, RunConfig]:
    if param == "tau":
        return UCAN, dataclasses.replace(
            config, ucan=dataclasses.replace(config.ucan, tau_risk=value)
        )
    if param == "lambda":
        return UCAN, dataclasses.replace(
            config, ucan=dataclasses.replace(config.ucan, fusion_lambda=value)
        )
    return str(value), config


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    """Run and evaluate every grid point on the same deployed model."""
    out = output_dir(config)
    checkpoint, manifest = _resolve_artifacts(args, out)
    model, queries, _ = load_deployed(checkpoint, manifest)
    config = dataclasses.replace(
        config, model=model.config, template=template_from_lineage(model)
    )
    grid = parse_grid(args.param, getattr(args, "values", None))

    rows = []
    for value in grid:
        method, point = _grid_config(config, args.param, value)
        point.validate()
        run = run_strategy(method, model, queries, point)
        report = evaluate(
            model,
            run.model,
            queries.forget_eval,
            queries.retain_eval,
            method=method,
            dataset=dataset_from_lineage(model, config),
            seed=config.seed,
            config_hash=str(model.lineage.get("config_hash", "")),
            run=run.stats,
        )
        rows.append({"param": args.param, "value": value, **report.csv_row()})
        logger.info("%s=%s: trade-off %.2f", args.param, value, report.tradeoff_at_10)

    path = out / f"sweep_{args.param}.csv"
    write_csv(path, rows)
    print(f"Wrote {len(rows)} row(s) to {path}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "train": cmd_train,
    "split": cmd_split,
    "unlearn": cmd_unlearn,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: Optional[list[str]] = None) -> int:
    """Main entry point for the CLI.

    Args:
        argv: Command-line arguments (defaults to sys.argv).

    Returns:
        Exit code: 0 success, 2 config error, 3 data error, 4 numeric failure.
    """
    parser = create_parser()
    args = parser.parse_args(argv)
    configure_logging(getattr(args, "verbose", 0))

    try:
        config = load_config(getattr(args, "config", None), collect_overrides(args))
        return COMMANDS[args.command](args, config)
    except UcanError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
