"""Tests for the CLI module."""

import csv
import dataclasses
import json
import math
import tempfile
from pathlib import Path
from typing import Any

import pytest
import torch

from ucan.checkpoint import save_checkpoint
from ucan.cli import (
    DEPLOYED,
    MANIFEST,
    UNLEARNED,
    collect_overrides,
    create_parser,
    main,
    parse_grid,
    run_file,
)
from ucan.data import TemplateSpec, manifest_sha256
from ucan.errors import ConfigError
from ucan.model import AdapterModel, ModelConfig

DATA = Path(__file__).parent / "data"

SMALL_TOML = """\
[model]
embed_dim = 8
hidden_dim = 12
rank = 2

[template]
max_len = 16
"""

SMALL_FLAGS = "--n-users 12 --n-items 40 --epochs 1 --base-epochs 1".split()


def train_run(tmpdir: str, name: str = "run", seed: int = 0) -> Path:
    """Train a small deployed model under ``tmpdir/name``."""
    config = Path(tmpdir) / "small.toml"
    config.write_text(SMALL_TOML, encoding="utf-8")
    out = Path(tmpdir) / name
    argv = ["train", "-c", str(config), "-o", str(out), "--seed", str(seed)]
    assert main(argv + SMALL_FLAGS) == 0
    return out


def read_run(out: Path, method: str) -> dict[str, Any]:
    """Load the run record one strategy wrote under ``out``."""
    return json.loads((out / run_file(method)).read_text(encoding="utf-8"))


class TestCreateParser:
    """Tests for create_parser function."""

    def test_parser_creation(self) -> None:
        """Test parser is created successfully."""
        assert create_parser() is not None

    def test_command_required(self) -> None:
        """Test a subcommand must be given."""
        with pytest.raises(SystemExit):
            create_parser().parse_args([])

    def test_unset_flags_absent(self) -> None:
        """Test flags not given on the command line produce no overrides."""
        args = create_parser().parse_args(["unlearn"])
        assert collect_overrides(args) == {}

    def test_dotted_overrides(self) -> None:
        """Test config flags map to dotted keys."""
        args = create_parser().parse_args(
            ["unlearn", "--tau", "0.3", "--lambda", "0.5", "--seed", "4", "-o", "x"]
        )
        assert collect_overrides(args) == {
            "ucan.tau_risk": 0.3,
            "ucan.fusion_lambda": 0.5,
            "seed": 4,
            "output_dir": "x",
        }

    def test_repeatable_ablation(self) -> None:
        """Test ablations accumulate."""
        args = create_parser().parse_args(
            ["unlearn", "--ablation", "F", "--ablation", "C"]
        )
        assert collect_overrides(args)["ucan.ablations"] == ["F", "C"]

    def test_manifest_alias(self) -> None:
        """Test the long manifest alias sets the same destination."""
        args = create_parser().parse_args(["unlearn", "--forget-manifest", "m.tsv"])
        assert args.manifest == Path("m.tsv")


class TestParseGrid:
    """Tests for parse_grid function."""

    def test_default_tau_grid(self) -> None:
        """Test the default numeric grid."""
        assert parse_grid("tau", None) == [0.1, 0.2, 0.3, 0.4]

    def test_sorted(self) -> None:
        """Test numeric grids are sorted ascending."""
        assert parse_grid("lambda", "0.5, 0.1") == [0.1, 0.5]

    def test_methods(self) -> None:
        """Test method grids keep their order and reject unknown names."""
        assert parse_grid("method", "npo,ga") == ["npo", "ga"]
        with pytest.raises(ConfigError):
            parse_grid("method", "sgd")

    def test_not_numbers(self) -> None:
        """Test a malformed numeric grid is rejected."""
        with pytest.raises(ConfigError):
            parse_grid("tau", "low,high")


class TestTrain:
    """Tests for the train command."""

    def test_writes_artifacts(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test training writes checkpoint, manifest, config and loss log."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            for name in (DEPLOYED, MANIFEST, "config.json", "train_log.tsv"):
                assert (out / name).is_file()
            log = (out / "train_log.tsv").read_text(encoding="utf-8").splitlines()
            assert log[0] == "stage\tepoch\tloss"
            assert [line.split("\t")[0] for line in log[1:]] == ["base", "adapter"]
        captured = capsys.readouterr()
        assert "Config hash:" in captured.out

    def test_reproducible(self) -> None:
        """Test the same seed gives byte-identical artifacts."""
        with tempfile.TemporaryDirectory() as tmpdir:
            first = train_run(tmpdir, "first")
            second = train_run(tmpdir, "second")
            for name in (DEPLOYED, MANIFEST):
                assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_missing_dataset_path(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the real dataset without a path exits with a config error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            code = main(["train", "--dataset", "ml100k", "-o", tmpdir])
        assert code == 2
        assert "dataset.path" in capsys.readouterr().err

    def test_missing_data_file(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a missing interaction file exits with a data error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            absent = str(Path(tmpdir) / "u.data")
            argv = ["train", "-o", tmpdir, "--dataset", "ml100k", "--data", absent]
            code = main(argv)
        assert code == 3
        assert "does not exist" in capsys.readouterr().err


class TestSplit:
    """Tests for the split command."""

    def test_matches_train_manifest(self) -> None:
        """Test the split command writes the manifest training would."""
        with tempfile.TemporaryDirectory() as tmpdir:
            trained = train_run(tmpdir)
            split_dir = Path(tmpdir) / "split"
            argv = ["split", "-o", str(split_dir), "--seed", "0"]
            assert main(argv + SMALL_FLAGS[:4]) == 0
            assert (split_dir / MANIFEST).read_bytes() == (
                trained / MANIFEST
            ).read_bytes()


class TestUnlearn:
    """Tests for the unlearn command."""

    def test_defaults_echoed(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the resolved hyperparameters are printed."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            capsys.readouterr()
            assert main(["unlearn", "-o", str(out)]) == 0
            assert (out / UNLEARNED).is_file()
            document = read_run(out, "ucan")
        captured = capsys.readouterr()
        assert "gamma=0.5 lambda=0.3 tau=0.2 alpha_max=0.1 beta=2.0" in captured.out
        assert document["method"] == "ucan"
        assert document["gradient_op_count"] == 0

    def test_tau_one_is_identity(self) -> None:
        """Test tau = 1 selects nothing and rewrites the same checkpoint."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            assert main(["unlearn", "-o", str(out), "--tau", "1.0"]) == 0
            deployed = (out / DEPLOYED).read_bytes()
            assert (out / UNLEARNED).read_bytes() == deployed

    def test_ablation_recorded(self) -> None:
        """Test the ablation switch reaches the run record."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            assert main(["unlearn", "-o", str(out), "--ablation", "H"]) == 0
            document = read_run(out, "ucan")
            assert (out / "ucan.risk.tensors").is_file()
            assert (out / "ucan.summary.tensors").is_file()
        assert document["ablations"] == ["H"]

    def test_manifest_mismatch(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a checkpoint paired with another run's manifest is refused."""
        with tempfile.TemporaryDirectory() as tmpdir:
            first = train_run(tmpdir, "first", seed=0)
            second = train_run(tmpdir, "second", seed=1)
            capsys.readouterr()
            code = main(
                [
                    "unlearn",
                    "-o",
                    str(first),
                    "--manifest",
                    str(second / MANIFEST),
                ]
            )
        assert code == 3
        assert "checkpoint/manifest mismatch" in capsys.readouterr().err


class TestBaseline:
    """Tests for the baseline command."""

    def test_prune(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the pruning baseline runs without gradient steps."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            capsys.readouterr()
            argv = ["baseline", "-o", str(out), "--method", "prune"]
            assert main(argv) == 0
            assert (out / "prune.ckpt").is_file()
        assert "Gradient ops: 0" in capsys.readouterr().out

    def test_gradient_ascent_counts_ops(self) -> None:
        """Test gradient ascent records its backward passes."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            argv = ["baseline", "-o", str(out), "--method", "ga", "--steps", "1"]
            assert main(argv) == 0
            document = read_run(out, "ga")
        assert document["method"] == "ga"
        assert document["gradient_op_count"] > 0

    def test_run_records_kept_apart(self) -> None:
        """Test a baseline does not overwrite the attenuation run record."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            assert main(["unlearn", "-o", str(out)]) == 0
            argv = ["baseline", "-o", str(out), "--method", "ga", "--steps", "1"]
            assert main(argv) == 0
            ucan, ascent = read_run(out, "ucan"), read_run(out, "ga")
        assert ucan["method"] == "ucan"
        assert ucan["gradient_op_count"] == 0
        assert ascent["method"] == "ga"


class TestEval:
    """Tests for the eval command."""

    def test_identical_checkpoints(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a model compared with itself has no shift or divergence."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            capsys.readouterr()
            assert main(["eval", str(out / DEPLOYED), "-o", str(out)]) == 0
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
            assert (out / "report.csv").is_file()
        assert report["pred_shift_pct"] == 0.0
        assert report["kl"] == pytest.approx(0.0, abs=1e-9)
        assert report["tradeoff_at_10"] == 0.0
        assert "Prediction shift: 0.0%" in capsys.readouterr().out

    def test_with_run_file(self) -> None:
        """Test timing from an unlearning run is carried into the report."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            assert main(["unlearn", "-o", str(out)]) == 0
            argv = ["eval", str(out / UNLEARNED), "-o", str(out)]
            assert main(argv + ["--run", str(out / run_file("ucan"))]) == 0
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["method"] == "ucan"
        assert report["gradient_op_count"] == 0
        assert report["wall_clock_s"] > 0.0

    def test_missing_manifest(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a missing manifest exits with a data error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            (out / MANIFEST).unlink()
            capsys.readouterr()
            code = main(["eval", str(out / DEPLOYED), "-o", str(out)])
        assert code == 3
        assert "manifest does not exist" in capsys.readouterr().err


class TestSweep:
    """Tests for the sweep command."""

    def test_tau_grid(self) -> None:
        """Test one CSV row per grid point."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            argv = ["sweep", "-o", str(out), "--param", "tau"]
            assert main(argv + ["--values", "0.4,0.1,0.3,0.2"]) == 0
            with open(out / "sweep_tau.csv", encoding="utf-8", newline="") as handle:
                rows = list(csv.DictReader(handle))
        assert [float(row["value"]) for row in rows] == [0.1, 0.2, 0.3, 0.4]
        assert all(row["method"] == "ucan" for row in rows)

    def test_single_point_matches_unlearn_and_eval(self) -> None:
        """Test a one-point grid scores like unlearn followed by eval."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            argv = ["sweep", "-o", str(out), "--param", "tau", "--values", "0.2"]
            assert main(argv) == 0
            with open(out / "sweep_tau.csv", encoding="utf-8", newline="") as handle:
                (row,) = list(csv.DictReader(handle))
            assert main(["unlearn", "-o", str(out)]) == 0
            assert main(["eval", str(out / UNLEARNED), "-o", str(out)]) == 0
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        for side in ("forget", "retain"):
            for key, value in report[side].items():
                assert float(row[f"{side}.{key}"]) == pytest.approx(value)
        for key in ("tradeoff_at_10", "kl", "pred_shift_pct", "ppl"):
            assert float(row[key]) == pytest.approx(report[key])
        assert row["method"] == report["method"] == "ucan"


GOLDEN_MODEL = ModelConfig(n_items=12, embed_dim=8, hidden_dim=8, rank=2)

# Two users over twelve items; both retain targets sit at the top of a uniform
# ranking and both forget targets sit among the boosted items.
GOLDEN_MANIFEST = """\
# ucan-manifest v1 n_users=2 n_items=12
0 7 1 F
0 2 2 R
0 9 3 F
0 3 4 R
0 11 5 F
0 0 6 R
1 6 1 F
1 8 2 F
1 4 3 R
1 5 4 R
1 1 5 R
"""


def bias_only_model(boosted: range, lineage: dict[str, Any]) -> AdapterModel:
    """Model whose scores are its output bias: ``log 2`` on ``boosted``, else 0."""
    model = AdapterModel(GOLDEN_MODEL)
    assert model.output is not None
    with torch.no_grad():
        model.embedding.weight.zero_()
        model.output.weight.zero_()
        model.output.bias.zero_()
        for item in boosted:
            model.output.bias[item] = math.log(2.0)
    model.lineage = dict(lineage)
    return model


class TestGoldenReport:
    """Eval of a hand-built checkpoint pair against a stored report."""

    def test_matches_stored_report(self) -> None:
        """Test every field of the report equals the stored one."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = Path(tmpdir)
            manifest = out / MANIFEST
            manifest.write_text(GOLDEN_MANIFEST, encoding="utf-8")
            lineage = {
                "config_hash": "golden",
                "manifest_sha256": manifest_sha256(manifest),
                "dataset": "ml100k",
                "template": dataclasses.asdict(TemplateSpec()),
            }
            save_checkpoint(bias_only_model(range(6, 12), lineage), out / DEPLOYED)
            save_checkpoint(bias_only_model(range(0), lineage), out / UNLEARNED)
            assert main(["eval", str(out / UNLEARNED), "-o", str(out)]) == 0
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        golden = json.loads((DATA / "golden_report.json").read_text(encoding="utf-8"))
        assert list(report) == list(golden)
        for key, expected in golden.items():
            if isinstance(expected, dict):
                assert list(report[key]) == list(expected)
                assert report[key] == pytest.approx(expected, rel=1e-6, abs=1e-12)
            elif isinstance(expected, float):
                assert report[key] == pytest.approx(expected, rel=1e-6, abs=1e-12)
            else:
                assert report[key] == expected

    def test_dataset_label_from_checkpoint(self) -> None:
        """Test the report names the dataset the checkpoint was trained on."""
        with tempfile.TemporaryDirectory() as tmpdir:
            out = train_run(tmpdir)
            config = Path(tmpdir) / "real.toml"
            config.write_text(
                '[dataset]\nsource = "ml100k"\npath = "absent/u.data"\n',
                encoding="utf-8",
            )
            argv = ["eval", str(out / DEPLOYED), "-o", str(out), "-c", str(config)]
            assert main(argv) == 0
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["dataset"] == "synthetic"
