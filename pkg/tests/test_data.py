"""Tests for the data module."""

import tempfile
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from ucan.data import (
    Event,
    InteractionLog,
    Queries,
    SplitSpec,
    TemplateSpec,
    build_queries,
    check_mask,
    five_core_filter,
    forget_retain_split,
    generate_synthetic,
    load_ml100k,
    manifest_sha256,
    read_manifest,
    reindex,
    templatize,
    write_manifest,
)
from ucan.errors import (
    ConfigError,
    ContractError,
    DataError,
    EmptyLogError,
    InputError,
    ParseError,
)


def brute_force_core(events: list[Event], k: int) -> list[Event]:
    """Reference k-core: filter users, then items, until nothing changes."""
    while True:
        users = Counter(e[0] for e in events)
        kept = [e for e in events if users[e[0]] >= k]
        items = Counter(e[1] for e in kept)
        kept = [e for e in kept if items[e[1]] >= k]
        if kept == events:
            return kept
        events = kept


class TestLoadMl100k:
    """Tests for load_ml100k function."""

    def test_toy_file_reindexed(self) -> None:
        """Test a 3-row file loads with ids re-indexed from 0."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "u.data"
            path.write_text(
                "196\t242\t3\t881250949\n"
                "186\t302\t3\t891717742\n"
                "196\t302\t1\t878887116\n"
            )

            log = load_ml100k(path)

            assert len(log) == 3
            assert log.n_users == 2
            assert log.n_items == 2
            assert Event(1, 0, 881250949) in log.events
            assert Event(0, 1, 891717742) in log.events

    def test_bad_row_names_line(self) -> None:
        """Test a malformed row raises an error naming its line."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "u.data"
            path.write_text("1\t2\t3\t4\n1\t2\tthree\n")

            with pytest.raises(ParseError) as info:
                load_ml100k(path)

            assert info.value.line == 2
            assert ":2:" in str(info.value)

    def test_non_integer_field(self) -> None:
        """Test a non-numeric field is a parse error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "u.data"
            path.write_text("1\tx\t3\t4\n")

            with pytest.raises(ParseError):
                load_ml100k(path)

    def test_empty_file(self) -> None:
        """Test an empty file is an empty-log error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "u.data"
            path.write_text("")

            with pytest.raises(EmptyLogError):
                load_ml100k(path)

    def test_untitled_items_dropped(self) -> None:
        """Test items without a title in u.item are dropped."""
        with tempfile.TemporaryDirectory() as tmpdir:
            data = Path(tmpdir) / "u.data"
            data.write_text("1\t10\t5\t100\n1\t20\t5\t200\n2\t20\t4\t300\n")
            titles = Path(tmpdir) / "u.item"
            titles.write_text("10||01-Jan-1995\n20|Heat (1995)|01-Jan-1995\n")

            log = load_ml100k(data, titles)

            assert len(log) == 2
            assert log.n_items == 1


class TestFiveCoreFilter:
    """Tests for five_core_filter function."""

    def test_fixed_point_unchanged(self) -> None:
        """Test a log already satisfying the 5-core is unchanged."""
        log = reindex((u, i, u * 10 + i) for u in range(5) for i in range(5))
        assert five_core_filter(log) == log

    def test_empty_log(self) -> None:
        """Test an empty log stays empty."""
        result = five_core_filter(InteractionLog((), 0, 0))
        assert len(result) == 0

    def test_cascade(self) -> None:
        """Test dropping a rare item cascades to its user."""
        events = [(u, i, u * 10 + i) for u in range(5) for i in range(5)]
        events += [(5, i, 50 + i) for i in range(4)] + [(5, 9, 59)]

        result = five_core_filter(reindex(events))

        assert len(result) == 25
        assert result.n_users == 5
        assert result.n_items == 5

    def test_matches_brute_force(self) -> None:
        """Test random logs agree with repeated brute-force filtering."""
        rng = np.random.default_rng(11)
        for _ in range(5):
            events = sorted(
                {(int(u), int(i), 0) for u, i in rng.integers(0, 15, size=(220, 2))}
            )
            log = reindex(events)
            expected = brute_force_core(list(log.events), 5)

            result = five_core_filter(log)

            if expected:
                assert result.events == reindex(expected).events
            else:
                assert len(result) == 0

    def test_idempotent(self) -> None:
        """Test filtering twice equals filtering once."""
        rng = np.random.default_rng(4)
        log = reindex({(int(u), int(i), 0) for u, i in rng.integers(0, 12, (150, 2))})
        once = five_core_filter(log)
        assert five_core_filter(once) == once


class TestForgetRetainSplit:
    """Tests for forget_retain_split function."""

    def _log(self) -> InteractionLog:
        events = [(u, i, 1000 * u + i) for u in range(3) for i in range(8)]
        return reindex(events)

    def test_fraction_zero(self) -> None:
        """Test fraction 0 keeps everything on the retain side."""
        log = self._log()
        forget, retain = forget_retain_split(log, SplitSpec(0.0, seed=1))
        assert len(forget) == 0
        assert retain.events == log.events

    def test_floor_per_user(self) -> None:
        """Test a user with 8 events contributes 2 forget events at 25%."""
        forget, _ = forget_retain_split(self._log(), SplitSpec(0.25, seed=1))
        counts = Counter(e.user for e in forget.events)
        assert counts == {0: 2, 1: 2, 2: 2}

    def test_deterministic(self) -> None:
        """Test the same seed gives the same split."""
        log = self._log()
        assert forget_retain_split(log, SplitSpec(0.5, 9)) == forget_retain_split(
            log, SplitSpec(0.5, 9)
        )

    def test_disjoint_union(self) -> None:
        """Test the sides are disjoint and cover the log."""
        log = self._log()
        forget, retain = forget_retain_split(log, SplitSpec(0.4, seed=2))
        assert not set(forget.events) & set(retain.events)
        assert Counter(forget.events + retain.events) == Counter(log.events)

    def test_item_range(self) -> None:
        """Test an item range selects exactly the events on those items."""
        spec = SplitSpec(forget_items=(6, 8))
        forget, retain = forget_retain_split(self._log(), spec)
        assert {e.item for e in forget.events} == {6, 7}
        assert all(e.item < 6 for e in retain.events)

    def test_empty_log(self) -> None:
        """Test splitting an empty log fails."""
        with pytest.raises(EmptyLogError):
            forget_retain_split(InteractionLog((), 0, 0), SplitSpec())

    def test_invalid_fraction(self) -> None:
        """Test a fraction outside [0, 1] is a config error."""
        with pytest.raises(ConfigError):
            forget_retain_split(self._log(), SplitSpec(1.5))


class TestGenerateSynthetic:
    """Tests for generate_synthetic function."""

    def test_forget_events_on_cluster(self) -> None:
        """Test forget events hit items [80, 100) only."""
        log, spec = generate_synthetic(50, 100, seed=7, planted_cluster_fraction=0.25)
        forget, retain = forget_retain_split(log, spec)

        assert spec.forget_items == (80, 100)
        assert len(forget) > 0
        assert all(80 <= e.item < 100 for e in forget.events)
        assert all(e.item < 80 for e in retain.events)

    def test_no_cluster(self) -> None:
        """Test fraction 0 draws over the whole range with a random split."""
        log, spec = generate_synthetic(50, 100, seed=7, planted_cluster_fraction=0.0)
        assert spec.forget_items is None
        assert spec.forget_fraction == 0.25
        assert max(e.item for e in log.events) >= 80

    def test_seed_changes_log(self) -> None:
        """Test different seeds give different logs."""
        first, _ = generate_synthetic(20, 40, seed=1)
        second, _ = generate_synthetic(20, 40, seed=2)
        assert first.events != second.events

    def test_reproducible(self) -> None:
        """Test the same seed gives the same log."""
        assert generate_synthetic(20, 40, seed=5) == generate_synthetic(20, 40, seed=5)

    def test_strictly_chronological(self) -> None:
        """Test per-user timestamps strictly increase."""
        log, _ = generate_synthetic(10, 40, seed=0)
        for events in log.sequences().values():
            stamps = [e.timestamp for e in events]
            assert stamps == sorted(set(stamps))

    def test_too_few_items(self) -> None:
        """Test fewer than 20 items is a config error."""
        with pytest.raises(ConfigError):
            generate_synthetic(10, 19, seed=0)


class TestTemplatize:
    """Tests for templatize function."""

    def test_history_example(self) -> None:
        """Test a two-item history behind a two-token template."""
        template = TemplateSpec(template_tokens=(1, 2), n_reserved=4, max_len=8)
        batch = templatize([[5, 9]], [3], template)
        assert batch.tokens.tolist() == [[1, 2, 9, 13]]
        assert batch.mask.tolist() == [[0.0, 0.0, 1.0, 1.0]]
        assert batch.target.tolist() == [3]

    def test_empty_template(self) -> None:
        """Test an empty template gives an all-ones mask."""
        template = TemplateSpec(template_tokens=(), n_reserved=1, max_len=8)
        batch = templatize([[0, 1, 2]], [4], template)
        assert batch.mask.tolist() == [[1.0, 1.0, 1.0]]

    def test_padding_masked(self) -> None:
        """Test right padding is pad id with mask 0."""
        template = TemplateSpec(template_tokens=(1,), n_reserved=2, max_len=8)
        batch = templatize([[0, 1, 2], [5]], [0, 0], template)
        assert batch.tokens[1].tolist() == [1, 7, 0, 0]
        assert batch.mask[1].tolist() == [0.0, 1.0, 0.0, 0.0]

    def test_truncates_to_recent(self) -> None:
        """Test long histories keep the most recent items."""
        template = TemplateSpec(template_tokens=(1,), n_reserved=2, max_len=4)
        batch = templatize([list(range(10))], [0], template)
        assert batch.tokens.tolist() == [[1, 9, 10, 11]]

    def test_mask_invariant(self) -> None:
        """Test every row has history and mask 0 exactly on template and pad."""
        template = TemplateSpec()
        batch = templatize([[1], [2, 3, 4], [5, 6]], [0, 0, 0], template)
        prefix = len(template.template_tokens)
        assert bool((batch.mask.sum(dim=1) >= 1).all())
        assert bool((batch.mask[:, :prefix] == 0).all())
        assert bool((batch.mask.bool() == (batch.tokens >= template.n_reserved)).all())

    def test_empty_history(self) -> None:
        """Test an empty history is rejected."""
        with pytest.raises(InputError):
            templatize([[]], [0], TemplateSpec())


class TestBuildQueries:
    """Tests for build_queries function."""

    def test_hold_out_excluded_from_training(self) -> None:
        """Test the retain hold-out never appears as a training target."""
        forget = InteractionLog((Event(0, 7, 2), Event(0, 8, 4)), 1, 10)
        retain = InteractionLog((Event(0, 1, 1), Event(0, 2, 3), Event(0, 3, 5)), 1, 10)

        queries = build_queries(forget, retain, TemplateSpec())

        assert queries.retain_eval.target.tolist() == [3]
        assert 3 not in queries.train.target.tolist()
        assert queries.train.target.tolist() == [7, 2, 8]
        assert queries.forget_eval.target.tolist() == [8]
        assert queries.forget_train.target.tolist() == [8]
        assert queries.retain_train.target.tolist() == [2]

    def test_synthetic_counts(self, queries: Queries) -> None:
        """Test every synthetic user yields one query per side."""
        assert len(queries.forget_eval) == 12
        assert len(queries.retain_eval) == 12


class TestManifest:
    """Tests for manifest writing and reading."""

    def test_round_trip(self) -> None:
        """Test a written manifest reads back to the same sides."""
        forget = InteractionLog((Event(0, 4, 10),), 2, 5)
        retain = InteractionLog((Event(0, 1, 5), Event(1, 2, 7)), 2, 5)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "split.tsv"
            digest = write_manifest(path, forget, retain)

            assert digest == manifest_sha256(path)
            assert read_manifest(path) == (forget, retain)
            assert path.read_text().splitlines()[1] == "0 1 5 R"

    def test_bad_row(self) -> None:
        """Test a row without a side tag is a parse error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "split.tsv"
            path.write_text("# ucan-manifest v1 n_users=1 n_items=2\n0 1 5\n")
            with pytest.raises(ParseError):
                read_manifest(path)

    def test_missing(self) -> None:
        """Test a missing manifest is a data error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(DataError):
                read_manifest(Path(tmpdir) / "absent.tsv")


class TestCheckMask:
    """Tests for check_mask function."""

    def test_zero_row_rejected(self) -> None:
        """Test a row selecting nothing violates the contract."""
        with pytest.raises(ContractError):
            check_mask(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_valid_mask(self) -> None:
        """Test a valid mask passes."""
        check_mask(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
