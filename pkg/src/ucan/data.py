"""Interaction logs, forget/retain splits and token batches."""

import hashlib
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
import torch

from ucan.errors import (
    ConfigError,
    ContractError,
    DataError,
    EmptyLogError,
    InputError,
    ParseError,
)

logger = logging.getLogger(__name__)

PAD_ID = 0
MANIFEST_HEADER = "# ucan-manifest v1"


class Side:
    """Sides of a forget/retain split."""

    FORGET = "forget"
    RETAIN = "retain"


SIDE_TAGS = {Side.FORGET: "F", Side.RETAIN: "R"}


class Event(NamedTuple):
    """A single user-item interaction."""

    user: int
    item: int
    timestamp: int


def chronological(event: Event) -> tuple[int, int, int]:
    """Sort key ordering events per user by time, then item."""
    return (event.user, event.timestamp, event.item)


@dataclass(frozen=True)
class InteractionLog:
    """Timestamp-ordered user-item events with dense ids."""

    events: tuple[Event, ...]
    n_users: int
    n_items: int

    def __len__(self) -> int:
        return len(self.events)

    def ordered(self) -> "InteractionLog":
        """Return the log sorted by (user, timestamp, item)."""
        events = tuple(sorted(self.events, key=chronological))
        return InteractionLog(events, self.n_users, self.n_items)

    def sequences(self) -> dict[int, list[Event]]:
        """Group events per user in chronological order.

        Returns:
            Mapping of user id to that user's events, oldest first.
        """
        per_user: dict[int, list[Event]] = defaultdict(list)
        for event in sorted(self.events, key=chronological):
            per_user[event.user].append(event)
        return dict(per_user)


@dataclass(frozen=True)
class SplitSpec:
    """How to carve a log into forget and retain sides.

    When ``forget_items`` is set, every event whose item falls in the
    half-open range is a forget event and ``forget_fraction`` is only
    descriptive. Otherwise each user contributes a seeded random sample of
    ``floor(forget_fraction * n_u)`` events.
    """

    forget_fraction: float = 0.25
    seed: int = 0
    forget_items: Optional[tuple[int, int]] = None

    def validate(self) -> None:
        """Check field ranges.

        Raises:
            ConfigError: If a field is out of range.
        """
        if not 0.0 <= self.forget_fraction <= 1.0:
            raise ConfigError("forget_fraction", "must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.forget_items is not None:
            lo, hi = self.forget_items
            if not 0 <= lo < hi:
                raise ConfigError("forget_items", "must be a non-empty [lo, hi) range")


@dataclass(frozen=True)
class TemplateSpec:
    """Fixed token prefix standing in for the system prompt.

    Ids ``[0, n_reserved)`` are reserved: 0 is padding and template tokens
    come from ``[1, n_reserved)``. Item ``i`` is token ``n_reserved + i``.
    """

    template_tokens: tuple[int, ...] = (1, 2, 3)
    n_reserved: int = 4
    max_len: int = 32

    def validate(self) -> None:
        """Check that the template fits the reserved id range.

        Raises:
            ConfigError: If a field is inconsistent.
        """
        if self.n_reserved < 1:
            raise ConfigError("n_reserved", "must reserve at least the pad id")
        for token in self.template_tokens:
            if not 1 <= token < self.n_reserved:
                raise ConfigError(
                    "template_tokens", f"token {token} outside [1, {self.n_reserved})"
                )
        if self.max_len <= len(self.template_tokens):
            raise ConfigError("max_len", "must exceed the template length")

    @property
    def history_len(self) -> int:
        """Maximum number of history items kept per row."""
        return self.max_len - len(self.template_tokens)

    def item_token(self, item: int) -> int:
        """Map an item id to its token id."""
        return self.n_reserved + item


@dataclass
class TokenBatch:
    """Templated rows ready for the model.

    Attributes:
        tokens: Long tensor (batch, seq_len) of token ids.
        mask: Float tensor (batch, seq_len); 1 on history positions only.
        target: Long tensor (batch,) of held-out next item ids.
    """

    tokens: torch.Tensor
    mask: torch.Tensor
    target: torch.Tensor

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def select(self, index: Union[slice, torch.Tensor]) -> "TokenBatch":
        """Return the rows picked by a slice or index tensor."""
        return TokenBatch(self.tokens[index], self.mask[index], self.target[index])

    def batches(self, batch_size: int) -> Iterator["TokenBatch"]:
        """Yield consecutive mini-batches of at most ``batch_size`` rows."""
        if batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        for start in range(0, len(self), batch_size):
            yield self.select(slice(start, start + batch_size))


@dataclass
class Queries:
    """Every row set derived from one forget/retain split.

    Attributes:
        train: Prefix rows over each user's full history, retain hold-outs
            excluded. The deployed model is fitted on these.
        retain_train: Prefix rows over retain-only histories, hold-outs
            excluded. Used for retraining and retain-side statistics.
        forget_train: Prefix rows over forget-only histories.
        forget_eval: One query per user: last forget event as target.
        retain_eval: One query per user: last retain event as target.
    """

    train: TokenBatch
    retain_train: TokenBatch
    forget_train: TokenBatch
    forget_eval: TokenBatch
    retain_eval: TokenBatch


def reindex(events: Iterable[tuple[int, int, int]]) -> InteractionLog:
    """Map raw user and item ids onto dense ranges.

    Raw ids are ranked in ascending order, so the mapping is deterministic.

    Args:
        events: Raw (user, item, timestamp) triples.

    Returns:
        Log with ids in ``[0, n_users)`` and ``[0, n_items)``.
    """
    raw = list(events)
    users = {u: i for i, u in enumerate(sorted({e[0] for e in raw}))}
    items = {m: i for i, m in enumerate(sorted({e[1] for e in raw}))}
    dense = [Event(users[u], items[m], ts) for u, m, ts in raw]
    dense.sort(key=chronological)
    return InteractionLog(tuple(dense), len(users), len(items))


def read_titles(path: Path) -> set[int]:
    """Return raw ids of items that have a non-empty title in ``u.item``."""
    titled = set()
    with open(path, encoding="latin-1") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("|")
            if len(fields) < 2:
                raise ParseError(str(path), lineno, "expected 'item|title|...'")
            try:
                item = int(fields[0])
            except ValueError as exc:
                raise ParseError(str(path), lineno, "item id is not an int") from exc
            if fields[1].strip():
                titled.add(item)
    return titled


def load_ml100k(path: Path, titles_path: Optional[Path] = None) -> InteractionLog:
    """Load a MovieLens-100k ``u.data`` file.

    Args:
        path: Tab-separated ``user item rating timestamp`` rows.
        titles_path: Optional ``u.item`` file; items without a title are dropped.

    Returns:
        Re-indexed interaction log (ratings discarded).

    Raises:
        ParseError: If a row is malformed.
        EmptyLogError: If the file holds no events.
    """
    path = Path(path)
    raw: list[tuple[int, int, int]] = []
    with open(path, encoding="latin-1") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise ParseError(
                    str(path), lineno, f"expected 4 fields, got {len(fields)}"
                )
            try:
                user, item, _, timestamp = (int(f) for f in fields)
            except ValueError as exc:
                raise ParseError(str(path), lineno, "non-integer field") from exc
            raw.append((user, item, timestamp))

    if not raw:
        raise EmptyLogError(f"{path}: no interactions")

    if titles_path is not None:
        titled = read_titles(Path(titles_path))
        before = len(raw)
        raw = [e for e in raw if e[1] in titled]
        logger.info("Dropped %d events on untitled items", before - len(raw))

    log = reindex(raw)
    logger.info(
        "Loaded %d events, %d users, %d items from %s",
        len(log),
        log.n_users,
        log.n_items,
        path,
    )
    return log


def five_core_filter(log: InteractionLog, k: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``k`` events until stable.

    Args:
        log: Input log.
        k: Minimum interaction count per user and per item.

    Returns:
        Filtered, re-indexed log (possibly empty).
    """
    events = list(log.events)
    while True:
        user_counts = Counter(e.user for e in events)
        item_counts = Counter(e.item for e in events)
        kept = [
            e for e in events if user_counts[e.user] >= k and item_counts[e.item] >= k
        ]
        if len(kept) == len(events):
            break
        events = kept
    if not events:
        return InteractionLog((), 0, 0)
    return reindex(events)


def forget_retain_split(
    log: InteractionLog, spec: SplitSpec
) -> tuple[InteractionLog, InteractionLog]:
    """Split a log into disjoint forget and retain sides.

    Args:
        log: Non-empty log.
        spec: Split parameters.

    Returns:
        Tuple of (forget, retain) logs sharing the input's id ranges.

    Raises:
        EmptyLogError: If the log is empty.
    """
    spec.validate()
    if not log.events:
        raise EmptyLogError("cannot split an empty log")

    if spec.forget_items is not None:
        lo, hi = spec.forget_items
        forget_flags = [lo <= e.item < hi for e in log.events]
    else:
        rng = np.random.default_rng(spec.seed)
        by_user: dict[int, list[int]] = defaultdict(list)
        for index, event in enumerate(log.events):
            by_user[event.user].append(index)
        forget_flags = [False] * len(log.events)
        for user in sorted(by_user):
            indices = by_user[user]
            n_forget = math.floor(spec.forget_fraction * len(indices))
            for pos in rng.permutation(len(indices))[:n_forget]:
                forget_flags[indices[pos]] = True

    forget = tuple(e for e, f in zip(log.events, forget_flags) if f)
    retain = tuple(e for e, f in zip(log.events, forget_flags) if not f)
    logger.info(
        "Split %d events into %d forget / %d retain", len(log), len(forget), len(retain)
    )
    return (
        InteractionLog(forget, log.n_users, log.n_items),
        InteractionLog(retain, log.n_users, log.n_items),
    )


def _walk(rng: np.random.Generator, start: int, size: int, length: int) -> list[int]:
    """Random forward walk over a contiguous block of item ids."""
    if length == 0:
        return []
    position = int(rng.integers(size))
    items = []
    for _ in range(length):
        items.append(start + position)
        position = (position + int(rng.integers(1, 3))) % size
    return items


def generate_synthetic(
    n_users: int,
    n_items: int,
    seed: int,
    planted_cluster_fraction: float = 0.25,
    events_per_user: tuple[int, int] = (20, 30),
    n_genres: int = 4,
) -> tuple[InteractionLog, SplitSpec]:
    """Generate a log with a planted, detectable forget signal.

    Items below the cluster are split into ``n_genres`` contiguous genres and
    every user walks through one genre. A ``planted_cluster_fraction`` share
    of each user's events walks through the cluster instead, which is the
    last fifth of the catalogue. Those events are the forget side.

    Args:
        n_users: Number of users.
        n_items: Number of items (at least 20).
        seed: Generator seed.
        planted_cluster_fraction: Per-user share of events on the cluster.
        events_per_user: Inclusive range of events per user.
        n_genres: Number of retain-side genres.

    Returns:
        Tuple of (log, matching split spec).

    Raises:
        ConfigError: If sizes are invalid.
    """
    if n_items < 20:
        raise ConfigError("n_items", "synthetic logs need at least 20 items")
    if n_users < 1:
        raise ConfigError("n_users", "must be positive")
    if not 0.0 <= planted_cluster_fraction < 1.0:
        raise ConfigError("planted_cluster_fraction", "must lie in [0, 1)")
    lo_events, hi_events = events_per_user
    if not 2 <= lo_events <= hi_events:
        raise ConfigError("events_per_user", "need 2 <= low <= high")

    rng = np.random.default_rng(seed)
    planted = planted_cluster_fraction > 0.0
    cluster_lo = math.floor(0.8 * n_items) if planted else n_items
    genre_size = cluster_lo // n_genres
    if genre_size < 2:
        raise ConfigError("n_genres", "too many genres for the item range")

    raw: list[tuple[int, int, int]] = []
    genres = rng.permutation(n_users) % n_genres
    for user in range(n_users):
        n_events = int(rng.integers(lo_events, hi_events + 1))
        n_planted = math.floor(planted_cluster_fraction * n_events) if planted else 0
        genre_start = int(genres[user]) * genre_size
        retain_items = _walk(rng, genre_start, genre_size, n_events - n_planted)
        cluster_items = _walk(rng, cluster_lo, n_items - cluster_lo, n_planted)
        planted_slots = set(rng.permutation(n_events)[:n_planted].tolist())
        base = 880_000_000 + user * 1_000_000
        retain_iter, cluster_iter = iter(retain_items), iter(cluster_items)
        for slot in range(n_events):
            item = next(cluster_iter) if slot in planted_slots else next(retain_iter)
            raw.append((user, item, base + 3600 * slot))

    events = tuple(sorted(map(Event._make, raw), key=chronological))
    log = InteractionLog(events, n_users, n_items)
    if planted:
        spec = SplitSpec(planted_cluster_fraction, seed, (cluster_lo, n_items))
    else:
        spec = SplitSpec(0.25, seed)
    logger.info(
        "Generated %d synthetic events (cluster starts at %d)", len(log), cluster_lo
    )
    return log, spec


def templatize(
    histories: Sequence[Sequence[int]],
    targets: Sequence[int],
    template: TemplateSpec,
) -> TokenBatch:
    """Wrap item histories in the template and right-pad them.

    Histories longer than ``template.history_len`` keep their most recent
    items.

    Args:
        histories: Per-row item ids, oldest first.
        targets: Held-out next item per row.
        template: Template layout.

    Returns:
        Token batch with mask 0 on template and pad positions.

    Raises:
        InputError: If a history is empty or lengths disagree.
    """
    if len(histories) != len(targets):
        raise InputError("histories and targets differ in length")
    prefix = list(template.template_tokens)
    rows = []
    for history in histories:
        if len(history) == 0:
            raise InputError("history must be non-empty")
        kept = list(history)[-template.history_len :]
        rows.append((prefix + [template.item_token(i) for i in kept], len(kept)))

    width = max((len(r) for r, _ in rows), default=len(prefix))
    tokens = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.float32)
    for row, (ids, n_history) in enumerate(rows):
        tokens[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[row, len(prefix) : len(prefix) + n_history] = 1.0
    return TokenBatch(tokens, mask, torch.tensor(list(targets), dtype=torch.long))


def _prefix_rows(items: list[int]) -> tuple[list[list[int]], list[int]]:
    histories = [items[:i] for i in range(1, len(items))]
    return histories, items[1:]


def build_queries(
    forget: InteractionLog, retain: InteractionLog, template: TemplateSpec
) -> Queries:
    """Derive training rows and evaluation queries from a split.

    Each user's last retain event is held out for retain-side evaluation
    (leave-one-out) and excluded from every training row set.

    Args:
        forget: Forget side of the split.
        retain: Retain side of the split.
        template: Template layout.

    Returns:
        All row sets needed for training, unlearning and evaluation.
    """
    forget_seqs = forget.sequences()
    retain_seqs = retain.sequences()
    names = ("train", "retain_train", "forget_train", "forget_eval", "retain_eval")
    sets: dict[str, tuple[list[list[int]], list[int]]] = {n: ([], []) for n in names}

    def add(name: str, histories: list[list[int]], targets: list[int]) -> None:
        sets[name][0].extend(histories)
        sets[name][1].extend(targets)

    for user in sorted(set(forget_seqs) | set(retain_seqs)):
        f_events = forget_seqs.get(user, [])
        r_events = retain_seqs.get(user, [])
        held_out = r_events[-1] if len(r_events) >= 2 else None
        if held_out is not None:
            r_items = [e.item for e in r_events]
            add("retain_eval", [r_items[:-1]], [r_items[-1]])
            add("retain_train", *_prefix_rows(r_items[:-1]))
        kept = [e for e in f_events + r_events if e != held_out]
        full = sorted(kept, key=chronological)
        add("train", *_prefix_rows([e.item for e in full]))
        f_items = [e.item for e in f_events]
        if len(f_items) >= 2:
            add("forget_train", *_prefix_rows(f_items))
            add("forget_eval", [f_items[:-1]], [f_items[-1]])

    batches = {name: templatize(h, t, template) for name, (h, t) in sets.items()}
    logger.info(
        "Built queries: %s",
        ", ".join(f"{name}={len(batch)}" for name, batch in batches.items()),
    )
    return Queries(**batches)


def write_manifest(path: Path, forget: InteractionLog, retain: InteractionLog) -> str:
    """Write the split manifest and return its SHA-256.

    Args:
        path: Destination file.
        forget: Forget side.
        retain: Retain side.

    Returns:
        Hex SHA-256 of the written bytes.
    """
    rows = [(e, SIDE_TAGS[Side.FORGET]) for e in forget.events]
    rows += [(e, SIDE_TAGS[Side.RETAIN]) for e in retain.events]
    rows.sort(key=lambda r: (r[0].user, r[0].timestamp, r[0].item, r[1]))
    lines = [f"{MANIFEST_HEADER} n_users={forget.n_users} n_items={forget.n_items}"]
    lines += [f"{e.user} {e.item} {e.timestamp} {tag}" for e, tag in rows]
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def manifest_sha256(path: Path) -> str:
    """Return the hex SHA-256 of a manifest file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _parse_manifest_header(path: Path, line: str) -> tuple[int, int]:
    if not line.startswith(MANIFEST_HEADER):
        raise ParseError(str(path), 1, "missing manifest header")
    try:
        fields = dict(part.split("=") for part in line[len(MANIFEST_HEADER) :].split())
        return int(fields["n_users"]), int(fields["n_items"])
    except (KeyError, ValueError) as exc:
        raise ParseError(str(path), 1, "bad manifest header") from exc


def read_manifest(path: Path) -> tuple[InteractionLog, InteractionLog]:
    """Read a split manifest back into (forget, retain) logs.

    Raises:
        DataError: If the file is missing.
        ParseError: If a row is malformed.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: manifest does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmptyLogError(f"{path}: empty manifest")
    shape = _parse_manifest_header(path, lines[0])
    sides: dict[str, list[Event]] = {"F": [], "R": []}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != 4 or fields[3] not in sides:
            raise ParseError(str(path), lineno, "expected 'user item timestamp F|R'")
        try:
            event = Event(int(fields[0]), int(fields[1]), int(fields[2]))
        except ValueError as exc:
            raise ParseError(str(path), lineno, "non-integer field") from exc
        sides[fields[3]].append(event)
    return (
        InteractionLog(tuple(sorted(sides["F"], key=chronological)), *shape),
        InteractionLog(tuple(sorted(sides["R"], key=chronological)), *shape),
    )


def check_mask(mask: torch.Tensor) -> None:
    """Raise if any row of a mask selects no position.

    Raises:
        ContractError: If a row sums to zero.
    """
    if mask.numel() and bool((mask.sum(dim=-1) < 1).any()):
        raise ContractError("every mask row needs at least one history position")
