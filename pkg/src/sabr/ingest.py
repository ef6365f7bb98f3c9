"""Raw dataset parsing, session-aware preprocessing and leave-one-out splits.

Reserved token ids shared with the model: 0 = padding, 1 = mask,
2 = session token. Real items are numbered from 3.
"""

from __future__ import annotations

import ast
import csv
import datetime as dt
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

PAD_ID = 0
MASK_ID = 1
SESSION_TOKEN_ID = 2
FIRST_ITEM_ID = 3

SESSION_GAP_SECONDS = 86_400


class ParseError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class EmptyDatasetError(ValueError):
    pass


class InteractionEvent(NamedTuple):
    user: str
    item: str
    timestamp: int


@dataclass(frozen=True)
class PreprocessRules:
    min_item_count: int = 6       # items with count <= 5 are dropped
    min_user_events: int = 6      # users with history <= 5 are dropped
    max_user_events: int = 200
    session_gap: int = SESSION_GAP_SECONDS
    min_session_items: int = 2
    min_user_sessions: int = 2


# ---------------------------------------------------------------------------
# parsers


def _parse_int(text: str, path, line_no: int, what: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(path, line_no, f"bad {what} {text!r}") from None


def parse_movielens_1m(path) -> list[InteractionEvent]:
    """``UserID::MovieID::Rating::Timestamp`` lines; ratings are dropped."""
    events = []
    with open(path, encoding="latin-1") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(path, line_no, "expected 4 '::'-separated fields")
            user, item, _rating, ts = parts
            _parse_int(item, path, line_no, "movie id")
            events.append(InteractionEvent(
                user.strip(), item.strip(), _parse_int(ts, path, line_no, "timestamp")))
    return events


def parse_movielens_20m(path) -> list[InteractionEvent]:
    """``ratings.csv`` with header ``userId,movieId,rating,timestamp``."""
    events = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != [
                "userId", "movieId", "rating", "timestamp"]:
            raise ParseError(path, 1, "missing header userId,movieId,rating,timestamp")
        for row in reader:
            line_no = reader.line_num
            if not row:
                continue
            if len(row) < 4:
                raise ParseError(path, line_no, "expected 4 fields")
            events.append(InteractionEvent(
                row[0].strip(), row[1].strip(), _parse_int(row[3], path, line_no, "timestamp")))
    return events


def _date_to_epoch(text: str) -> int:
    text = text.strip()
    try:
        day = dt.date.fromisoformat(text)
    except ValueError:
        stamp = dt.datetime.fromisoformat(text)
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=dt.timezone.utc)
        return int(stamp.timestamp())
    return int(dt.datetime(day.year, day.month, day.day, tzinfo=dt.timezone.utc).timestamp())


def parse_steam(path) -> list[InteractionEvent]:
    """Steam review export: one Python/JSON dict literal per line.

    Uses ``username``, ``product_id`` and ``date``. Calendar dates map to
    UTC midnight.
    """
    events = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                try:
                    record = ast.literal_eval(line)
                except (ValueError, SyntaxError):
                    raise ParseError(path, line_no, "unparseable record") from None
            if not isinstance(record, dict):
                raise ParseError(path, line_no, "record is not a mapping")
            missing = [k for k in ("username", "product_id", "date") if k not in record]
            if missing:
                raise ParseError(path, line_no, f"missing field(s) {', '.join(missing)}")
            try:
                ts = _date_to_epoch(str(record["date"]))
            except ValueError:
                raise ParseError(path, line_no, f"bad date {record['date']!r}") from None
            events.append(InteractionEvent(str(record["username"]), str(record["product_id"]), ts))
    return events


PARSERS = {
    "ml1m": parse_movielens_1m,
    "ml20m": parse_movielens_20m,
    "steam": parse_steam,
}


# ---------------------------------------------------------------------------
# sessions and splits


def sessionize(events: Sequence, gap_seconds: int = SESSION_GAP_SECONDS) -> list[list]:
    """Split time-sorted events into sessions at gaps strictly larger than ``gap_seconds``.

    Works on anything with a ``timestamp`` attribute or on ``(item, timestamp)`` pairs.
    """
    sessions: list[list] = []
    prev = None
    for ev in events:
        t = ev.timestamp if hasattr(ev, "timestamp") else ev[1]
        if prev is None or t - prev > gap_seconds:
            sessions.append([])
        sessions[-1].append(ev)
        prev = t
    return sessions


@dataclass(frozen=True)
class HeldOut:
    item: int
    timestamp: int
    new_session: bool


@dataclass
class SessionizedHistory:
    """One user's sessions of ``(item id, timestamp)`` pairs, oldest first."""

    user: int
    sessions: list[list[tuple[int, int]]]

    def events(self) -> list[tuple[int, int]]:
        return [ev for s in self.sessions for ev in s]

    def __len__(self) -> int:
        return sum(len(s) for s in self.sessions)

    def drop_last(self, n: int) -> "SessionizedHistory":
        """History with the ``n`` most recent events removed (empty sessions dropped)."""
        keep = len(self) - n
        out, seen = [], 0
        for s in self.sessions:
            if seen >= keep:
                break
            take = s[: keep - seen]
            out.append(list(take))
            seen += len(take)
        return SessionizedHistory(self.user, out)

    def held_out(self, k: int) -> HeldOut:
        """The ``k``-th most recent event (1 = last) and whether it opened a session."""
        flat_index = len(self) - k
        seen = 0
        for s in self.sessions:
            if flat_index < seen + len(s):
                item, t = s[flat_index - seen]
                return HeldOut(item, t, flat_index == seen)
            seen += len(s)
        raise IndexError(k)


@dataclass
class SplitDataset:
    """Preprocessed dataset with leave-one-out split.

    ``histories`` are full (train + validation + test); the validation
    item is the second most recent event and the test item the most recent.
    """

    histories: list[SessionizedHistory]
    item_vocab: dict[str, int]
    user_names: list[str] = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        if not self.user_names:
            self.user_names = [str(h.user) for h in self.histories]
        self._item_names = {v: k for k, v in self.item_vocab.items()}

    @property
    def num_users(self) -> int:
        return len(self.histories)

    @property
    def num_items(self) -> int:
        return len(self.item_vocab)

    @property
    def vocab_size(self) -> int:
        return self.num_items + FIRST_ITEM_ID

    def item_name(self, item_id: int) -> str:
        return self._item_names[item_id]

    def train_history(self, user: int) -> SessionizedHistory:
        return self.histories[user].drop_last(2)

    def valid(self, user: int) -> HeldOut:
        return self.histories[user].held_out(2)

    def test(self, user: int) -> HeldOut:
        return self.histories[user].held_out(1)

    def inference_case(self, user: int, target: str) -> tuple[SessionizedHistory, HeldOut]:
        """History visible when predicting ``target`` ('valid' or 'test')."""
        if target == "test":
            return self.histories[user].drop_last(1), self.test(user)
        if target == "valid":
            return self.histories[user].drop_last(2), self.valid(user)
        raise ValueError(f"unknown target {target!r}")

    def user_items(self, user: int) -> set[int]:
        return {item for item, _ in self.histories[user].events()}

    def train_popularity(self) -> list[int]:
        """Interaction counts per token id (index = id) over the training portions only."""
        counts = [0] * self.vocab_size
        for u in range(self.num_users):
            for item, _ in self.train_history(u).events():
                counts[item] += 1
        return counts

    def to_events(self) -> list[InteractionEvent]:
        return [
            InteractionEvent(self.user_names[h.user], self.item_name(item), t)
            for h in self.histories for item, t in h.events()
        ]


def _id_sort_key(raw: str):
    return (0, int(raw), raw) if raw.isdigit() else (1, 0, raw)


def preprocess(events: Iterable[InteractionEvent], rules: PreprocessRules = PreprocessRules(),
               name: str = "dataset") -> SplitDataset:
    """Apply the filtering pipeline once, in a fixed order, then split."""
    events = list(events)
    by_user: dict[str, list[InteractionEvent]] = {}
    for ev in events:
        by_user.setdefault(ev.user, []).append(ev)

    # (1) rare items
    counts = Counter(ev.item for ev in events)
    keep_items = {i for i, c in counts.items() if c >= rules.min_item_count}

    histories: dict[str, list[list[InteractionEvent]]] = {}
    for user in sorted(by_user, key=_id_sort_key):
        evs = [ev for ev in by_user[user] if ev.item in keep_items]
        # (2) short users, counted before truncation
        if len(evs) < rules.min_user_events:
            continue
        evs.sort(key=lambda e: e.timestamp)  # stable: ties keep file order
        # (3) most recent events only
        evs = evs[-rules.max_user_events:]
        # (4) sessionize, (5) drop short sessions
        sessions = [s for s in sessionize(evs, rules.session_gap)
                    if len(s) >= rules.min_session_items]
        # (6) users with too few sessions
        if len(sessions) < rules.min_user_sessions:
            continue
        histories[user] = sessions

    if not histories:
        raise EmptyDatasetError("dataset empty after preprocessing")

    # (7) vocabulary over surviving items
    surviving = {ev.item for ss in histories.values() for s in ss for ev in s}
    vocab = {item: FIRST_ITEM_ID + k for k, item in enumerate(sorted(surviving, key=_id_sort_key))}

    # (8) split is implicit in SplitDataset (last = test, second last = valid)
    user_names = list(histories)
    out = [
        SessionizedHistory(u, [[(vocab[ev.item], ev.timestamp) for ev in s] for s in histories[name_]])
        for u, name_ in enumerate(user_names)
    ]
    return SplitDataset(out, vocab, user_names, name=name)


# ---------------------------------------------------------------------------
# statistics


def nearest_rank_quantile(values: Sequence[int], q: float) -> int:
    if not values:
        raise ValueError("quantile of empty sequence")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class DatasetStats:
    users: int
    items: int
    rows: int
    density: float
    items_per_user: tuple[int, int, int]
    sessions_per_user: tuple[int, int, int]
    items_per_session: tuple[int, int, int]

    def rows_for_csv(self) -> list[tuple[str, str]]:
        out = [("users", str(self.users)), ("items", str(self.items)),
               ("rows", str(self.rows)), ("density", f"{self.density:.6f}")]
        for label, qs in (("item/user", self.items_per_user),
                          ("session/user", self.sessions_per_user),
                          ("item/session", self.items_per_session)):
            out += [(f"{label} Q{i + 1}", str(v)) for i, v in enumerate(qs)]
        return out


def _quartiles(values):
    return tuple(nearest_rank_quantile(values, q) for q in (0.25, 0.5, 0.75))


def compute_stats(dataset: SplitDataset) -> DatasetStats:
    per_user = [len(h) for h in dataset.histories]
    sessions = [len(h.sessions) for h in dataset.histories]
    per_session = [len(s) for h in dataset.histories for s in h.sessions]
    rows = sum(per_user)
    return DatasetStats(
        users=dataset.num_users,
        items=dataset.num_items,
        rows=rows,
        density=rows / (dataset.num_users * dataset.num_items),
        items_per_user=_quartiles(per_user),
        sessions_per_user=_quartiles(sessions),
        items_per_session=_quartiles(per_session),
    )


# ---------------------------------------------------------------------------
# on-disk format

EVENTS_FILE = "events.tsv"
VOCAB_FILE = "vocab.tsv"
USERS_FILE = "users.tsv"
STATS_FILE = "stats.csv"


def write_dataset(dataset: SplitDataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, EVENTS_FILE), "w", encoding="utf-8", newline="\n") as f:
        for h in dataset.histories:
            for item, t in h.events():
                f.write(f"{h.user}\t{item}\t{t}\n")
    with open(os.path.join(out_dir, VOCAB_FILE), "w", encoding="utf-8", newline="\n") as f:
        for raw, idx in sorted(dataset.item_vocab.items(), key=lambda kv: kv[1]):
            f.write(f"{raw}\t{idx}\n")
    with open(os.path.join(out_dir, USERS_FILE), "w", encoding="utf-8", newline="\n") as f:
        for idx, raw in enumerate(dataset.user_names):
            f.write(f"{raw}\t{idx}\n")
    write_stats(compute_stats(dataset), os.path.join(out_dir, STATS_FILE), dataset.name)


def write_stats(stats: DatasetStats, path, dataset_name: str = "dataset") -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "statistic", "value"])
        for key, value in stats.rows_for_csv():
            w.writerow([dataset_name, key, value])


def read_dataset(data_dir, gap_seconds: int = SESSION_GAP_SECONDS) -> SplitDataset:
    """Load a directory written by :func:`write_dataset`."""
    vocab = {}
    with open(os.path.join(data_dir, VOCAB_FILE), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                raw, idx = line.rstrip("\n").split("\t")
                vocab[raw] = int(idx)
    names: list[str] = []
    users_path = os.path.join(data_dir, USERS_FILE)
    if os.path.exists(users_path):
        with open(users_path, encoding="utf-8") as f:
            names = [line.rstrip("\n").split("\t")[0] for line in f if line.strip()]
    by_user: dict[int, list[tuple[int, int]]] = {}
    with open(os.path.join(data_dir, EVENTS_FILE), encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(EVENTS_FILE, line_no, "expected 3 tab-separated fields")
            by_user.setdefault(int(parts[0]), []).append((int(parts[1]), int(parts[2])))
    if not by_user:
        raise EmptyDatasetError(f"no events in {data_dir}")
    if sorted(by_user) != list(range(len(by_user))):
        raise ValueError("user ids must be 0..n-1")
    histories = [SessionizedHistory(u, sessionize(by_user[u], gap_seconds)) for u in range(len(by_user))]
    name = os.path.basename(os.path.normpath(str(data_dir)))
    return SplitDataset(histories, vocab, names, name=name)
