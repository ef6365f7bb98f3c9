"""Generated datasets with known structure, for tests and desk-scale runs."""

from __future__ import annotations

import numpy as np

from sabr.ingest import FIRST_ITEM_ID, SessionizedHistory, SplitDataset

DAY = 86_400


def session_signal_dataset(n_users: int = 500, n_items: int = 60, sessions=(3, 5),
                           chain_len=(1, 3), chain_step: int = 0, n_openers: int = 10, p_open_last: float = 0.5,
                           seed: int = 0, base_time: int = 1_500_000_000,
                           name: str = "synthetic") -> SplitDataset:
    """Histories where what comes next depends on whether a new session has begun.

    Each user owns one opener item and starts every session with it. The
    rest of a session walks the content block from a random start ``c`` in
    steps of ``chain_step`` (the default 0 repeats ``c``). Items within a
    session are minutes apart and sessions 2-10 days apart. With
    probability ``p_open_last`` the final session is the opener alone, so
    the held-out item is a session start. A model that cannot see session
    boundaries has to hedge between the opener and the chain successor.
    """
    if not 0 < n_openers < n_items:
        raise ValueError("need 0 < n_openers < n_items")
    rng = np.random.default_rng(seed)
    openers = np.arange(FIRST_ITEM_ID, FIRST_ITEM_ID + n_openers)
    n_content = n_items - n_openers
    content0 = FIRST_ITEM_ID + n_openers
    histories = []
    for u in range(n_users):
        t = base_time + int(rng.integers(0, 30 * DAY))
        opener = int(rng.choice(openers))
        n_sessions = int(rng.integers(sessions[0], sessions[1] + 1))
        lone_last = rng.random() < p_open_last
        user_sessions = []
        for k in range(n_sessions):
            length = 0 if (lone_last and k == n_sessions - 1) else int(rng.integers(chain_len[0], chain_len[1] + 1))
            start = int(rng.integers(n_content))
            seq = [opener] + [content0 + (start + chain_step * j) % n_content for j in range(length)]
            session = []
            for item in seq:
                session.append((item, t))
                t += int(rng.integers(60, 1800))
            user_sessions.append(session)
            t += int(rng.integers(2 * DAY, 10 * DAY))
        histories.append(SessionizedHistory(u, user_sessions))
    vocab = {f"i{i}": i for i in range(FIRST_ITEM_ID, FIRST_ITEM_ID + n_items)}
    return SplitDataset(histories, vocab, [f"u{u}" for u in range(n_users)], name=name)


def toy_dataset(n_users: int = 10, length: int = 10, seed: int = 0,
                name: str = "toy") -> SplitDataset:
    """Short sequences over disjoint item blocks, two sessions each, for memorisation checks."""
    rng = np.random.default_rng(seed)
    n_items = n_users * length
    items = rng.permutation(np.arange(FIRST_ITEM_ID, FIRST_ITEM_ID + n_items)).reshape(n_users, length)
    histories = []
    half = length // 2
    for u in range(n_users):
        seq = items[u]
        t0 = 1_000_000 + u * 100 * DAY
        first = [(int(i), t0 + 60 * k) for k, i in enumerate(seq[:half])]
        second = [(int(i), t0 + 3 * DAY + 60 * k) for k, i in enumerate(seq[half:])]
        histories.append(SessionizedHistory(u, [first, second]))
    vocab = {f"i{i}": int(i) for i in range(FIRST_ITEM_ID, FIRST_ITEM_ID + n_items)}
    return SplitDataset(histories, vocab, [f"u{u}" for u in range(n_users)], name=name)
