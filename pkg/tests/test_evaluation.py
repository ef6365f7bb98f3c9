import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from oracles import brute_force_rank_metrics
from sabr.evaluation import (
    REPORT_HEADER,
    InsufficientNegativesError,
    Popularity,
    build_candidates,
    evaluate,
    metrics_from_rank,
    pop_baseline,
    rank_metrics,
    rank_of_truth,
    write_report,
)
from sabr.ingest import SessionizedHistory, SplitDataset
from sabr.model import ModelConfig, init_params
from sabr.synthetic import session_signal_dataset

DAY = 86_400


def make_dataset(n_users=5, n_items=150, seed=0):
    rng = np.random.default_rng(seed)
    histories = []
    for u in range(n_users):
        items = rng.choice(np.arange(3, 3 + n_items), size=6, replace=False)
        t = 1_000_000
        sessions = [[(int(items[0]), t), (int(items[1]), t + 60), (int(items[2]), t + 120)],
                    [(int(items[3]), t + 3 * DAY), (int(items[4]), t + 3 * DAY + 60),
                     (int(items[5]), t + 3 * DAY + 120)]]
        histories.append(SessionizedHistory(u, sessions))
    vocab = {str(i): i for i in range(3, 3 + n_items)}
    return SplitDataset(histories, vocab)


# ---------------------------------------------------------------------------
# rank metrics


def test_unique_max_is_perfect():
    assert rank_metrics({3: 0.9, 4: 0.1, 5: 0.2}, 3) == (1, 1.0)


def test_rank_ten_ndcg():
    scores = {i: float(20 - i) for i in range(20)}  # ground truth 9 has rank 10
    hit, ndcg = rank_metrics(scores, 9, k=10)
    assert hit == 1
    assert ndcg == pytest.approx(1 / math.log2(11))
    assert round(ndcg, 5) == 0.28906


def test_rank_eleven_is_outside_cutoff():
    scores = {i: float(20 - i) for i in range(20)}
    assert rank_metrics(scores, 10, k=10) == (0, 0.0)


def test_ties_rank_ground_truth_last():
    assert rank_metrics({1: 0.5, 2: 0.5, 3: 0.5}, 2, k=10) == (1, 0.5)


def test_missing_ground_truth():
    with pytest.raises(KeyError):
        rank_metrics({1: 0.5}, 2)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.data(), st.integers(1, 12))
def test_rank_metrics_match_sorting(values, data, k):
    gt = data.draw(st.integers(0, len(values) - 1))
    scores = {i: float(v) for i, v in enumerate(values)}
    assert rank_metrics(scores, gt, k) == brute_force_rank_metrics(scores, gt, k)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=40), st.integers(1, 20))
def test_larger_k_never_hurts(values, k):
    r = rank_of_truth(np.array(values), 0)
    h1, n1 = metrics_from_rank(r, k)
    h2, n2 = metrics_from_rank(r, k + 1)
    assert (h2 >= h1).all() and (n2 >= n1).all()
    assert (n1 <= h1).all()


# ---------------------------------------------------------------------------
# candidates


def test_all_scheme_covers_catalog():
    ds = make_dataset()
    c = build_candidates(ds, 0, "all")
    assert len(c.items) == ds.num_items
    assert c.items[0] == ds.test(0).item
    assert sorted(c.items) == list(range(3, 3 + ds.num_items))


def test_random_scheme_excludes_history():
    ds = make_dataset()
    c = build_candidates(ds, 1, "random", seed=4)
    assert len(c.items) == 101 and len(set(c.items)) == 101
    assert not set(c.items[1:]) & ds.user_items(1)
    again = build_candidates(ds, 1, "random", seed=4)
    assert np.array_equal(c.items, again.items)
    assert not np.array_equal(c.items, build_candidates(ds, 1, "random", seed=5).items)


def test_random_scheme_needs_enough_items():
    ds = make_dataset(n_items=100)
    with pytest.raises(InsufficientNegativesError, match="user 0"):
        build_candidates(ds, 0, "random")


def test_popular_scheme_skips_ground_truth_and_history():
    ds = make_dataset()
    pop = Popularity(ds)
    for u in range(ds.num_users):
        c = build_candidates(ds, u, "popular", popularity=pop)
        negatives = list(c.items[1:])
        assert len(negatives) == 100
        assert ds.test(u).item not in negatives
        assert not set(negatives) & ds.user_items(u)
        eligible = [i for i in pop.order if i not in ds.user_items(u)]
        assert negatives == eligible[:100]


def test_popularity_uses_training_part_only():
    ds = make_dataset()
    counts = Popularity(ds).counts
    for u in range(ds.num_users):
        assert counts[ds.test(u).item] == sum(ds.test(u).item == i for v in range(ds.num_users)
                                              for i, _ in ds.train_history(v).events())


# ---------------------------------------------------------------------------
# model evaluation


def test_uniform_scores_hit_rate_monte_carlo():
    rng = np.random.default_rng(0)
    scores = rng.random((20_000, 101))
    hits, _ = metrics_from_rank(rank_of_truth(scores, 0), 10)
    assert abs(hits.mean() - 10 / 101) < 0.006


def test_oracle_scores_are_perfect(monkeypatch):
    ds = make_dataset(n_items=150)
    cfg = ModelConfig(num_items=ds.num_items, max_len=8, hidden=8)

    def perfect(params, config, dataset, users, target="test"):
        out = np.zeros((len(users), dataset.num_items))
        for row, u in enumerate(users):
            out[row, dataset.test(u).item - 3] = 1.0
        return out

    monkeypatch.setattr("sabr.evaluation.score_users", perfect)
    for scheme in ("random", "popular", "all"):
        r = evaluate(init_params(cfg), cfg, ds, scheme)
        assert (r.recall, r.ndcg) == (1.0, 1.0)


def test_evaluate_is_repeatable_and_worker_independent():
    ds = session_signal_dataset(n_users=30, n_items=20, seed=0)
    cfg = ModelConfig(num_items=ds.num_items, max_len=12, hidden=8, use_tas=True)
    params = init_params(cfg, 1)
    a = evaluate(params, cfg, ds, "random", n_negatives=5, chunk_size=7)
    b = evaluate(params, cfg, ds, "random", n_negatives=5, chunk_size=7, workers=4)
    assert a == b
    assert 0 <= a.ndcg <= a.recall <= 1


def test_vocabulary_mismatch():
    ds = make_dataset()
    cfg = ModelConfig(num_items=ds.num_items + 1, hidden=8)
    with pytest.raises(ValueError, match="items"):
        evaluate(init_params(cfg), cfg, ds, "all")


def test_pop_all_scheme_with_most_popular_ground_truth():
    hot = 3
    histories = []
    for u in range(4):
        other = [(4 + u, 1000), (hot, 1060), (5 + u, 1120)]
        histories.append(SessionizedHistory(u, [other, [(6 + u, 9 * DAY), (hot, 9 * DAY + 60)]]))
    ds = SplitDataset(histories, {str(i): i for i in range(3, 12)})
    r = pop_baseline(ds, "all")
    assert r.recall == 1.0
    assert r == pop_baseline(ds, "all")


def test_report_csv_layout():
    ds = make_dataset()
    r = pop_baseline(ds, "popular")
    text = write_report(r.csv_rows("toy", "POP"))
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[1].startswith("toy,POP,0,popular,10,recall@10,")
    assert len(lines) == 3
