"""Candidate construction, Recall/NDCG@K and the popularity baseline."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from sabr.ingest import FIRST_ITEM_ID, SplitDataset
from sabr.model import ModelConfig, ModelInput, build_input, constant_params, forward
from sabr.numerics import ParamStore

SCHEMES = ("random", "popular", "all")
SCHEME_LABELS = {"random": "Ran.", "popular": "Pop.", "all": "All"}
REPORT_HEADER = ["dataset", "variant", "seed", "scheme", "K", "metric", "value", "users"]


class InsufficientNegativesError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    scheme: str
    items: np.ndarray        # item ids; index 0 is the ground truth
    ground_truth: int


@dataclass(frozen=True)
class MetricReport:
    scheme: str
    k: int
    recall: float
    ndcg: float
    users: int
    seed: int

    def csv_rows(self, dataset: str, variant: str) -> list[list]:
        return [
            [dataset, variant, self.seed, self.scheme, self.k, f"recall@{self.k}", f"{self.recall:.6f}", self.users],
            [dataset, variant, self.seed, self.scheme, self.k, f"ndcg@{self.k}", f"{self.ndcg:.6f}", self.users],
        ]


class Popularity:
    """Training-split interaction counts and the derived item ordering."""

    def __init__(self, dataset: SplitDataset):
        counts = np.asarray(dataset.train_popularity(), dtype=np.int64)
        self.counts = counts
        items = np.arange(FIRST_ITEM_ID, dataset.vocab_size)
        # most popular first; ties by smaller id
        self.order = items[np.lexsort((items, -counts[items]))]


def build_candidates(dataset: SplitDataset, user: int, scheme: str, seed: int = 0,
                     target: str = "test", popularity: Popularity | None = None,
                     n_negatives: int = 100) -> CandidateSet:
    gt = dataset.test(user).item if target == "test" else dataset.valid(user).item
    all_items = np.arange(FIRST_ITEM_ID, dataset.vocab_size)
    if scheme == "all":
        return CandidateSet(scheme, np.concatenate([[gt], all_items[all_items != gt]]), gt)
    seen = dataset.user_items(user)
    if scheme == "random":
        eligible = np.array([i for i in all_items if i not in seen], dtype=np.int64)
        if eligible.size < n_negatives:
            raise InsufficientNegativesError(
                f"user {user}: only {eligible.size} eligible negatives, need {n_negatives}")
        rng = np.random.default_rng([seed, user])
        negatives = rng.choice(eligible, size=n_negatives, replace=False)
        return CandidateSet(scheme, np.concatenate([[gt], negatives]), gt)
    if scheme == "popular":
        popularity = popularity or Popularity(dataset)
        negatives = [i for i in popularity.order if i not in seen and i != gt][:n_negatives]
        if len(negatives) < n_negatives:
            raise InsufficientNegativesError(
                f"user {user}: only {len(negatives)} eligible negatives, need {n_negatives}")
        return CandidateSet(scheme, np.concatenate([[gt], negatives]).astype(np.int64), gt)
    raise ValueError(f"unknown scheme {scheme!r}")


def rank_of_truth(scores: np.ndarray, truth_index=0) -> np.ndarray:
    """Pessimistic 1-based rank: ties with the ground truth rank it last.

    ``scores`` is ``[n]`` or ``[users, n]``; ``truth_index`` selects the
    ground-truth column per row.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    idx = np.broadcast_to(np.asarray(truth_index), scores.shape[:1])
    gt = scores[np.arange(scores.shape[0]), idx][:, None]
    return (scores >= gt).sum(axis=1)


def metrics_from_rank(rank, k: int = 10):
    rank = np.asarray(rank)
    hit = rank <= k
    ndcg = np.where(hit, 1.0 / np.log2(rank + 1.0), 0.0)
    return hit.astype(np.float64), ndcg


def rank_metrics(scores: Mapping[int, float], ground_truth: int, k: int = 10) -> tuple[int, float]:
    """``(recall indicator, ndcg)`` for one user's candidate scores."""
    if ground_truth not in scores:
        raise KeyError(f"ground truth {ground_truth} not among scored candidates")
    items = list(scores)
    values = np.array([scores[i] for i in items], dtype=np.float64)
    r = int(rank_of_truth(values, items.index(ground_truth))[0])
    if r > k:
        return 0, 0.0
    return 1, 1.0 / math.log2(r + 1)


# ---------------------------------------------------------------------------
# model evaluation


def _candidate_matrix(dataset, users, scheme, seed, target, n_negatives, popularity):
    return np.stack([
        build_candidates(dataset, u, scheme, seed, target, popularity, n_negatives).items
        for u in users
    ])


def inference_inputs(dataset: SplitDataset, users, config: ModelConfig, target: str) -> ModelInput:
    inputs = []
    for u in users:
        history, held = dataset.inference_case(u, target)
        t = held.timestamp if config.mask_timestamp == "target" else history.sessions[-1][-1][1]
        inputs.append(build_input(history, config, "infer", t, held.new_session))
    return ModelInput.stack(inputs)


def score_users(params: ParamStore, config: ModelConfig, dataset: SplitDataset, users,
                target: str = "test") -> np.ndarray:
    """Item scores ``[len(users), num_items]`` at the mask position."""
    inp = inference_inputs(dataset, users, config, target)
    logits = forward(inp, constant_params(params), config).data
    return logits[:, -1, :]


def evaluate(params: ParamStore, config: ModelConfig, dataset: SplitDataset, scheme: str = "random",
             k: int = 10, seed: int = 0, target: str = "test", n_negatives: int = 100,
             workers: int = 1, chunk_size: int = 256) -> MetricReport:
    """Average Recall@K / NDCG@K over all users.

    Users are processed in fixed-size chunks so results do not depend on
    ``workers``; per-user values are summed in user order.
    """
    if config.num_items != dataset.num_items:
        raise ValueError(f"model has {config.num_items} items, dataset has {dataset.num_items}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    popularity = Popularity(dataset) if scheme == "popular" else None
    users = np.arange(dataset.num_users)
    chunks = [users[i:i + chunk_size] for i in range(0, len(users), chunk_size)]

    def run(chunk):
        scores = score_users(params, config, dataset, chunk, target)
        cands = _candidate_matrix(dataset, chunk, scheme, seed, target, n_negatives, popularity)
        cand_scores = np.take_along_axis(scores, cands - FIRST_ITEM_ID, axis=1)
        return metrics_from_rank(rank_of_truth(cand_scores, 0), k)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    hits = np.concatenate([p[0] for p in parts])
    ndcgs = np.concatenate([p[1] for p in parts])
    n = len(users)
    return MetricReport(scheme, k, float(hits.sum() / n), float(ndcgs.sum() / n), n, seed)


def pop_baseline(dataset: SplitDataset, scheme: str = "random", k: int = 10, seed: int = 0,
                 target: str = "test", n_negatives: int = 100) -> MetricReport:
    """Rank candidates by training-split interaction counts."""
    popularity = Popularity(dataset)
    counts = popularity.counts.astype(np.float64)
    users = np.arange(dataset.num_users)
    cands = _candidate_matrix(dataset, users, scheme, seed, target, n_negatives, popularity)
    hits, ndcgs = metrics_from_rank(rank_of_truth(counts[cands], 0), k)
    n = len(users)
    return MetricReport(scheme, k, float(hits.sum() / n), float(ndcgs.sum() / n), n, seed)


def write_report(rows: list[list], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text
