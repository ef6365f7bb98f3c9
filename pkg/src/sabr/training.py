"""Masked-item training with AdamW and validation-based model selection."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from sabr import numerics as nx
from sabr.checkpoint import Checkpoint
from sabr.evaluation import evaluate
from sabr.ingest import FIRST_ITEM_ID, MASK_ID, SplitDataset
from sabr.model import ModelConfig, ModelInput, build_input, init_params, mlm_loss
from sabr.numerics import ParamStore, Tape

log = logging.getLogger(__name__)

EPOCH_LOG_HEADER = ["epoch", "train_loss", "val_ndcg10"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    # model selection
    val_scheme: str = "random"
    val_negatives: int = 100
    val_k: int = 10
    # fixed micro-batch size for gradient sharding; results do not depend on workers
    shard_size: int = 64
    workers: int = 1
    # each epoch, train on a random prefix of every user's history (>= 2 events)
    random_prefix: bool = False
    # False keeps the last epoch's parameters instead of the best-validation ones
    select_best: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.weight_decay < 1:
            raise ValueError("weight_decay must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def result_dict(self) -> dict:
        """Fields that can affect results; ``workers`` is excluded by design."""
        d = self.to_dict()
        del d["workers"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# masking


def apply_mlm_mask(item_ids: np.ndarray, p_mask: float, rng: np.random.Generator):
    """Replace real item tokens by the mask id with probability ``p_mask``.

    Pads and session tokens are never masked. A row where nothing was drawn
    gets one uniformly chosen item position masked. Returns
    ``(masked_ids, labels, label_mask)``; labels are 0 off-mask.
    """
    ids = np.asarray(item_ids)
    squeeze = ids.ndim == 1
    ids2 = np.atleast_2d(ids)
    real = ids2 >= FIRST_ITEM_ID
    if not real.any(axis=1).all():
        raise ValueError("sequence without real item tokens cannot be masked")
    chosen = (rng.random(ids2.shape) < p_mask) & real
    for row in np.flatnonzero(~chosen.any(axis=1)):
        positions = np.flatnonzero(real[row])
        chosen[row, positions[rng.integers(len(positions))]] = True
    masked = np.where(chosen, MASK_ID, ids2)
    labels = np.where(chosen, ids2, 0)
    if squeeze:
        return masked[0], labels[0], chosen[0]
    return masked, labels, chosen


# ---------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}
        self.step_count = 0

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        adamw_step(params, grads, self.m, self.v, self.step_count,
                   self.lr, self.betas, self.eps, self.weight_decay)


def adamw_step(params: ParamStore, grads, m, v, step: int, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update; ``step`` is 1-based."""
    b1, b2 = betas
    c1, c2 = 1 - b1**step, 1 - b2**step
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        w *= 1 - lr * weight_decay
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        w -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ndcg10: float
    seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_LOG_HEADER)
        for r in self.log:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_ndcg10)])
        return buf.getvalue()


def training_inputs(dataset: SplitDataset, config: ModelConfig, rng: np.random.Generator | None = None
                    ) -> ModelInput:
    """One training sequence per user; with ``rng``, a random prefix of each history."""
    inputs = []
    for u in range(dataset.num_users):
        history = dataset.train_history(u)
        if rng is not None and len(history) > 2:
            history = history.drop_last(int(rng.integers(0, len(history) - 1)))
        inputs.append(build_input(history, config, "train"))
    return ModelInput.stack(inputs)


def _shard_grads(params: ParamStore, inp: ModelInput, labels, label_mask, config):
    tape = Tape()
    loss = mlm_loss(inp, labels, label_mask, params.bind(tape), config, reduction="sum")
    return loss.item(), tape.backward(loss)


def _take(inp: ModelInput, idx) -> ModelInput:
    return ModelInput(*(getattr(inp, f.name)[idx] for f in fields(ModelInput)))


def batch_gradients(params: ParamStore, inp: ModelInput, labels, label_mask, config: ModelConfig,
                    shard_size: int, pool: ThreadPoolExecutor | None = None):
    """Mean loss and gradients over a batch, reduced shard by shard in a fixed order."""
    n = inp.item_ids.shape[0]
    bounds = [(i, min(i + shard_size, n)) for i in range(0, n, shard_size)]
    jobs = [(_take(inp, slice(a, b)), labels[a:b], label_mask[a:b]) for a, b in bounds]
    if pool is not None:
        results = list(pool.map(lambda j: _shard_grads(params, *j, config), jobs))
    else:
        results = [_shard_grads(params, *j, config) for j in jobs]
    count = int(label_mask.sum())
    total = 0.0
    grads = {name: np.zeros_like(a) for name, a in params.items()}
    for loss_sum, g in results:
        total += loss_sum
        for name in grads:
            grads[name] += g[name]
    for name in grads:
        grads[name] /= count
    return total / count, grads


def train(dataset: SplitDataset, model_config: ModelConfig, train_config: TrainConfig,
          progress=None) -> TrainResult:
    """Train with per-epoch validation and early stopping on validation NDCG@K."""
    if dataset.num_users == 0:
        raise ValueError("empty dataset")
    tc = train_config
    rng = np.random.default_rng(tc.seed)
    params = init_params(model_config, seed=tc.seed)
    opt = AdamW(params, tc.lr, (tc.beta1, tc.beta2), tc.eps, tc.weight_decay)
    inputs = None if tc.random_prefix else training_inputs(dataset, model_config)
    n = dataset.num_users

    best = params.copy()
    best_score, best_epoch, stale = -np.inf, 0, 0
    history: list[EpochRecord] = []
    pool = ThreadPoolExecutor(tc.workers) if tc.workers > 1 else None
    try:
        for epoch in range(1, tc.max_epochs + 1):
            start = time.perf_counter()
            if tc.random_prefix:
                inputs = training_inputs(dataset, model_config, rng)
            order = rng.permutation(n)
            loss_sum, count = 0.0, 0
            for b in range(0, n, tc.batch_size):
                idx = order[b:b + tc.batch_size]
                batch = _take(inputs, idx)
                masked, labels, label_mask = apply_mlm_mask(batch.item_ids, model_config.p_mask, rng)
                try:
                    loss, grads = batch_gradients(params, batch.with_items(masked), labels, label_mask,
                                                  model_config, tc.shard_size, pool)
                except nx.NumericsError as exc:
                    raise TrainingDiverged(
                        f"non-finite values at epoch {epoch}, step {opt.step_count + 1}: {exc}") from exc
                opt.step(params, grads)
                k = int(label_mask.sum())
                loss_sum += loss * k
                count += k
            val = evaluate(params, model_config, dataset, tc.val_scheme, tc.val_k, tc.seed,
                           target="valid", n_negatives=tc.val_negatives, workers=tc.workers)
            record = EpochRecord(epoch, loss_sum / count, val.ndcg, time.perf_counter() - start)
            history.append(record)
            if progress is not None:
                progress(record)
            log.info("epoch %d loss %.4f val ndcg %.4f", epoch, record.train_loss, record.val_ndcg10)
            if val.ndcg > best_score:
                best_score, best_epoch, stale = val.ndcg, epoch, 0
                if tc.select_best:
                    best = params.copy()
            else:
                stale += 1
                if stale >= tc.patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    if not tc.select_best:
        best = params
    ckpt = Checkpoint(
        config={"model": model_config.to_dict(), "train": tc.result_dict()},
        params=best,
        meta={"best_epoch": best_epoch, "best_val_ndcg": best_score, "epochs_run": len(history)},
    )
    return TrainResult(ckpt, history, best_epoch)
