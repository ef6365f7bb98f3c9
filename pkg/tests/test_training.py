import struct

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from sabr.checkpoint import (
    Checkpoint,
    CheckpointError,
    NotACheckpointError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from sabr.ingest import MASK_ID, SESSION_TOKEN_ID
from sabr.model import ModelConfig, init_params
from sabr.numerics import ParamStore
from sabr.synthetic import session_signal_dataset, toy_dataset
from sabr.training import AdamW, TrainConfig, adamw_step, apply_mlm_mask, train, training_inputs

# ---------------------------------------------------------------------------
# masking


def test_masking_excludes_pads_and_session_tokens():
    ids = np.array([[0, 0, 3, 4, SESSION_TOKEN_ID, 5, 6]] * 500)
    masked, labels, label_mask = apply_mlm_mask(ids, 0.5, np.random.default_rng(0))
    assert not label_mask[:, :2].any()
    assert not label_mask[:, 4].any()
    assert (masked[label_mask] == MASK_ID).all()
    assert (labels[label_mask] == ids[label_mask]).all()
    assert (labels[~label_mask] == 0).all()


def test_tiny_probability_still_masks_exactly_one():
    ids = np.array([[0, 3, 4, 5], [3, 4, 5, 6]])
    _, _, label_mask = apply_mlm_mask(ids, 1e-12, np.random.default_rng(1))
    assert label_mask.sum(axis=1).tolist() == [1, 1]


def test_masking_needs_real_items():
    with pytest.raises(ValueError):
        apply_mlm_mask(np.array([0, 0, SESSION_TOKEN_ID]), 0.2, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=20), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_masking_properties(ids, p, seed):
    ids = np.array(ids)
    if not (ids >= 3).any():
        ids[0] = 3
    masked, labels, label_mask = apply_mlm_mask(ids, p, np.random.default_rng(seed))
    assert label_mask.sum() >= 1
    assert (ids[label_mask] >= 3).all()
    assert (masked[~label_mask] == ids[~label_mask]).all()


# ---------------------------------------------------------------------------
# optimiser


def _step(w, g, **kw):
    params = ParamStore({"w": np.array([w], dtype=float)})
    m, v = {"w": np.zeros(1)}, {"w": np.zeros(1)}
    adamw_step(params, {"w": np.array([g], dtype=float)}, m, v, step=1, **kw)
    return params["w"][0]


def test_adamw_zero_gradient_no_decay_is_identity():
    assert _step(1.5, 0.0, lr=0.1, weight_decay=0.0) == 1.5


def test_adamw_first_step_is_unit_sized():
    assert _step(1.0, 1.0, lr=0.1, weight_decay=0.0) == pytest.approx(0.9, abs=1e-7)


def test_adamw_decay_is_decoupled():
    assert _step(1.0, 0.0, lr=0.1, weight_decay=0.1) == pytest.approx(0.99, abs=1e-15)


def test_adamw_shape_mismatch():
    params = ParamStore({"w": np.zeros(2)})
    with pytest.raises(ValueError):
        adamw_step(params, {"w": np.zeros(3)}, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 1, 0.1)


def test_adamw_class_matches_function_over_steps():
    rng = np.random.default_rng(0)
    a = ParamStore({"w": rng.normal(size=3)})
    b = a.copy()
    opt = AdamW(a, lr=0.01, weight_decay=0.05)
    m, v = {"w": np.zeros(3)}, {"w": np.zeros(3)}
    for step in range(1, 6):
        g = {"w": rng.normal(size=3)}
        opt.step(a, g)
        adamw_step(b, g, m, v, step, 0.01, weight_decay=0.05)
    assert a.equal(b)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt(storage="float64"):
    cfg = ModelConfig(num_items=5, hidden=8, use_st=True)
    return Checkpoint({"model": cfg.to_dict()}, init_params(cfg, 3), storage, {"best_epoch": 2})


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ckpt = _ckpt()
    path = tmp_path / "a.sabr"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.params.equal(ckpt.params)
    assert back.config == ckpt.config and back.meta == ckpt.meta
    save_checkpoint(tmp_path / "b.sabr", back)
    assert (tmp_path / "a.sabr").read_bytes() == (tmp_path / "b.sabr").read_bytes()


def test_checkpoint_float32_storage():
    ckpt = _ckpt("float32")
    back = loads(dumps(ckpt))
    assert back.storage == "float32"
    for name, arr in ckpt.params.items():
        assert np.array_equal(back.params[name], arr.astype(np.float32).astype(np.float64))


def test_checkpoint_header_layout():
    raw = dumps(_ckpt())
    assert raw[:4] == b"SABR"
    assert struct.unpack("<I", raw[4:8]) == (1,)


def test_checkpoint_errors():
    raw = dumps(_ckpt())
    with pytest.raises(NotACheckpointError, match="not a checkpoint"):
        loads(b"XXXX" + raw[4:])
    with pytest.raises(UnsupportedVersionError, match="unsupported version"):
        loads(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(TruncatedCheckpointError):
        loads(raw[:-3])
    with pytest.raises(CheckpointError):
        loads(raw + b"\0")


# ---------------------------------------------------------------------------
# training loop


SMALL = dict(max_len=12, hidden=8, layers=1, heads=2, temporal_dim=4, max_sessions=3)


def _small_run(workers=1, seed=0, **model_flags):
    ds = session_signal_dataset(n_users=24, n_items=20, seed=1)
    mc = ModelConfig(num_items=ds.num_items, **SMALL, **model_flags)
    tc = TrainConfig(batch_size=8, lr=0.01, max_epochs=3, patience=5, seed=seed, val_negatives=5,
                     shard_size=3, workers=workers, random_prefix=True)
    return train(ds, mc, tc)


def test_same_seed_gives_identical_checkpoint_and_log():
    a, b = _small_run(use_st=True, use_tas=True), _small_run(use_st=True, use_tas=True)
    assert dumps(a.checkpoint) == dumps(b.checkpoint)
    assert a.log_csv() == b.log_csv()


def test_worker_count_does_not_change_results():
    a, b = _small_run(workers=1, use_sse=True), _small_run(workers=4, use_sse=True)
    assert dumps(a.checkpoint) == dumps(b.checkpoint)
    assert a.log_csv() == b.log_csv()


def test_different_seed_changes_parameters():
    a, b = _small_run(seed=0), _small_run(seed=1)
    assert not a.checkpoint.params.equal(b.checkpoint.params)


def test_frozen_model_stops_after_patience():
    ds = toy_dataset()
    mc = ModelConfig(num_items=ds.num_items, **SMALL)
    tc = TrainConfig(lr=0.0, weight_decay=0.0, max_epochs=50, patience=1, val_negatives=20)
    result = train(ds, mc, tc)
    assert len(result.log) == 2
    assert result.best_epoch == 1


def test_epoch_log_header():
    log = _small_run().log_csv().splitlines()
    assert log[0] == "epoch,train_loss,val_ndcg10"
    assert len(log) == 4


def test_random_prefix_inputs_end_at_a_history_event():
    ds = session_signal_dataset(n_users=10, n_items=20, seed=2)
    mc = ModelConfig(num_items=ds.num_items, **SMALL)
    inp = training_inputs(ds, mc, np.random.default_rng(0))
    for u in range(ds.num_users):
        events = ds.train_history(u).events()
        last = int(inp.item_ids[u, -1])
        assert last in {i for i, _ in events}


def test_toy_dataset_is_memorised():
    ds = toy_dataset()
    mc = ModelConfig(num_items=ds.num_items, max_len=10, hidden=32, layers=2, heads=2)
    tc = TrainConfig(batch_size=2, lr=3e-3, max_epochs=200, patience=1000, val_negatives=20,
                     select_best=False)
    result = train(ds, mc, tc)
    assert result.log[-1].train_loss < 0.1


@pytest.mark.slow
def test_smoothed_loss_decreases_on_learnable_data():
    ds = session_signal_dataset(n_users=120, seed=3)
    mc = ModelConfig(num_items=ds.num_items, max_len=24, hidden=16, layers=1, heads=2)
    tc = TrainConfig(batch_size=32, lr=5e-3, max_epochs=40, patience=1000, val_negatives=20,
                     random_prefix=True, select_best=False)
    losses = [r.train_loss for r in train(ds, mc, tc).log]
    windows = [np.mean(losses[i:i + 10]) for i in range(0, 40, 10)]
    assert all(b < a for a, b in zip(windows, windows[1:])), windows
