"""BERT-style masked-item encoder with session tokens, session segment
embeddings and temporal self-attention.

Token ids follow :mod:`sabr.ingest`: 0 pad, 1 mask, 2 session token, items
from 3. The output head scores real items only, so column ``j`` of the
logits corresponds to item id ``j + 3``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from sabr import numerics as nx
from sabr.ingest import FIRST_ITEM_ID, MASK_ID, PAD_ID, SESSION_TOKEN_ID, SessionizedHistory
from sabr.numerics import ParamStore, Tape, Tensor

SECONDS_PER_DAY = 86_400.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_items: int
    max_len: int = 20
    hidden: int = 32
    layers: int = 2
    heads: int = 2
    p_mask: float = 0.2
    max_sessions: int = 4
    temporal_dim: int = 16
    use_st: bool = False
    use_sse: bool = False
    use_tas: bool = False
    init_std: float = 0.02
    ln_eps: float = 1e-12
    ffn_mult: int = 4
    # timestamp carried by the inference mask: "target" or "last"
    mask_timestamp: str = "target"

    def __post_init__(self):
        if self.num_items < 1:
            raise ConfigError("num_items must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.max_sessions < 1:
            raise ConfigError("max_sessions must be >= 1")
        if self.use_tas and self.temporal_dim < 1:
            raise ConfigError("temporal_dim must be >= 1 with use_tas")
        if not 0.0 < self.p_mask < 1.0:
            raise ConfigError("p_mask must lie in (0, 1)")
        if self.mask_timestamp not in ("target", "last"):
            raise ConfigError("mask_timestamp must be 'target' or 'last'")

    @property
    def vocab_size(self) -> int:
        return self.num_items + FIRST_ITEM_ID

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def variant(self) -> str:
        return variant_name(self.use_st, self.use_sse, self.use_tas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def variant_name(use_st: bool, use_sse: bool, use_tas: bool) -> str:
    parts = [n for n, on in (("ST", use_st), ("SSE", use_sse), ("TAS", use_tas)) if on]
    return "BERT4Rec" + "".join("+" + p for p in parts)


# ---------------------------------------------------------------------------
# inputs


@dataclass
class ModelInput:
    """Encoded sequence(s); arrays are ``[L]`` for one user or ``[B, L]`` stacked."""

    item_ids: np.ndarray
    positions: np.ndarray
    segment_ids: np.ndarray
    timestamps: np.ndarray
    attend_mask: np.ndarray

    @classmethod
    def stack(cls, inputs: list["ModelInput"]) -> "ModelInput":
        return cls(*(np.stack([getattr(x, f.name) for x in inputs]) for f in fields(cls)))

    def batched(self) -> "ModelInput":
        if self.item_ids.ndim == 2:
            return self
        return ModelInput(*(getattr(self, f.name)[None] for f in fields(self)))

    def with_items(self, item_ids: np.ndarray) -> "ModelInput":
        return ModelInput(item_ids, self.positions, self.segment_ids, self.timestamps, self.attend_mask)


def build_input(history: SessionizedHistory, config: ModelConfig, mode: str = "train",
                infer_timestamp: int | None = None, infer_is_new_session: bool = False) -> ModelInput:
    """Flatten sessions into a left-padded token sequence of length ``max_len``.

    Session tokens (``use_st``) go between sessions and take the timestamp
    and segment of the session that follows them. In ``infer`` mode a mask
    token is appended, optionally opening a new session. Segment ids count
    sessions from the most recent (1) and clamp at ``max_sessions``.
    """
    if not history.sessions or len(history) == 0:
        raise ValueError(f"empty history for user {history.user}")
    sessions = [list(s) for s in history.sessions if s]
    if mode == "infer":
        last_t = sessions[-1][-1][1]
        if infer_timestamp is None:
            infer_timestamp = last_t
        if infer_timestamp < last_t:
            raise ValueError("infer_timestamp precedes the last observed event")
        if infer_is_new_session:
            sessions.append([(MASK_ID, infer_timestamp)])
        else:
            sessions[-1].append((MASK_ID, infer_timestamp))
    elif mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    tokens: list[tuple[int, int, int]] = []  # (token, timestamp, segment)
    n_sessions = len(sessions)
    for k, session in enumerate(sessions):
        segment = min(n_sessions - k, config.max_sessions)
        if k > 0 and config.use_st:
            tokens.append((SESSION_TOKEN_ID, session[0][1], segment))
        tokens.extend((item, t, segment) for item, t in session)

    tokens = tokens[-config.max_len:]
    L, n = config.max_len, len(tokens)
    item_ids = np.zeros(L, dtype=np.int64)
    segment_ids = np.zeros(L, dtype=np.int64)
    timestamps = np.zeros(L, dtype=np.int64)
    if n:
        arr = np.asarray(tokens, dtype=np.int64)
        item_ids[L - n:] = arr[:, 0]
        timestamps[L - n:] = arr[:, 1]
        segment_ids[L - n:] = arr[:, 2]
    return ModelInput(
        item_ids=item_ids,
        positions=np.arange(L, dtype=np.int64),
        segment_ids=segment_ids,
        timestamps=timestamps,
        attend_mask=item_ids != PAD_ID,
    )


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(config: ModelConfig, i: int) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden, config.hidden * config.ffn_mult
    p = f"layer{i}."
    shapes = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{p}attn.{proj}.weight"] = (d, d)
        shapes[f"{p}attn.{proj}.bias"] = (d,)
    shapes.update({
        f"{p}ln1.gain": (d,), f"{p}ln1.bias": (d,),
        f"{p}ffn.in.weight": (d, f), f"{p}ffn.in.bias": (f,),
        f"{p}ffn.out.weight": (f, d), f"{p}ffn.out.bias": (d,),
        f"{p}ln2.gain": (d,), f"{p}ln2.bias": (d,),
    })
    return shapes


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.hidden
    shapes = {
        # rows: pad, mask, then items 3.. at row id-1
        "token_embedding": (config.num_items + 2, d),
        "position_embedding": (config.max_len, d),
        "output_bias": (config.num_items,),
    }
    if config.use_st:
        shapes["session_token"] = (1, d)
    if config.use_sse:
        shapes["segment_embedding"] = (config.max_sessions, d)
    if config.use_tas:
        shapes["temporal.omega"] = (config.temporal_dim,)
        shapes["temporal.theta"] = (config.temporal_dim,)
    for i in range(config.layers):
        shapes.update(_layer_shapes(config, i))
    return shapes


def num_parameters(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(config).values())


def init_omegas(temporal_dim: int) -> np.ndarray:
    """Angular frequencies (per day) for periods spaced geometrically in [0.1, 1e4] days."""
    if temporal_dim == 1:
        periods = np.array([1.0])
    else:
        periods = np.geomspace(0.1, 1e4, temporal_dim)
    return 2 * np.pi / periods


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in sorted(parameter_shapes(config).items()):
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias") or name == "output_bias" or name == "temporal.theta":
            value = np.zeros(shape)
        elif name == "temporal.omega":
            value = init_omegas(config.temporal_dim)
        else:
            value = np.clip(rng.normal(0.0, config.init_std, shape),
                            -2 * config.init_std, 2 * config.init_std)
        store[name] = value
    return store


# ---------------------------------------------------------------------------
# forward


def temporal_encoding(t_seconds, omega, theta) -> Tensor:
    """``cos(omega * t_days + theta)`` for every timestamp; shape ``t.shape + (d_T,)``."""
    t_days = np.asarray(t_seconds, dtype=np.float64)[..., None] / SECONDS_PER_DAY
    return nx.cosine(nx.add(nx.mul(t_days, omega), theta))


def temporal_self_attention(q: Tensor, k: Tensor, v: Tensor, te_q, te_k, attend_mask,
                            trace: dict | None = None) -> Tensor:
    """Attention whose logits are ``[q | te_q] . [k | te_k]`` scaled by ``sqrt(d_head + d_T)``.

    ``q, k, v`` are ``[..., n, d_head]``; ``te_*`` broadcast to the same
    leading axes with last axis ``d_T`` and are not projected. Values carry
    no temporal part. Pass ``te_q = te_k = None`` for plain attention.
    """
    if te_q is None:
        qc, kc, width = q, k, q.shape[-1]
    else:
        if te_q.shape[-1] == 0:
            raise nx.NumericsError("temporal self-attention needs temporal_dim >= 1")
        qc, kc = nx.concat_last_dim(q, te_q), nx.concat_last_dim(k, te_k)
        width = q.shape[-1] + te_q.shape[-1]
    logits = nx.matmul(qc, nx.swap_last(kc))
    if trace is not None:
        trace.setdefault("attention", []).append({
            "q": q.data, "k": k.data, "logits": logits.data,
            "te_q": None if te_q is None else np.broadcast_to(te_q.data, te_q.shape),
            "te_k": None if te_k is None else np.broadcast_to(te_k.data, te_k.shape),
        })
    weights = nx.softmax_masked(nx.scale(logits, 1.0 / math.sqrt(width)), attend_mask)
    if trace is not None:
        trace["attention"][-1]["weights"] = weights.data
    return nx.matmul(weights, v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return nx.transpose(nx.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def embed(inp: ModelInput, p: dict[str, Tensor], config: ModelConfig) -> Tensor:
    ids = inp.item_ids
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {config.vocab_size}")
    is_st = ids == SESSION_TOKEN_ID
    if is_st.any() and not config.use_st:
        raise ValueError("session token in input but use_st is off")
    rows = np.where(ids >= FIRST_ITEM_ID, ids - 1, ids)
    rows[is_st] = PAD_ID
    x = nx.embedding_gather(p["token_embedding"], rows)
    if config.use_st:
        st = is_st[..., None].astype(np.float64)
        x = nx.add(nx.mul(x, 1.0 - st), nx.mul(p["session_token"], st))
    x = nx.add(x, nx.embedding_gather(p["position_embedding"], inp.positions))
    if config.use_sse:
        seg = inp.segment_ids
        if seg.max() > config.max_sessions:
            raise ValueError("segment id exceeds max_sessions")
        sse = nx.embedding_gather(p["segment_embedding"], np.maximum(seg - 1, 0))
        x = nx.add(x, nx.mul(sse, (seg > 0)[..., None].astype(np.float64)))
    return x


def encode(inp: ModelInput, p: dict[str, Tensor], config: ModelConfig,
           trace: dict | None = None) -> Tensor:
    """Hidden states ``[B, L, hidden]`` after the encoder stack."""
    inp = inp.batched()
    x = embed(inp, p, config)
    B, L, _ = x.shape
    key_mask = inp.attend_mask[:, None, None, :]
    te = None
    if config.use_tas:
        te = nx.reshape(temporal_encoding(inp.timestamps, p["temporal.omega"], p["temporal.theta"]),
                        (B, 1, L, config.temporal_dim))
    for i in range(config.layers):
        pre = f"layer{i}."
        q, k, v = (_split_heads(nx.linear(x, p[f"{pre}attn.{n}.weight"], p[f"{pre}attn.{n}.bias"]),
                                config.heads) for n in ("q", "k", "v"))
        att = _merge_heads(temporal_self_attention(q, k, v, te, te, key_mask, trace))
        att = nx.linear(att, p[f"{pre}attn.o.weight"], p[f"{pre}attn.o.bias"])
        x = nx.layer_norm(nx.add(x, att), p[f"{pre}ln1.gain"], p[f"{pre}ln1.bias"], config.ln_eps)
        h = nx.gelu(nx.linear(x, p[f"{pre}ffn.in.weight"], p[f"{pre}ffn.in.bias"]))
        h = nx.linear(h, p[f"{pre}ffn.out.weight"], p[f"{pre}ffn.out.bias"])
        x = nx.layer_norm(nx.add(x, h), p[f"{pre}ln2.gain"], p[f"{pre}ln2.bias"], config.ln_eps)
    return x


def item_logits(hidden: Tensor, p: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Tied output head over real items: ``hidden @ E_items^T + bias``."""
    items = nx.embedding_gather(p["token_embedding"], np.arange(2, config.num_items + 2))
    return nx.add(nx.matmul(hidden, nx.swap_last(items)), p["output_bias"])


def forward(inp: ModelInput, p: dict[str, Tensor], config: ModelConfig,
            trace: dict | None = None) -> Tensor:
    """Logits ``[B, L, num_items]`` for every position."""
    return item_logits(encode(inp, p, config, trace), p, config)


def constant_params(store: ParamStore) -> dict[str, Tensor]:
    """Parameters as untracked tensors, for inference without a tape."""
    return {name: Tensor(arr) for name, arr in store.items()}


def mlm_loss(inp: ModelInput, labels: np.ndarray, label_mask: np.ndarray,
             p: dict[str, Tensor], config: ModelConfig, reduction: str = "mean") -> Tensor:
    """Masked-item cross-entropy computed only at masked positions."""
    hidden = encode(inp, p, config)
    B, L, d = hidden.shape
    flat = np.flatnonzero(np.asarray(label_mask).reshape(-1))
    if flat.size == 0:
        raise nx.NumericsError("no masked positions in batch")
    rows = nx.embedding_gather(nx.reshape(hidden, (B * L, d)), flat)
    logits = item_logits(rows, p, config)
    targets = np.asarray(labels).reshape(-1)[flat] - FIRST_ITEM_ID
    return nx.cross_entropy_masked(logits, targets, np.ones(flat.size, dtype=bool), reduction)
