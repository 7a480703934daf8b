"""Decoder-only transformer: RoPE, pre-RMSNorm, SwiGLU, grouped-query attention.

Parameters are plain float64 numpy arrays in a flat dict (no bias terms,
untied embedding and output head), which keeps the analytic backward pass
explicit and bitwise reproducible. ``backward`` returns exact gradients of
the next-token cross-entropy for every parameter; the test suite checks them
against central finite differences.

Residual wiring per block: x + attn(rmsnorm(x)), then x + ffn(rmsnorm(x)),
with one final rmsnorm before the output head. No dropout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_CKPT_MAGIC = "forge-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 2048
    intermediate_size: int = 5632
    n_heads: int = 32
    n_kv_heads: int = 4
    n_layers: int = 24
    context_len: int = 4096
    vocab_size: int = 32000
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise DataError("hidden_size must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise DataError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2 != 0:
            raise DataError("head_dim must be even for rotary pairs")
        if self.intermediate_size <= 0:
            raise DataError("intermediate_size must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.n_kv_heads


def init_params(
    config: ModelConfig, seed: int, init_std: float = 0.02, dtype=np.float64
) -> dict[str, np.ndarray]:
    """normal(0, init_std) weights, unit norm gains."""
    rng = np.random.default_rng(seed)
    d, f, v = config.hidden_size, config.intermediate_size, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, init_std, shape).astype(dtype)

    params: dict[str, np.ndarray] = {"embedding": w(v, d)}
    for i in range(config.n_layers):
        params[f"layers.{i}.attn_norm"] = np.ones(d, dtype=dtype)
        params[f"layers.{i}.wq"] = w(d, d)
        params[f"layers.{i}.wk"] = w(d, config.kv_dim)
        params[f"layers.{i}.wv"] = w(d, config.kv_dim)
        params[f"layers.{i}.wo"] = w(d, d)
        params[f"layers.{i}.ffn_norm"] = np.ones(d, dtype=dtype)
        params[f"layers.{i}.w_gate"] = w(d, f)
        params[f"layers.{i}.w_up"] = w(d, f)
        params[f"layers.{i}.w_down"] = w(f, d)
    params["final_norm"] = np.ones(d, dtype=dtype)
    params["output_head"] = w(d, v)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def rmsnorm(x: np.ndarray, gains: np.ndarray, eps: float) -> np.ndarray:
    """y = gains * x / sqrt(mean(x^2) + eps) over the last axis."""
    r = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x * r * gains


def _rmsnorm_fwd(x: np.ndarray, gains: np.ndarray, eps: float):
    r = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x * r * gains, r


def _rmsnorm_bwd(dy, x, gains, r):
    d = x.shape[-1]
    dgains = np.sum(dy * x * r, axis=tuple(range(x.ndim - 1)))
    t = np.sum(dy * gains * x, axis=-1, keepdims=True)
    dx = dy * gains * r - x * (r**3 / d) * t
    return dx, dgains


def _rope_tables(positions: np.ndarray, head_dim: int, base: float):
    freqs = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope(v: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate adjacent coordinate pairs of one head vector by position-scaled
    angles; a pure rotation, so the norm is preserved."""
    h = v.shape[-1]
    if h % 2 != 0:
        raise DataError("rope requires an even head dimension")
    cos, sin = _rope_tables(np.array([position]), h, base)
    out = np.empty_like(v, dtype=np.float64)
    even, odd = v[..., 0::2], v[..., 1::2]
    out[..., 0::2] = even * cos[0] - odd * sin[0]
    out[..., 1::2] = even * sin[0] + odd * cos[0]
    return out


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """x: (..., N, head_dim); cos/sin: (N, head_dim/2)."""
    out = np.empty_like(x)
    even, odd = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rope_reverse(dx: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Adjoint of _rope_apply: rotation by the negated angles."""
    out = np.empty_like(dx)
    even, odd = dx[..., 0::2], dx[..., 1::2]
    out[..., 0::2] = even * cos + odd * sin
    out[..., 1::2] = -even * sin + odd * cos
    return out


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def swiglu_ffn(
    x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray
) -> np.ndarray:
    """down( silu(gate(x)) * up(x) )."""
    return (_silu(x @ w_gate) * (x @ w_up)) @ w_down


def _causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def gqa_attention(
    x: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    n_heads: int,
    n_kv_heads: int,
    rope_base: float = 10000.0,
    positions: np.ndarray | None = None,
) -> np.ndarray:
    """Causal grouped-query attention over (L, d) activations.

    Query head j shares the key/value head j // (n_heads // n_kv_heads).
    """
    seq_len, d = x.shape
    head_dim = d // n_heads
    group = n_heads // n_kv_heads
    if positions is None:
        positions = np.arange(seq_len)
    cos, sin = _rope_tables(positions, head_dim, rope_base)

    q = (x @ wq).reshape(seq_len, n_heads, head_dim).transpose(1, 0, 2)
    k = (x @ wk).reshape(seq_len, n_kv_heads, head_dim).transpose(1, 0, 2)
    v = (x @ wv).reshape(seq_len, n_kv_heads, head_dim).transpose(1, 0, 2)
    q = _rope_apply(q, cos, sin)
    k = _rope_apply(k, cos, sin)

    kv_map = np.arange(n_heads) // group
    scores = q @ k[kv_map].transpose(0, 2, 1) / np.sqrt(head_dim)
    scores = scores + _causal_mask(seq_len)
    attn = _softmax(scores)
    out = attn @ v[kv_map]
    return out.transpose(1, 0, 2).reshape(seq_len, d) @ wo


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------


def _check_ids(config: ModelConfig, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise DataError("ids must be a 1-D or 2-D integer array")
    if ids.shape[1] > config.context_len:
        raise DataError(
            f"sequence length {ids.shape[1]} exceeds context_len {config.context_len}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError("token id out of range")
    return ids.astype(np.int64)


def _forward_cached(params: dict[str, np.ndarray], config: ModelConfig, ids: np.ndarray):
    """Forward pass keeping every intermediate needed by the backward pass."""
    batch, seq_len = ids.shape
    d = config.hidden_size
    n_h, n_kv = config.n_heads, config.n_kv_heads
    hd, group = config.head_dim, config.n_heads // config.n_kv_heads
    scale = 1.0 / np.sqrt(hd)
    cos, sin = _rope_tables(np.arange(seq_len), hd, config.rope_base)
    mask = _causal_mask(seq_len)
    kv_map = np.arange(n_h) // group

    h = params["embedding"][ids]
    cache: dict = {"cos": cos, "sin": sin, "kv_map": kv_map, "layers": []}
    for i in range(config.n_layers):
        lp = {k: params[f"layers.{i}.{k}"] for k in
              ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")}
        x1 = h
        a, r_a = _rmsnorm_fwd(x1, lp["attn_norm"], config.norm_eps)
        q = (a @ lp["wq"]).reshape(batch, seq_len, n_h, hd).transpose(0, 2, 1, 3)
        k = (a @ lp["wk"]).reshape(batch, seq_len, n_kv, hd).transpose(0, 2, 1, 3)
        v = (a @ lp["wv"]).reshape(batch, seq_len, n_kv, hd).transpose(0, 2, 1, 3)
        qr = _rope_apply(q, cos, sin)
        kr = _rope_apply(k, cos, sin)
        kx = kr[:, kv_map]
        vx = v[:, kv_map]
        scores = qr @ kx.transpose(0, 1, 3, 2) * scale + mask
        probs = _softmax(scores)
        heads = probs @ vx
        concat = heads.transpose(0, 2, 1, 3).reshape(batch, seq_len, d)
        attn_out = concat @ lp["wo"]
        h = x1 + attn_out
        x2 = h
        b, r_f = _rmsnorm_fwd(x2, lp["ffn_norm"], config.norm_eps)
        gate = b @ lp["w_gate"]
        up = b @ lp["w_up"]
        sig = 1.0 / (1.0 + np.exp(-gate))
        act = gate * sig * up
        h = x2 + act @ lp["w_down"]
        cache["layers"].append(
            dict(x1=x1, a=a, r_a=r_a, qr=qr, kr=kr, v=v, probs=probs, concat=concat,
                 x2=x2, b=b, r_f=r_f, gate=gate, up=up, sig=sig, act=act)
        )
    y, r_o = _rmsnorm_fwd(h, params["final_norm"], config.norm_eps)
    cache.update(h_final=h, y=y, r_o=r_o)
    logits = y @ params["output_head"]
    return logits, cache


def forward(
    params: dict[str, np.ndarray], config: ModelConfig, ids: np.ndarray
) -> np.ndarray:
    """Logits of shape ids.shape + (vocab_size,)."""
    arr = _check_ids(config, ids)
    logits, _ = _forward_cached(params, config, arr)
    return logits if np.asarray(ids).ndim == 2 else logits[0]


def lm_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean next-token cross entropy; targets align with logits positions."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits, targets = logits[None], targets[None]
    if logits.shape[:2] != targets.shape:
        raise DataError("targets must match logits positions")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1))
    batch_idx, pos_idx = np.indices(targets.shape)
    picked = shifted[batch_idx, pos_idx, targets]
    return float(np.mean(log_z - picked))


def backward(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    ids: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact analytic gradients for every parameter."""
    arr = _check_ids(config, ids)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape != arr.shape:
        raise DataError("targets must have the same shape as ids")
    batch, seq_len = arr.shape
    d = config.hidden_size
    n_h, n_kv = config.n_heads, config.n_kv_heads
    hd, group = config.head_dim, config.n_heads // config.n_kv_heads
    scale = 1.0 / np.sqrt(hd)

    logits, cache = _forward_cached(params, config, arr)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp_shifted = np.exp(shifted)
    z = np.sum(exp_shifted, axis=-1, keepdims=True)
    probs_out = exp_shifted / z
    batch_idx, pos_idx = np.indices(targets.shape)
    loss = float(np.mean(np.log(z[..., 0]) - shifted[batch_idx, pos_idx, targets]))

    grads = {name: np.zeros_like(p) for name, p in params.items()}
    count = batch * seq_len
    dlogits = probs_out.copy()
    dlogits[batch_idx, pos_idx, targets] -= 1.0
    dlogits /= count

    y = cache["y"]
    grads["output_head"] = y.reshape(-1, d).T @ dlogits.reshape(-1, config.vocab_size)
    dy = dlogits @ params["output_head"].T
    dh, dg = _rmsnorm_bwd(dy, cache["h_final"], params["final_norm"], cache["r_o"])
    grads["final_norm"] = dg

    cos, sin, kv_map = cache["cos"], cache["sin"], cache["kv_map"]
    for i in range(config.n_layers - 1, -1, -1):
        lc = cache["layers"][i]
        lp = {k: params[f"layers.{i}.{k}"] for k in
              ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")}

        # FFN sublayer: h = x2 + act @ w_down
        d_act = dh @ lp["w_down"].T
        grads[f"layers.{i}.w_down"] = lc["act"].reshape(-1, config.intermediate_size).T @ dh.reshape(-1, d)
        silu_val = lc["gate"] * lc["sig"]
        d_silu = d_act * lc["up"]
        d_up = d_act * silu_val
        d_gate = d_silu * lc["sig"] * (1.0 + lc["gate"] * (1.0 - lc["sig"]))
        b2 = lc["b"].reshape(-1, d)
        grads[f"layers.{i}.w_up"] = b2.T @ d_up.reshape(-1, config.intermediate_size)
        grads[f"layers.{i}.w_gate"] = b2.T @ d_gate.reshape(-1, config.intermediate_size)
        db = d_up @ lp["w_up"].T + d_gate @ lp["w_gate"].T
        dx2, dg = _rmsnorm_bwd(db, lc["x2"], lp["ffn_norm"], lc["r_f"])
        grads[f"layers.{i}.ffn_norm"] = dg
        dh = dh + dx2

        # Attention sublayer: x2 = x1 + concat @ wo
        d_concat = dh @ lp["wo"].T
        grads[f"layers.{i}.wo"] = lc["concat"].reshape(-1, d).T @ dh.reshape(-1, d)
        d_heads = d_concat.reshape(batch, seq_len, n_h, hd).transpose(0, 2, 1, 3)
        vx = lc["v"][:, kv_map]
        kx = lc["kr"][:, kv_map]
        d_probs = d_heads @ vx.transpose(0, 1, 3, 2)
        d_vx = lc["probs"].transpose(0, 1, 3, 2) @ d_heads
        p = lc["probs"]
        d_scores = p * (d_probs - np.sum(d_probs * p, axis=-1, keepdims=True))
        d_qr = d_scores @ kx * scale
        d_kx = d_scores.transpose(0, 1, 3, 2) @ lc["qr"] * scale
        d_kr = d_kx.reshape(batch, n_kv, group, seq_len, hd).sum(axis=2)
        d_v = d_vx.reshape(batch, n_kv, group, seq_len, hd).sum(axis=2)
        d_q = _rope_reverse(d_qr, cos, sin)
        d_k = _rope_reverse(d_kr, cos, sin)
        d_q2 = d_q.transpose(0, 2, 1, 3).reshape(-1, d)
        d_k2 = d_k.transpose(0, 2, 1, 3).reshape(-1, config.kv_dim)
        d_v2 = d_v.transpose(0, 2, 1, 3).reshape(-1, config.kv_dim)
        a2 = lc["a"].reshape(-1, d)
        grads[f"layers.{i}.wq"] = a2.T @ d_q2
        grads[f"layers.{i}.wk"] = a2.T @ d_k2
        grads[f"layers.{i}.wv"] = a2.T @ d_v2
        da = (d_q2 @ lp["wq"].T + d_k2 @ lp["wk"].T + d_v2 @ lp["wv"].T).reshape(batch, seq_len, d)
        dx1, dg = _rmsnorm_bwd(da, lc["x1"], lp["attn_norm"], lc["r_a"])
        grads[f"layers.{i}.attn_norm"] = dg
        dh = dh + dx1

    np.add.at(grads["embedding"], arr, dh)
    return loss, grads


def next_token_splits(sequence: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(inputs, targets) for next-token prediction on one packed sequence."""
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.ndim != 1 or seq.size < 2:
        raise DataError("need a 1-D sequence of at least 2 tokens")
    return seq[:-1], seq[1:]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path, config: ModelConfig, params: dict[str, np.ndarray]
) -> None:
    """Versioned container; arrays and file bytes are fully deterministic."""
    from .binio import save_arrays

    meta = {"format": _CKPT_MAGIC, "config": asdict(config)}
    save_arrays(path, dict(params), meta)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    from .binio import load_arrays

    params, meta = load_arrays(path)
    if meta.get("format") != _CKPT_MAGIC:
        raise DataError(f"{path}: expected checkpoint format {_CKPT_MAGIC!r}")
    config = ModelConfig(**meta["config"])
    return config, params


def load_model_config(path: str | Path) -> ModelConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return ModelConfig(**payload)
    except TypeError as exc:
        raise DataError(f"{path}: bad model config: {exc}") from exc
