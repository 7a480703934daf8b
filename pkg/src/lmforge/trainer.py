"""AdamW training loop with warmup-cosine schedule and gradient accumulation.

One optimizer step consumes micro_batch * grad_accum * ranks sequences
(ranks are simulated as extra serial accumulation); losses and gradients are
averaged over the accumulation window, clipped by global norm, and applied
with decoupled weight decay (norm gains excluded). Every log row carries the
learning rate, token bookkeeping, and the parameter L2 norm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import model as model_lib
from . import tokenizer as tokenizer_lib
from .corpus import Document
from .errors import DataError, TrainingDiverged
from .model import ModelConfig

LOG_HEADER = ("step", "tokens_seen", "lr", "train_loss", "val_loss", "param_l2")


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 6e-4
    lr_min: float = 6e-5
    warmup_steps: int = 2000
    total_steps: int = 600_000
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    micro_batch: int = 4
    grad_accum: int = 30
    ranks: int = 1
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    seed: int = 0
    log_interval: int = 10
    val_interval: int = 50
    ckpt_interval: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise DataError("need 0 < lr_min <= lr_max")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise DataError("need 0 <= warmup_steps < total_steps")
        for name in ("micro_batch", "grad_accum", "ranks", "log_interval"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")

    @property
    def sequences_per_step(self) -> int:
        return self.micro_batch * self.grad_accum * self.ranks


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class TrainLogRow:
    step: int
    tokens_seen: int
    lr: float
    train_loss: float
    val_loss: float | None
    param_l2: float


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine annealing to lr_min."""
    if not 0 <= step <= cfg.total_steps:
        raise DataError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise DataError("clip_norm must be > 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non_finite_gradient in {name}")
    norm = global_grad_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return grads


def init_optimizer_state(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        step=0,
    )


def _decayed(name: str) -> bool:
    return "norm" not in name


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected AdamW update with decoupled weight decay, in place."""
    if set(params) != set(grads):
        raise DataError("gradient keys do not match parameter keys")
    beta1, beta2 = cfg.betas
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
        if cfg.weight_decay and _decayed(name):
            update = update + cfg.weight_decay * p
        p -= lr * update
    return params, state


def param_l2_norm(params: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p))) for p in params.values()))


def validate(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    val_docs: Sequence[Document],
    tok_model: "tokenizer_lib.TokenizerModel",
    sequence_length: int,
) -> float:
    """Mean loss over packed validation sequences; no parameter updates."""
    if not val_docs:
        raise DataError("empty validation set")
    tokens: list[int] = []
    for doc in val_docs:
        tokens.extend(tokenizer_lib.encode(tok_model, doc.text))
        tokens.append(tokenizer_lib.EOS_ID)
    sequences = [
        tokens[i : i + sequence_length]
        for i in range(0, len(tokens) - sequence_length + 1, sequence_length)
    ]
    if not sequences:
        if len(tokens) < 2:
            raise DataError("validation set has fewer than 2 tokens")
        sequences = [tokens]
    losses = []
    for seq in sequences:
        inputs, targets = model_lib.next_token_splits(np.array(seq))
        logits = model_lib.forward(params, config, inputs)
        losses.append(model_lib.lm_loss(logits, targets))
    return float(np.mean(losses))


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    sequences: Sequence[Sequence[int]],
    val_docs: Sequence[Document] | None = None,
    tok_model: "tokenizer_lib.TokenizerModel | None" = None,
    initial_params: dict[str, np.ndarray] | None = None,
    log_path: str | Path | None = None,
    ckpt_dir: str | Path | None = None,
) -> tuple[dict[str, np.ndarray], list[TrainLogRow]]:
    """Run the optimization loop; returns final parameters and the log rows."""
    if not sequences:
        raise DataError("no training sequences")
    seq_len = len(sequences[0])
    if any(len(s) != seq_len for s in sequences):
        raise DataError("all packed sequences must share one length")
    data = np.asarray(sequences, dtype=np.int64)

    params = initial_params if initial_params is not None else init_params_for(
        model_config, train_config.seed
    )
    state = init_optimizer_state(params)
    rows: list[TrainLogRow] = []
    tokens_per_step = train_config.sequences_per_step * seq_len
    micro_per_step = train_config.grad_accum * train_config.ranks
    cursor = 0

    def next_batch() -> np.ndarray:
        nonlocal cursor
        idx = [(cursor + j) % len(data) for j in range(train_config.micro_batch)]
        cursor = (cursor + train_config.micro_batch) % len(data)
        return data[idx]

    def flush(diverged_at: int | None = None) -> None:
        if log_path is not None:
            write_log(rows, log_path)
        if diverged_at is not None:
            raise TrainingDiverged(f"non-finite loss at step {diverged_at}")

    try:
        for step in range(1, train_config.total_steps + 1):
            window_loss = 0.0
            window_grads: dict[str, np.ndarray] | None = None
            for _ in range(micro_per_step):
                batch = next_batch()
                loss, grads = model_lib.backward(
                    params, model_config, batch[:, :-1], batch[:, 1:]
                )
                window_loss += loss
                if window_grads is None:
                    window_grads = grads
                else:
                    for name in window_grads:
                        window_grads[name] += grads[name]
            window_loss /= micro_per_step
            for g in window_grads.values():
                g /= micro_per_step

            if not math.isfinite(window_loss):
                rows.append(TrainLogRow(step, step * tokens_per_step, lr_at(step, train_config),
                                        window_loss, None, param_l2_norm(params)))
                flush(diverged_at=step)

            clip_grads(window_grads, train_config.clip_norm)
            lr = lr_at(step, train_config)
            adamw_step(params, window_grads, state, lr, train_config)

            if step % train_config.log_interval == 0 or step == train_config.total_steps:
                val_loss = None
                if (
                    val_docs is not None
                    and tok_model is not None
                    and (step % train_config.val_interval == 0 or step == train_config.total_steps)
                ):
                    val_loss = validate(params, model_config, val_docs, tok_model, seq_len)
                rows.append(TrainLogRow(
                    step=step,
                    tokens_seen=step * tokens_per_step,
                    lr=lr,
                    train_loss=window_loss,
                    val_loss=val_loss,
                    param_l2=param_l2_norm(params),
                ))
            if (
                ckpt_dir is not None
                and train_config.ckpt_interval
                and step % train_config.ckpt_interval == 0
            ):
                Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                model_lib.save_checkpoint(
                    Path(ckpt_dir) / f"step{step:07d}.npz", model_config, params
                )
    finally:
        if ckpt_dir is not None:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
            model_lib.save_checkpoint(Path(ckpt_dir) / "final.npz", model_config, params)
    flush()
    return params, rows


def init_params_for(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    return model_lib.init_params(config, seed)


def write_log(rows: Iterable[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([
                row.step,
                row.tokens_seen,
                repr(row.lr),
                repr(row.train_loss),
                "" if row.val_loss is None else repr(row.val_loss),
                repr(row.param_l2),
            ])


def read_log(path: str | Path) -> list[TrainLogRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(LOG_HEADER):
            raise DataError(f"{path}:1: unexpected log header {header}")
        for number, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(LOG_HEADER):
                raise DataError(f"{path}:{number}: expected {len(LOG_HEADER)} fields")
            try:
                rows.append(TrainLogRow(
                    step=int(record[0]),
                    tokens_seen=int(record[1]),
                    lr=float(record[2]),
                    train_loss=float(record[3]),
                    val_loss=float(record[4]) if record[4] else None,
                    param_l2=float(record[5]),
                ))
            except ValueError as exc:
                raise DataError(f"{path}:{number}: {exc}") from exc
    return rows
