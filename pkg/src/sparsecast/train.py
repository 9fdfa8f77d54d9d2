"""Training: composite multi-horizon loss, AdamW, warmup-cosine schedule,
the step loop over packed batches, and binary checkpoints.

The loss averages a masked robust (Huber) term per forecast head — over all
valid anchor positions and over the head's horizon elements, so long heads
are not overweighted — then averages across heads and adds alpha times the
expert-balance penalty, itself averaged over mixture layers. An anchor is
valid for a head of horizon p when the p following tokens exist, stay inside
the anchor's packed sequence, and are not padding.

Checkpoints are a seekable little-endian binary format: magic "TMOE",
a version word, the JSON-encoded model configuration, the training step,
named float32 parameter tensors, and optionally the optimizer moments.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PackedBatch, SequenceStore, sample_batch
from .model import Forecaster, ModelConfig
from .moe import merge_stats
from .tensor import Graph, Tensor

CHECKPOINT_MAGIC = b"TMOE"
CHECKPOINT_VERSION = 1
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """A training step could not proceed (non-finite gradients, empty batch)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or incompatible with the model."""


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 8
    context: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 10000
    alpha: float = 0.02
    delta: float = 1.0
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_interval: int | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        for b in (self.beta1, self.beta2):
            if not 0 < b < 1:
                raise ValueError("betas must lie in (0, 1)")
        if self.steps < 1 or self.batch < 1 or self.context < 2:
            raise ValueError("steps and batch must be >= 1, context >= 2")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**doc)


# --- loss pieces -----------------------------------------------------------------


def huber(x: float, x_hat: float, delta: float = 1.0) -> float:
    """Scalar robust loss: quadratic inside |r| <= delta, linear outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = abs(x - x_hat)
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def aux_loss(f: np.ndarray, r: np.ndarray) -> float:
    """Expert-balance penalty N * sum_i f_i r_i; 1.0 at perfectly uniform routing."""
    f = np.asarray(f, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if f.shape != r.shape:
        raise ValueError(f"f and r must align, got {f.shape} vs {r.shape}")
    return float(len(f) * np.sum(f * r))


def lr_at_step(step: int, warmup: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    return max(0.0, peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def head_targets(tokens: np.ndarray, seq_ids: np.ndarray, pad_mask: np.ndarray,
                 horizon: int) -> tuple:
    """(targets [L, p], valid [L]) for one packed row and one head horizon."""
    length = len(tokens)
    run_end = np.empty(length, dtype=np.int64)
    end = length
    for t in range(length - 1, -1, -1):
        if t + 1 < length and seq_ids[t + 1] != seq_ids[t]:
            end = t + 1
        run_end[t] = end
    remaining = run_end - np.arange(length)
    valid = (~pad_mask) & (remaining > horizon)
    targets = np.zeros((length, horizon), dtype=tokens.dtype)
    for o in range(horizon):
        targets[: length - (o + 1), o] = tokens[o + 1:]
    targets[~valid] = 0.0
    return targets, valid


def masked_head_loss(pred: Tensor, targets: np.ndarray, valid: np.ndarray,
                     delta: float) -> tuple:
    """(sum of Huber over valid cells as a tensor, number of valid cells)."""
    horizon = pred.shape[1]
    cells = valid[:, None] & np.ones((1, horizon), dtype=bool)
    elementwise = T.huber(pred, T.constant(targets, pred.dtype), delta)
    masked = T.mul(elementwise, T.constant(cells.astype(pred.data.dtype), pred.dtype))
    return T.sum_all(masked), int(cells.sum())


def balance_loss_tensor(per_layer_routings: list) -> tuple:
    """Differentiable balance penalty averaged over mixture layers.

    Gradients flow through the mean routing scores r; the selection fractions
    f enter as constants (the selection itself is not differentiable).
    Returns (tensor, merged f averaged over layers).
    """
    terms = []
    f_layers = []
    for routings in per_layer_routings:
        scores = T.concat_rows([r.scores for r in routings])
        total, n = scores.shape
        f, _ = merge_stats(routings)
        f_layers.append(f)
        ones = T.constant(np.full((1, total), 1.0 / total), scores.dtype)
        r_mean = T.matmul(ones, scores)  # [1, N]
        weighted = T.mul(r_mean, T.constant(f[None, :], scores.dtype))
        terms.append(T.mul(T.sum_all(weighted), float(n)))
    acc = terms[0]
    for term in terms[1:]:
        acc = T.add(acc, term)
    mean_f = np.mean(np.stack(f_layers), axis=0)
    return T.mul(acc, 1.0 / len(terms)), mean_f


def total_loss(head_predictions: list, targets: list, valid_masks: list,
               routings: list, alpha: float, delta: float = 1.0) -> Tensor:
    """Composite loss for one packed row.

    (1/P) * sum_j of the masked mean Huber of head j, plus alpha times the
    balance penalty averaged over mixture layers. Heads whose mask is empty
    are dropped from the average; if every head is empty the batch is
    degenerate and training cannot use it.
    """
    parts = []
    for pred, tgt, mask in zip(head_predictions, targets, valid_masks):
        head_sum, count = masked_head_loss(pred, tgt, mask, delta)
        if count:
            parts.append(T.mul(head_sum, 1.0 / count))
    if not parts:
        raise TrainingError("degenerate batch: every position is masked for every head")
    acc = parts[0]
    for part in parts[1:]:
        acc = T.add(acc, part)
    loss = T.mul(acc, 1.0 / len(parts))
    if routings and alpha > 0:
        balance, _ = balance_loss_tensor([[r] for r in routings])
        loss = T.add(loss, T.mul(balance, alpha))
    return loss


def batch_loss(model: Forecaster, batch: PackedBatch, config: TrainConfig) -> tuple:
    """Forward every packed row and combine into one scalar loss.

    Head sums and counts aggregate across rows before averaging, so every
    valid position in the batch carries equal weight. Returns (loss tensor,
    info dict of float diagnostics).
    """
    horizons = model.config.head_horizons
    sums = [None] * len(horizons)
    counts = [0] * len(horizons)
    layer_routings: list[list] = [[] for _ in range(model.config.num_layers)]
    for b in range(batch.rows):
        result = model.forward(batch.tokens[b], seq_ids=batch.seq_ids[b])
        tokens = batch.tokens[b, :, 0]
        for j, horizon in enumerate(horizons):
            targets, valid = head_targets(tokens, batch.seq_ids[b], batch.pad_mask[b], horizon)
            if not valid.any():
                continue
            head_sum, count = masked_head_loss(result.head_outputs[j], targets, valid,
                                               config.delta)
            sums[j] = head_sum if sums[j] is None else T.add(sums[j], head_sum)
            counts[j] += count
        for layer, routing in enumerate(result.routing):
            layer_routings[layer].append(routing)

    parts = [T.mul(s, 1.0 / c) for s, c in zip(sums, counts) if s is not None and c]
    if not parts:
        raise TrainingError("degenerate batch: every position is masked for every head")
    acc = parts[0]
    for part in parts[1:]:
        acc = T.add(acc, part)
    loss_ar = T.mul(acc, 1.0 / len(parts))

    info = {"loss_ar": float(loss_ar.data)}
    loss = loss_ar
    if model.config.use_moe and layer_routings[0]:
        balance, mean_f = balance_loss_tensor(layer_routings)
        info["loss_aux"] = float(balance.data)
        info["f_min"] = float(mean_f.min())
        info["f_max"] = float(mean_f.max())
        if config.alpha > 0:
            loss = T.add(loss_ar, T.mul(balance, config.alpha))
    else:
        info["loss_aux"] = 0.0
        info["f_min"] = None
        info["f_max"] = None
    info["loss"] = float(loss.data)
    return loss, info


# --- optimizer -------------------------------------------------------------------


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Decay touches weight matrices only — norm gains and attention biases are
    exempt. A step with any non-finite gradient is rejected whole.
    """

    def __init__(self, model: Forecaster, config: TrainConfig):
        self.config = config
        self.slots = [(name, tensor, decays) for name, tensor, decays in model.named_parameters()]
        self.m = {name: np.zeros_like(t.data) for name, t, _ in self.slots}
        self.v = {name: np.zeros_like(t.data) for name, t, _ in self.slots}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.config
        for name, tensor, _ in self.slots:
            if tensor.grad is None:
                continue
            if not np.all(np.isfinite(tensor.grad)):
                raise TrainingError(f"non-finite gradient in {name}; step rejected")
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, tensor, decays in self.slots:
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            g = g.astype(tensor.data.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
            tensor.data -= lr * update
            if decays and cfg.weight_decay:
                tensor.data -= lr * cfg.weight_decay * tensor.data

    def zero_grad(self) -> None:
        for _, tensor, _ in self.slots:
            tensor.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.m):
            raise CheckpointError("optimizer state does not match model parameters")
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = state["m"][name].copy()
            self.v[name] = state["v"][name].copy()


def clip_global_norm(model: Forecaster, max_norm: float) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in model.parameters():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --- the loop --------------------------------------------------------------------


def train_loop(model: Forecaster, store: SequenceStore, config: TrainConfig,
               domain_weights: dict | None = None, optimizer: AdamW | None = None,
               start_step: int = 0, log_path=None, checkpoint_path=None) -> list:
    """Run config.steps optimization steps; returns one metrics record per step.

    Batches are drawn from a per-step generator seeded by (seed, step), so a
    resumed run replays exactly the stream an uninterrupted run would see.
    """
    optimizer = optimizer or AdamW(model, config)
    metrics: list[dict] = []
    log_handle = open(log_path, "a") if log_path else None
    try:
        for step in range(start_step, config.steps):
            rng = np.random.default_rng([config.seed, step])
            batch = sample_batch(store, rng, config.batch, config.context, domain_weights)
            optimizer.zero_grad()
            with Graph() as graph:
                loss, info = batch_loss(model, batch, config)
            graph.backward(loss)
            if config.grad_clip is not None:
                clip_global_norm(model, config.grad_clip)
            lr = lr_at_step(step + 1, config.warmup_steps, config.steps + 1, config.lr)
            optimizer.step(lr)
            record = {"step": step, "lr": lr, "loss": info["loss"],
                      "loss_ar": info["loss_ar"], "loss_aux": info["loss_aux"],
                      "f_min": info["f_min"], "f_max": info["f_max"]}
            metrics.append(record)
            if log_handle:
                log_handle.write(json.dumps(record) + "\n")
            if checkpoint_path and config.checkpoint_interval and \
                    (step + 1) % config.checkpoint_interval == 0:
                save_checkpoint(checkpoint_path, model, optimizer, step + 1)
    finally:
        if log_handle:
            log_handle.close()
    return metrics


# --- checkpoints ------------------------------------------------------------------


def _write_block(f, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_block(f) -> tuple:
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint (block header)")
    (name_len,) = struct.unpack("<I", raw)
    name = f.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise CheckpointError(f"truncated checkpoint (tensor {name})")
    return name, np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_checkpoint(path, model: Forecaster, optimizer: AdamW | None = None,
                    step: int = 0) -> None:
    if model.dtype != np.float32:
        raise CheckpointError("checkpoints store float32 models only")
    named = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        config_doc = json.dumps(model.config.to_dict()).encode("utf-8")
        f.write(struct.pack("<I", len(config_doc)))
        f.write(config_doc)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(named)))
        for name, tensor, _ in named:
            _write_block(f, name, tensor.data)
        f.write(struct.pack("<B", 1 if optimizer is not None else 0))
        if optimizer is not None:
            f.write(struct.pack("<Q", optimizer.t))
            f.write(struct.pack("<I", 2 * len(optimizer.m)))
            for name in sorted(optimizer.m):
                _write_block(f, f"m.{name}", optimizer.m[name])
                _write_block(f, f"v.{name}", optimizer.v[name])


def load_checkpoint(path) -> tuple:
    """Returns (model, optimizer_state or None, step); bit-exact round trip."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", f.read(4))
        config = ModelConfig.from_dict(json.loads(f.read(config_len).decode("utf-8")))
        (step,) = struct.unpack("<Q", f.read(8))
        (n_params,) = struct.unpack("<I", f.read(4))
        tensors = dict(_read_block(f) for _ in range(n_params))
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt_state = None
        if has_opt:
            (t,) = struct.unpack("<Q", f.read(8))
            (n_slots,) = struct.unpack("<I", f.read(4))
            slots = dict(_read_block(f) for _ in range(n_slots))
            opt_state = {
                "t": t,
                "m": {k[2:]: v for k, v in slots.items() if k.startswith("m.")},
                "v": {k[2:]: v for k, v in slots.items() if k.startswith("v.")},
            }
    model = Forecaster.init(config, seed=0, dtype=np.float32)
    expected = {name for name, _, _ in model.named_parameters()}
    if set(tensors) != expected:
        raise CheckpointError("checkpoint parameters do not match the configuration")
    for name, tensor, _ in model.named_parameters():
        if tensors[name].shape != tensor.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{tensors[name].shape} vs {tensor.data.shape}")
        tensor.data[...] = tensors[name]
    return model, opt_state, step
