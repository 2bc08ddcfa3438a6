"""Optimization loop, schedules, checkpoints.

One train() call covers every phase in the pipeline: full pretraining,
language-adapter training, domain-adapter training, plain fine-tuning.
The phase is entirely described by TrainConfig (what is trainable, the
schedule, the data mix); the loop itself never special-cases a phase.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tn
from .adapters import AdapterLayer, StackConfig, set_trainable
from .errors import CheckpointError, ConfigError, NumericError
from .model import ModelConfig, TransformerModel
from .routing import BatchStream, plan_activation
from .tensor import Tape, backward, cross_entropy_smoothed

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "lr_at",
    "train",
    "TrainResult",
    "validation_nll",
    "encode_corpus",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


PHASES = ("pretrain", "language_adapters", "domain_adapters", "finetune", "tags", "custom")


@dataclass
class TrainConfig:
    trainable_groups: tuple
    max_updates: int
    phase: str = "custom"
    seed: int = 0
    lr_schedule: str = "inv_sqrt"  # or "fixed"
    lr_peak: float = 1e-3
    warmup: int = 400
    fixed_lr: float = 5e-5  # adapter phases default here unless overridden
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    dropout: Optional[float] = None  # overrides the model's rate when set
    max_tokens: int = 512
    temperature: float = 5.0
    max_epochs: Optional[float] = None
    eval_every: int = 500
    patience: Optional[int] = None  # evals without improvement before stopping
    tag_mode: bool = False
    p_extra: float = 0.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.lr_schedule not in ("inv_sqrt", "fixed"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.max_updates < 0:
            raise ConfigError("max_updates must be nonnegative")
        if self.lr_schedule == "inv_sqrt" and self.warmup < 1:
            raise ConfigError("inv_sqrt schedule needs warmup >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate at a 1-based step."""
    if step < 1:
        raise ConfigError("steps are 1-based")
    if config.lr_schedule == "fixed":
        return config.fixed_lr
    w = config.warmup
    return config.lr_peak * min(step / w, math.sqrt(w / step))


class AdamState:
    """First and second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.step = 0


def adam_step(params, state: AdamState, lr: float, config: TrainConfig) -> int:
    """Apply one Adam update to every trainable parameter holding a grad.

    Returns the number of parameters touched. Gradients are cleared,
    including on parameters that were skipped for having none.
    """
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.step += 1
    t = state.step
    touched = 0
    for name, p in params:
        if not p.trainable:
            p.clear_grad()
            continue
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.clear_grad()
        touched += 1
    return touched


def encode_corpus(vocab, corpus) -> list:
    """Pre-tokenize a ParallelCorpus to (src_ids, tgt_ids) pairs."""
    return [
        (vocab.encode(line.src.split()), vocab.encode(line.tgt.split()))
        for line in corpus.lines
    ]


def _deterministic_batches(route, pairs, vocab, max_tokens: int, tag_mode: bool):
    """Fixed-order batching for validation: no shuffle, no sampling."""
    lang_tok = vocab.lang_token_id(route.tgt)
    tag_tok = vocab.tag_token_id(route.domain) if tag_mode else None
    head = [lang_tok] if tag_tok is None else [lang_tok, tag_tok]
    i = 0
    while i < len(pairs):
        srcs, tins, touts, spent = [], [], [], 0
        while i < len(pairs):
            s, t = pairs[i]
            cost = max(len(s) + len(head) + 1, len(t) + 2)
            if srcs and spent + cost > max_tokens:
                break
            srcs.append(head + list(s) + [vocab.eos_id])
            tins.append([vocab.bos_id] + list(t))
            touts.append(list(t) + [vocab.eos_id])
            spent += cost
            i += 1
            if spent >= max_tokens:
                break
        yield srcs, tins, touts


def _pad(rows, pad_id):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for k, r in enumerate(rows):
        out[k, : len(r)] = r
    return out


def validation_nll(model, vocab, experiment, val_data: dict, max_tokens: int = 512,
                   tag_mode: bool = False) -> float:
    """Mean per-token negative log-likelihood, unsmoothed, eval mode."""
    total = 0.0
    count = 0.0
    for route in sorted(val_data):
        pairs = val_data[route]
        plan = plan_activation(route, experiment)
        for srcs, tins, touts in _deterministic_batches(route, pairs, vocab, max_tokens, tag_mode):
            src = _pad(srcs, vocab.pad_id)
            tgt_in = _pad(tins, vocab.pad_id)
            tgt_out = _pad(touts, vocab.pad_id)
            enc = model.encode(src, plan, "eval")
            logits = model.decode(tgt_in, enc, src, plan, "eval").data
            z = logits.astype(np.float64)
            z -= z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            b, t = tgt_out.shape
            picked = logp[np.arange(b)[:, None], np.arange(t)[None, :], tgt_out]
            mask = (tgt_out != vocab.pad_id).astype(np.float64)
            total += float(-(picked * mask).sum())
            count += float(mask.sum())
    if count == 0:
        raise ConfigError("validation set is empty")
    return total / count


@dataclass
class TrainResult:
    records: list
    best_val: Optional[float]
    steps: int
    stopped_by: str


def train(
    model: TransformerModel,
    vocab,
    experiment,
    train_data: dict,
    config: TrainConfig,
    val_data: Optional[dict] = None,
    extra_data: Optional[dict] = None,
    log_path: Optional[str] = None,
) -> TrainResult:
    """Run one training phase and leave the best-validation weights loaded.

    train_data and extra_data map Route to pre-encoded pairs; batches are
    single-route, routes drawn by temperature sampling, and with
    ``config.p_extra`` > 0 a batch comes from extra_data instead. Hitting
    a non-finite loss aborts with NumericError.
    """
    total_lr = (
        config.fixed_lr if config.lr_schedule == "fixed" else config.lr_peak
    )
    set_trainable(model, config.trainable_groups)
    n_trainable = sum(1 for _, p in model.parameters() if p.trainable)
    if n_trainable == 0 and total_lr > 0 and config.max_updates > 0:
        raise ConfigError("nothing is trainable but the learning rate is positive")
    if config.dropout is not None:
        model.config.dropout_p = config.dropout
    model.seed_runtime(config.seed)
    stream = BatchStream(
        train_data,
        vocab,
        config.max_tokens,
        config.temperature,
        seed=config.seed + 1,
        tag_mode=config.tag_mode,
        extra=extra_data,
        p_extra=config.p_extra,
    )
    state = AdamState()
    records: list = []
    best_val: Optional[float] = None
    best_snapshot = None
    evals_since_best = 0
    stopped_by = "max_updates"
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        records.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        step = 0
        while step < config.max_updates:
            step += 1
            batch = stream.next_batch()
            plan = plan_activation(batch.route, experiment)
            lr = lr_at(step, config)
            tape = Tape()
            with tape:
                enc = model.encode(batch.src, plan, "train")
                logits = model.decode(batch.tgt_in, enc, batch.src, plan, "train")
                b, t, v = logits.shape
                flat = tn.reshape(logits, (b * t, v))
                loss = cross_entropy_smoothed(
                    flat,
                    batch.tgt_out.reshape(-1),
                    config.label_smoothing,
                    mask=batch.loss_mask.reshape(-1),
                )
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss {loss_val} at step {step} on route {batch.route}"
                )
            backward(tape, loss)
            adam_step(model.parameters(), state, lr, config)
            rec = {"step": step, "loss": round(loss_val, 6), "lr": lr, "route": str(batch.route)}

            if val_data and config.eval_every and step % config.eval_every == 0:
                nll = validation_nll(
                    model, vocab, experiment, val_data, config.max_tokens, config.tag_mode
                )
                rec["val_nll"] = round(nll, 6)
                if best_val is None or nll < best_val:
                    best_val = nll
                    best_snapshot = {n: p.data.copy() for n, p in model.parameters()}
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if config.patience is not None and evals_since_best >= config.patience:
                        emit(rec)
                        stopped_by = "patience"
                        break
            emit(rec)
            if config.max_epochs is not None and stream.epochs >= config.max_epochs:
                stopped_by = "max_epochs"
                break
    finally:
        if log_fh:
            log_fh.close()

    if val_data and config.eval_every:
        nll = validation_nll(
            model, vocab, experiment, val_data, config.max_tokens, config.tag_mode
        )
        if best_val is None or nll < best_val:
            best_val = nll
            best_snapshot = None  # current weights already are the best
    if best_snapshot is not None:
        model.load_state_arrays(best_snapshot)
    return TrainResult(records=records, best_val=best_val, steps=step if config.max_updates else 0,
                       stopped_by=stopped_by)


# ---------------------------------------------------------------------------
# Checkpoints: one npz per model, config and adapter inventory in a header


def _adapter_inventory(model: TransformerModel) -> list:
    inv = []
    for (side, layer), site in sorted(model.adapters.items()):
        for group, ad in sorted(site.items()):
            inv.append(
                {
                    "side": side,
                    "layer": layer,
                    "kind": ad.kind,
                    "owner": ad.owner,
                    "bottleneck": ad.bottleneck,
                }
            )
    return inv


def save_checkpoint(path: str, model: TransformerModel, meta: Optional[dict] = None) -> None:
    """Atomic write: config, adapter inventory, flags and all arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "stack": {"mode": model.stack_config.mode.value, "dadrop_p": model.stack_config.dadrop_p},
        "adapters": _adapter_inventory(model),
        "trainable": {n: bool(p.trainable) for n, p in model.parameters()},
        "meta": meta or {},
    }
    arrays = {f"p::{name}": p.data for name, p in model.parameters()}
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple:
    """Read (header dict, arrays dict) without needing a model."""
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(path) as z:
        if "__header__" not in z:
            raise CheckpointError(f"{path} is not a checkpoint (no header)")
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {header.get('version')} unsupported"
            )
        arrays = {k[3:]: z[k] for k in z.files if k.startswith("p::")}
    return header, arrays


def restore_model(path: str) -> TransformerModel:
    """Rebuild the exact model a checkpoint came from."""
    header, arrays = load_checkpoint(path)
    config = ModelConfig(**header["config"])
    model = TransformerModel(config, seed=0)
    dummy = np.random.default_rng(0)
    for item in header["adapters"]:
        model.install_adapter(
            item["side"],
            item["layer"],
            AdapterLayer(
                config.d_model,
                item["bottleneck"],
                item["kind"],
                item["owner"],
                dummy,
                dtype=model._np_dtype,
            ),
        )
    model.stack_config = StackConfig(
        mode=header["stack"]["mode"], dadrop_p=header["stack"]["dadrop_p"]
    )
    model.load_state_arrays(arrays)
    for name, p in model.parameters():
        p.trainable = bool(header["trainable"].get(name, True))
    return model


def load_into(model: TransformerModel, path: str) -> dict:
    """Load arrays into an existing model; configs must match exactly."""
    header, arrays = load_checkpoint(path)
    if header["config"] != asdict(model.config):
        raise CheckpointError(
            "checkpoint config does not match the model: "
            f"{header['config']} vs {asdict(model.config)}"
        )
    model.load_state_arrays(arrays, strict=False)
    return header
