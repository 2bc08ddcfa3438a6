"""A scaled-down encoder-decoder transformer with per-layer adapter hooks.

Post-norm layers, shared source/target embeddings tied to the output
projection, sinusoidal positions. After every layer's final norm the
model consults the active plan and applies whatever adapter stack the
plan names for that (side, layer) slot, so the same frozen trunk serves
any language/domain combination at run time.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .adapters import AdapterLayer, StackConfig, StackMode, expand_groups, stack_forward
from .errors import ConfigError, RoutingError
from .tensor import Parameter, Tensor

__all__ = [
    "ModelConfig",
    "TransformerModel",
    "count_parameters",
    "transformer_param_formula",
    "sinusoidal_positions",
]

NEG_INF = -1e9
SIDES = ("encoder", "decoder")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    max_len: int = 64
    dropout_p: float = 0.1
    ln_eps: float = 1e-5
    pad_id: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        for name in ("enc_layers", "dec_layers", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig(**json.loads(text))


def sinusoidal_positions(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(0, d_model, 2).astype(np.float64)
    angle = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(dtype)


def transformer_param_formula(
    vocab_size: int, d_model: int, enc_layers: int, dec_layers: int, ffn_dim: int
) -> int:
    """Closed-form trunk size for a tied-embedding post-norm model."""
    ln = 2 * d_model
    attn = 4 * (d_model * d_model + d_model)
    ffn = d_model * ffn_dim + ffn_dim + ffn_dim * d_model + d_model
    enc = enc_layers * (attn + ffn + 2 * ln)
    dec = dec_layers * (2 * attn + ffn + 3 * ln)
    return vocab_size * d_model + enc + dec


class _Sublayers:
    """Parameter bundle for one transformer layer."""

    def __init__(self, reg, prefix: str, cfg: ModelConfig, rng, dt, cross: bool):
        d, f = cfg.d_model, cfg.ffn_dim

        def lin(name, fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = reg(f"{prefix}.{name}.w", rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dt))
            b = reg(f"{prefix}.{name}.b", np.zeros(fan_out, dtype=dt))
            return w, b

        def ln(name):
            gain = reg(f"{prefix}.{name}.gain", np.ones(d, dtype=dt))
            bias = reg(f"{prefix}.{name}.bias", np.zeros(d, dtype=dt))
            return gain, bias

        self.self_attn = [lin(f"self.{n}", d, d) for n in ("wq", "wk", "wv", "wo")]
        self.ln1 = ln("ln1")
        self.cross_attn = None
        self.ln_cross = None
        if cross:
            self.cross_attn = [lin(f"cross.{n}", d, d) for n in ("wq", "wk", "wv", "wo")]
            self.ln_cross = ln("ln2")
        self.ffn1 = lin("ffn.w1", d, f)
        self.ffn2 = lin("ffn.w2", f, d)
        self.ln_final = ln("ln3" if cross else "ln2")


class TransformerModel:
    """Encoder-decoder trunk plus an adapter bank keyed by (side, layer)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self._params: dict[str, Parameter] = {}
        self._np_dtype = np.float32 if config.dtype == "float32" else np.float64
        rng = np.random.default_rng(seed)
        d = config.d_model

        def reg(name, data, group="base"):
            if name in self._params:
                raise ConfigError(f"duplicate parameter name {name}")
            p = Parameter(data, group_id=group, dtype=self._np_dtype)
            self._params[name] = p
            return p

        self._reg = reg
        self.embed = reg(
            "embed", rng.normal(0.0, d**-0.5, (config.vocab_size, d)).astype(self._np_dtype)
        )
        self.pe = Tensor(sinusoidal_positions(config.max_len, d, self._np_dtype))
        self.enc = [
            _Sublayers(reg, f"enc.{i}", config, rng, self._np_dtype, cross=False)
            for i in range(config.enc_layers)
        ]
        self.dec = [
            _Sublayers(reg, f"dec.{i}", config, rng, self._np_dtype, cross=True)
            for i in range(config.dec_layers)
        ]
        self.adapters: dict[tuple, dict[str, AdapterLayer]] = {}
        self.stack_config = StackConfig()
        self.rng = np.random.default_rng(0)
        self.invocations: Counter = Counter()

    # ---------------------------------------------------------------- params

    def parameters(self):
        return list(self._params.items())

    def groups(self) -> set:
        return {p.group_id for p in self._params.values()}

    def trainable_parameters(self):
        return [(n, p) for n, p in self._params.items() if p.trainable]

    def seed_runtime(self, seed: int) -> None:
        """Reset the dropout / domain-dropout stream."""
        self.rng = np.random.default_rng(seed)

    # -------------------------------------------------------------- adapters

    def install_adapter(self, side: str, layer: int, adapter: AdapterLayer) -> None:
        if side not in SIDES:
            raise ConfigError(f"side must be encoder or decoder, got {side!r}")
        n = self.config.enc_layers if side == "encoder" else self.config.dec_layers
        if not 0 <= layer < n:
            raise ConfigError(f"{side} has {n} layers, no layer {layer}")
        if adapter.width != self.config.d_model:
            raise ConfigError(
                f"adapter width {adapter.width} does not match d_model {self.config.d_model}"
            )
        site = self.adapters.setdefault((side, layer), {})
        if adapter.group in site:
            raise ConfigError(f"adapter {adapter.group} already installed at {side}:{layer}")
        site[adapter.group] = adapter
        for pname, p in adapter.parameters().items():
            key = f"adapter.{side}.{layer}.{adapter.group}.{pname}"
            if key in self._params:
                raise ConfigError(f"duplicate parameter name {key}")
            self._params[key] = p

    def installed_adapter_groups(self) -> set:
        return {g for site in self.adapters.values() for g in site}

    def reset_instrumentation(self) -> None:
        self.invocations = Counter()

    # -------------------------------------------------------------- forward

    def _require_plan(self, plan, side: str):
        stacks = plan.encoder if side == "encoder" else plan.decoder
        want = self.config.enc_layers if side == "encoder" else self.config.dec_layers
        if len(stacks) != want:
            raise RoutingError(
                f"plan covers {len(stacks)} {side} layers, model has {want}"
            )
        return stacks

    def _apply_stack(self, side, idx, h, residual, host_ln, plan, training):
        stack_ids = (plan.encoder if side == "encoder" else plan.decoder)[idx]
        if not stack_ids:
            return h
        site = self.adapters.get((side, idx), {})
        stack = []
        for aid in stack_ids:
            if aid not in site:
                raise RoutingError(
                    f"plan needs adapter {aid!r} at {side}:{idx} but it is not installed"
                )
            stack.append(site[aid])
        drop = False
        if (
            training
            and self.stack_config.dadrop_p > 0.0
            and any(ad.kind == "domain" for ad in stack)
        ):
            # one Bernoulli draw per (layer, batch)
            drop = bool(self.rng.random() < self.stack_config.dadrop_p)
        out, applied = stack_forward(
            stack,
            h,
            self.stack_config.mode,
            residual=residual,
            host_ln=host_ln,
            drop_domain=drop,
            eps=self.config.ln_eps,
        )
        for ad in applied:
            self.invocations[(side, idx, ad.group)] += 1
        return out

    def _attention(self, weights, q_in, kv_in, mask, training):
        cfg = self.config
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        (wq, bq), (wk, bk), (wv, bv), (wo, bo) = weights

        def heads(x, w, b):
            y = tn.add(tn.matmul(x, w), b)
            batch, seq = y.shape[0], y.shape[1]
            return tn.transpose(tn.reshape(y, (batch, seq, h, dh)), (0, 2, 1, 3))

        q = heads(q_in, wq, bq)
        k = heads(kv_in, wk, bk)
        v = heads(kv_in, wv, bv)
        scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), dh**-0.5)
        if mask is not None:
            scores = tn.add(scores, mask)
        probs = tn.softmax(scores)
        probs = tn.dropout(probs, cfg.dropout_p, self.rng, training)
        ctx = tn.matmul(probs, v)
        batch, seq = q_in.shape[0], q_in.shape[1]
        merged = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (batch, seq, cfg.d_model))
        return tn.add(tn.matmul(merged, wo), bo)

    def _ffn(self, layer, x):
        w1, b1 = layer.ffn1
        w2, b2 = layer.ffn2
        z = tn.relu(tn.add(tn.matmul(x, w1), b1))
        return tn.add(tn.matmul(z, w2), b2)

    def _embed_in(self, ids, training, extra_len_check=True):
        cfg = self.config
        if extra_len_check and ids.shape[-1] > cfg.max_len:
            raise ConfigError(
                f"sequence length {ids.shape[-1]} exceeds max_len {cfg.max_len}"
            )
        x = tn.scale(tn.embedding(self.embed, ids), math.sqrt(cfg.d_model))
        pe_slice = Tensor(self.pe.data[: ids.shape[-1]])
        x = tn.add(x, pe_slice)
        return tn.dropout(x, cfg.dropout_p, self.rng, training)

    def _pad_mask(self, ids) -> np.ndarray:
        """Additive key mask [B, 1, 1, S] suppressing pad positions."""
        blocked = (ids == self.config.pad_id)[:, None, None, :]
        return np.where(blocked, NEG_INF, 0.0).astype(self._np_dtype)

    @staticmethod
    def _batched(ids):
        arr = np.asarray(ids)
        if arr.ndim == 1:
            return arr[None, :], True
        if arr.ndim == 2:
            return arr, False
        raise ConfigError(f"token array must be 1-D or 2-D, got shape {arr.shape}")

    def encode(self, src_ids, plan, mode: str = "eval") -> Tensor:
        """Run the encoder under a plan. Returns [B, S, D] (or [S, D] for 1-D input)."""
        training = _check_mode(mode) == "train"
        ids, squeeze = self._batched(src_ids)
        self._require_plan(plan, "encoder")
        mask = Tensor(self._pad_mask(ids))
        x = self._embed_in(ids, training)
        for i, layer in enumerate(self.enc):
            a = self._attention(layer.self_attn, x, x, mask, training)
            a = tn.layer_norm(
                tn.add(x, tn.dropout(a, self.config.dropout_p, self.rng, training)),
                *layer.ln1,
                eps=self.config.ln_eps,
            )
            r = tn.add(a, tn.dropout(self._ffn(layer, a), self.config.dropout_p, self.rng, training))
            hidden = tn.layer_norm(r, *layer.ln_final, eps=self.config.ln_eps)
            x = self._apply_stack("encoder", i, hidden, r, layer.ln_final, plan, training)
        if squeeze:
            return tn.reshape(x, (x.shape[1], x.shape[2]))
        return x

    def decode(self, tgt_in_ids, enc_out: Tensor, src_ids, plan, mode: str = "eval") -> Tensor:
        """Teacher-forced decoder pass. Returns vocab logits [B, T, V]."""
        training = _check_mode(mode) == "train"
        ids, squeeze = self._batched(tgt_in_ids)
        src, _ = self._batched(src_ids)
        self._require_plan(plan, "decoder")
        if enc_out.data.ndim == 2:
            enc_out = tn.reshape(enc_out, (1,) + enc_out.shape)
        t = ids.shape[-1]
        causal = np.triu(np.full((t, t), NEG_INF, dtype=self._np_dtype), k=1)[None, None]
        self_mask = Tensor(causal + self._pad_mask(ids))
        cross_mask = Tensor(self._pad_mask(src))
        x = self._embed_in(ids, training)
        for i, layer in enumerate(self.dec):
            a = self._attention(layer.self_attn, x, x, self_mask, training)
            a = tn.layer_norm(
                tn.add(x, tn.dropout(a, self.config.dropout_p, self.rng, training)),
                *layer.ln1,
                eps=self.config.ln_eps,
            )
            c = self._attention(layer.cross_attn, a, enc_out, cross_mask, training)
            c = tn.layer_norm(
                tn.add(a, tn.dropout(c, self.config.dropout_p, self.rng, training)),
                *layer.ln_cross,
                eps=self.config.ln_eps,
            )
            r = tn.add(c, tn.dropout(self._ffn(layer, c), self.config.dropout_p, self.rng, training))
            hidden = tn.layer_norm(r, *layer.ln_final, eps=self.config.ln_eps)
            x = self._apply_stack("decoder", i, hidden, r, layer.ln_final, plan, training)
        logits = tn.matmul(x, tn.transpose(self.embed, (1, 0)))
        if squeeze:
            return tn.reshape(logits, (logits.shape[1], logits.shape[2]))
        return logits

    # ------------------------------------------------------------ state i/o

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self._params.items()}

    def load_state_arrays(self, arrays: dict, strict: bool = True) -> None:
        missing = [n for n in self._params if n not in arrays]
        if strict and missing:
            raise ConfigError(f"state is missing parameters, e.g. {missing[:3]}")
        for name, arr in arrays.items():
            if name not in self._params:
                if strict:
                    raise ConfigError(f"state has unknown parameter {name}")
                continue
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: model {p.data.shape}, state {arr.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)


def _check_mode(mode: str) -> str:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    return mode


def count_parameters(model: TransformerModel, groups) -> int:
    """Total parameter count across the named groups (globs allowed)."""
    if not groups:
        raise ConfigError("count_parameters needs at least one group")
    chosen = expand_groups(groups, model.groups())
    return sum(p.data.size for _, p in model.parameters() if p.group_id in chosen)
