"""Bottleneck adapters that compose over a frozen translation model.

An adapter is a small residual block inserted after a transformer
layer: normalize, project down to a bottleneck, ReLU, project back up,
add the input. Language adapters and domain adapters are the same
structure with different owners; they stack in a fixed order (language
first, then domain) so that a domain adapter always sees
language-adapted states.

Two stacking disciplines are supported. ``SERIAL`` gives every adapter
its own fresh layer norm and residual. ``MADX`` reuses the host layer's
own norm and the pre-norm residual state instead: with language and
domain blocks f_lg and f_dom, the layer output becomes
``host_ln(f_dom(f_lg(h) + r) + r)`` where ``h`` is the host layer's
normalized output and ``r`` the state just before that final norm.
Either way, a freshly initialized adapter is an exact identity because
its up-projection starts at zero.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, RoutingError
from .tensor import Parameter, Tensor, add, layer_norm, matmul, relu

__all__ = [
    "AdapterLayer",
    "StackMode",
    "StackConfig",
    "PlacementSpec",
    "AdapterBudgetItem",
    "adapter_forward",
    "stack_forward",
    "init_near_identity",
    "set_trainable",
    "count_adapter_budget",
]

KINDS = ("language", "domain")
_PREFIX = {"language": "la", "domain": "da"}


class StackMode(str, Enum):
    SERIAL = "serial"
    MADX = "madx"


@dataclass
class StackConfig:
    """How adapters stack at each insertion point."""

    mode: StackMode = StackMode.SERIAL
    dadrop_p: float = 0.0  # chance to skip the domain adapter per (layer, batch)

    def __post_init__(self):
        self.mode = StackMode(self.mode)
        if not 0.0 <= self.dadrop_p <= 1.0:
            raise ConfigError(f"dadrop_p must lie in [0, 1], got {self.dadrop_p}")


@dataclass(frozen=True)
class PlacementSpec:
    """Which layers of each side receive a domain adapter."""

    encoder_layers: tuple = ()
    decoder_layers: tuple = ()

    @staticmethod
    def everywhere(enc_layers: int, dec_layers: int) -> "PlacementSpec":
        return PlacementSpec(tuple(range(enc_layers)), tuple(range(dec_layers)))

    @staticmethod
    def encoder_only(enc_layers: int) -> "PlacementSpec":
        return PlacementSpec(tuple(range(enc_layers)), ())

    @staticmethod
    def decoder_only(dec_layers: int) -> "PlacementSpec":
        return PlacementSpec((), tuple(range(dec_layers)))

    @staticmethod
    def encoder_first_half(enc_layers: int) -> "PlacementSpec":
        # "first half" rounds up so a 1-layer encoder still gets one
        half = (enc_layers + 1) // 2
        return PlacementSpec(tuple(range(half)), ())

    @staticmethod
    def encoder_last_half(enc_layers: int) -> "PlacementSpec":
        half = (enc_layers + 1) // 2
        return PlacementSpec(tuple(range(enc_layers - half, enc_layers)), ())


class AdapterLayer:
    """One bottleneck block owned by a language or a domain."""

    def __init__(
        self,
        width: int,
        bottleneck: int,
        kind: str,
        owner: str,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if kind not in KINDS:
            raise ConfigError(f"adapter kind must be one of {KINDS}, got {kind!r}")
        if width < 1 or bottleneck < 1:
            raise ConfigError(f"bad adapter dims width={width} bottleneck={bottleneck}")
        self.width = width
        self.bottleneck = bottleneck
        self.kind = kind
        self.owner = owner
        group = f"{_PREFIX[kind]}:{owner}"
        self.group = group
        self.w_down = Parameter(np.zeros((width, bottleneck)), group, dtype=dtype)
        self.b_down = Parameter(np.zeros(bottleneck), group, dtype=dtype)
        self.w_up = Parameter(np.zeros((bottleneck, width)), group, dtype=dtype)
        self.b_up = Parameter(np.zeros(width), group, dtype=dtype)
        self.ln_gain = Parameter(np.ones(width), group, dtype=dtype)
        self.ln_bias = Parameter(np.zeros(width), group, dtype=dtype)
        init_near_identity(self, rng)

    def parameters(self):
        return {
            "w_down": self.w_down,
            "b_down": self.b_down,
            "w_up": self.w_up,
            "b_up": self.b_up,
            "ln_gain": self.ln_gain,
            "ln_bias": self.ln_bias,
        }

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def __repr__(self):
        return f"AdapterLayer({self.group}, {self.width}x{self.bottleneck})"


def init_near_identity(adapter: AdapterLayer, rng: np.random.Generator) -> None:
    """Reset so the adapter computes an exact identity.

    The up-projection and all biases start at zero, which kills the
    residual branch outright; the down-projection gets small noise so
    gradients are nonzero from the first step.
    """
    dt = adapter.w_down.data.dtype
    adapter.w_down.data = rng.normal(0.0, 1e-2, size=adapter.w_down.shape).astype(dt)
    adapter.b_down.data = np.zeros(adapter.bottleneck, dtype=dt)
    adapter.w_up.data = np.zeros((adapter.bottleneck, adapter.width), dtype=dt)
    adapter.b_up.data = np.zeros(adapter.width, dtype=dt)
    adapter.ln_gain.data = np.ones(adapter.width, dtype=dt)
    adapter.ln_bias.data = np.zeros(adapter.width, dtype=dt)


def _bottleneck_ffn(adapter: AdapterLayer, x: Tensor) -> Tensor:
    z = add(matmul(x, adapter.w_down), adapter.b_down)
    z = relu(z)
    return add(matmul(z, adapter.w_up), adapter.b_up)


def adapter_forward(adapter: AdapterLayer, h: Tensor, eps: float = 1e-5) -> Tensor:
    """Serial form: own layer norm, bottleneck FFN, residual add."""
    if h.shape[-1] != adapter.width:
        raise RoutingError(
            f"adapter {adapter.group} has width {adapter.width}, input is {h.shape}"
        )
    z = layer_norm(h, adapter.ln_gain, adapter.ln_bias, eps=eps)
    return add(_bottleneck_ffn(adapter, z), h)


def _check_stack_order(stack) -> None:
    seen_domain = False
    for ad in stack:
        if ad.kind == "domain":
            seen_domain = True
        elif seen_domain:
            raise RoutingError(
                "language adapter stacked above a domain adapter; "
                "stacks apply language first, then domain"
            )


def stack_forward(
    stack,
    h: Tensor,
    mode: StackMode = StackMode.SERIAL,
    *,
    residual: Tensor = None,
    host_ln=None,
    drop_domain: bool = False,
    eps: float = 1e-5,
):
    """Apply a stack of adapters to one layer's output.

    ``residual`` and ``host_ln`` (a (gain, bias) Parameter pair) carry
    the host layer's pre-norm state and final norm; only MADX uses them.
    ``drop_domain`` skips every domain adapter, which is how domain
    dropout regularizes training. Returns the adapted hidden state and
    the list of adapters that actually ran.
    """
    mode = StackMode(mode)
    _check_stack_order(stack)
    live = [ad for ad in stack if not (drop_domain and ad.kind == "domain")]
    if not live:
        return h, []
    if mode == StackMode.SERIAL:
        z = h
        for ad in live:
            z = adapter_forward(ad, z, eps=eps)
        return z, live
    if residual is None or host_ln is None:
        raise RoutingError("madx stacking needs the host layer residual and norm")
    counts = {k: sum(1 for ad in live if ad.kind == k) for k in KINDS}
    if counts["language"] > 1 or counts["domain"] > 1:
        raise RoutingError("madx stacking supports at most one adapter per kind")
    gain, bias = host_ln
    cur = h
    for ad in live:
        cur = add(_bottleneck_ffn(ad, cur), residual)
    return layer_norm(cur, gain, bias, eps=eps), live


def expand_groups(patterns, known_groups) -> set:
    """Resolve literal group ids and glob patterns against known groups.

    A literal that names no known group, or a pattern matching nothing,
    is an error: silently freezing the wrong thing is how training bugs hide.
    """
    known = set(known_groups)
    out = set()
    for pat in patterns:
        if any(ch in pat for ch in "*?["):
            hits = set(fnmatch.filter(known, pat))
            if not hits:
                raise ConfigError(f"group pattern {pat!r} matches nothing in {sorted(known)}")
            out |= hits
        else:
            if pat not in known:
                raise ConfigError(f"unknown parameter group {pat!r}; known: {sorted(known)}")
            out.add(pat)
    return out


def set_trainable(model, groups) -> None:
    """Freeze everything except the named groups (globs allowed)."""
    chosen = expand_groups(groups, model.groups()) if groups else set()
    for _, p in model.parameters():
        p.trainable = p.group_id in chosen


@dataclass(frozen=True)
class AdapterBudgetItem:
    """One family of adapters for closed-form parameter counting."""

    kind: str
    sets: int  # how many owners (languages or domains)
    layers: int  # insertion points each owner covers
    width: int  # model dimension
    bottleneck: int


def count_adapter_budget(items) -> int:
    """Exact parameter total for a list of AdapterBudgetItems.

    Per adapter: down W and bias, up W and bias, norm gain and bias,
    i.e. 2*width*bottleneck + bottleneck + 3*width.
    """
    total = 0
    for it in items:
        if it.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {it.kind!r}")
        if min(it.sets, it.layers, it.width, it.bottleneck) < 1:
            raise ConfigError(f"budget item has nonpositive field: {it}")
        per = 2 * it.width * it.bottleneck + it.bottleneck + 3 * it.width
        total += it.sets * it.layers * per
    return total
