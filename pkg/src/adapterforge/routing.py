"""Deciding which adapters fire for a translation direction.

A Route is (source language, target language, domain). Given an
experiment description, ``plan_activation`` turns a route into an
ActivationPlan: per-layer adapter stacks for both sides, or a domain
tag token when the experiment uses tags instead of adapters. Batches
are always single-route, capped by a token budget, with routes drawn
by temperature-flattened size sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapters import PlacementSpec, StackConfig
from .errors import ConfigError, RoutingError

__all__ = [
    "Route",
    "ActivationPlan",
    "ExperimentSpec",
    "Batch",
    "plan_activation",
    "sample_direction",
    "BatchStream",
    "build_batches",
    "mix_corpora",
]


@dataclass(frozen=True, order=True)
class Route:
    src: str
    tgt: str
    domain: str

    def __str__(self):
        return f"{self.src}-{self.tgt}:{self.domain}"


@dataclass(frozen=True)
class ActivationPlan:
    """Resolved adapter stacks per layer, or a tag token instead."""

    encoder: tuple  # tuple per encoder layer of adapter group ids, in stack order
    decoder: tuple
    tag_token: Optional[int] = None


@dataclass
class ExperimentSpec:
    """Everything routing needs to know about one experiment."""

    languages: tuple
    in_set: tuple
    enc_layers: int
    dec_layers: int
    use_language_adapters: bool = False
    domain_adapters: tuple = ()  # domains owning an adapter set
    placement: PlacementSpec = field(default_factory=PlacementSpec)
    stack: StackConfig = field(default_factory=StackConfig)
    tag_mode: bool = False
    tag_token_ids: dict = field(default_factory=dict)
    shared_domain_adapter: bool = False  # one owner ("general") serves every domain

    def __post_init__(self):
        unknown = set(self.in_set) - set(self.languages)
        if unknown:
            raise ConfigError(f"in_set languages {sorted(unknown)} not in language list")
        if self.tag_mode and (self.use_language_adapters or self.domain_adapters):
            raise ConfigError("tag mode replaces adapters; configure one or the other")


def _domain_owner(route: Route, exp: ExperimentSpec) -> Optional[str]:
    if exp.shared_domain_adapter:
        return "general"
    if route.domain in exp.domain_adapters:
        return route.domain
    return None


def plan_activation(route: Route, exp: ExperimentSpec) -> ActivationPlan:
    """Resolve a route to per-layer stacks: language first, then domain.

    Source-language adapters run in the encoder, target-language in the
    decoder. Domain adapters follow the placement spec. In tag mode the
    plan carries the domain's tag token and no adapter references.
    """
    for lang in (route.src, route.tgt):
        if lang not in exp.languages:
            raise RoutingError(f"unknown language {lang!r} in route {route}")
    # src == tgt is legal: denoising rounds train on identity routes.
    if exp.tag_mode:
        if route.domain not in exp.tag_token_ids:
            raise RoutingError(f"no tag token registered for domain {route.domain!r}")
        empty_enc = tuple(() for _ in range(exp.enc_layers))
        empty_dec = tuple(() for _ in range(exp.dec_layers))
        return ActivationPlan(empty_enc, empty_dec, tag_token=exp.tag_token_ids[route.domain])

    owner = _domain_owner(route, exp)
    enc = []
    for i in range(exp.enc_layers):
        stack = []
        if exp.use_language_adapters:
            stack.append(f"la:{route.src}")
        if owner is not None and i in exp.placement.encoder_layers:
            stack.append(f"da:{owner}")
        enc.append(tuple(stack))
    dec = []
    for j in range(exp.dec_layers):
        stack = []
        if exp.use_language_adapters:
            stack.append(f"la:{route.tgt}")
        if owner is not None and j in exp.placement.decoder_layers:
            stack.append(f"da:{owner}")
        dec.append(tuple(stack))
    return ActivationPlan(tuple(enc), tuple(dec))


def sample_direction(sizes: dict, temperature: float, rng: np.random.Generator) -> Route:
    """Draw a route with probability proportional to size ** (1/temperature)."""
    if not sizes:
        raise ConfigError("no routes to sample from")
    if temperature <= 0:
        raise ConfigError(f"sampling temperature must be positive, got {temperature}")
    routes = sorted(sizes)
    weights = np.array([sizes[r] for r in routes], dtype=np.float64)
    if np.any(weights <= 0):
        raise ConfigError("every route needs a positive pair count")
    w = weights ** (1.0 / temperature)
    w /= w.sum()
    return routes[int(rng.choice(len(routes), p=w))]


@dataclass
class Batch:
    """One homogeneous training batch, already padded to rectangles."""

    route: Route
    src: np.ndarray  # [B, S]
    tgt_in: np.ndarray  # [B, T]
    tgt_out: np.ndarray  # [B, T]
    loss_mask: np.ndarray  # [B, T] float, zero on padding
    n_pairs: int
    n_tokens: int
    origin: str = "primary"  # or "extra" when drawn from a mixed-in corpus


class _RouteCursor:
    """Shuffled epochs over one route's pairs, without replacement."""

    def __init__(self, pairs, rng):
        if not pairs:
            raise ConfigError("route has no pairs")
        self.pairs = pairs
        self.rng = rng
        self.order = rng.permutation(len(pairs))
        self.pos = 0

    def peek_cost(self, specials: int) -> int:
        i = self.order[self.pos]
        src, tgt = self.pairs[i][0], self.pairs[i][1]
        return max(len(src) + specials, len(tgt) + 2)

    def take(self):
        i = self.order[self.pos]
        self.pos += 1
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.pairs))
            self.pos = 0
        return self.pairs[i]


def _pad_block(rows, pad_id: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


class BatchStream:
    """Temperature-sampled single-route batches under a token budget.

    ``data`` maps Route to a list of (src_ids, tgt_ids) content token
    pairs. The stream prepends the target-language token (and a domain
    tag in tag mode) to the source, wraps the target in bos/eos, and
    pads. An optional ``extra`` corpus is drawn instead of the primary
    one with probability ``p_extra`` per batch.
    """

    def __init__(
        self,
        data: dict,
        vocab,
        max_tokens: int,
        temperature: float,
        seed: int,
        tag_mode: bool = False,
        extra: Optional[dict] = None,
        p_extra: float = 0.0,
    ):
        if max_tokens < 4:
            raise ConfigError(f"max_tokens {max_tokens} cannot fit a single pair")
        if not 0.0 <= p_extra <= 1.0:
            raise ConfigError(f"p_extra must lie in [0, 1], got {p_extra}")
        if p_extra > 0.0 and not extra:
            raise ConfigError("p_extra set but no extra corpus supplied")
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.tag_mode = tag_mode
        self.p_extra = p_extra
        self.rng = np.random.default_rng(seed)
        self._cursors = {}
        self._sizes = {}
        self._extra_cursors = {}
        self._extra_sizes = {}
        for route, pairs in data.items():
            self._cursors[route] = _RouteCursor(pairs, self.rng)
            self._sizes[route] = len(pairs)
        if extra:
            for route, pairs in extra.items():
                self._extra_cursors[route] = _RouteCursor(pairs, self.rng)
                self._extra_sizes[route] = len(pairs)
        self.total_pairs = sum(self._sizes.values())
        self.pairs_drawn = 0

    @property
    def epochs(self) -> float:
        return self.pairs_drawn / max(self.total_pairs, 1)

    def _specials_for_src(self) -> int:
        # target-language token + eos, plus a domain tag in tag mode
        return 3 if self.tag_mode else 2

    def next_batch(self) -> Batch:
        origin = "primary"
        cursors, sizes = self._cursors, self._sizes
        if self.p_extra > 0.0 and self.rng.random() < self.p_extra:
            origin = "extra"
            cursors, sizes = self._extra_cursors, self._extra_sizes
        route = sample_direction(sizes, self.temperature, self.rng)
        cur = cursors[route]
        specials = self._specials_for_src()
        srcs, tins, touts = [], [], []
        budget = self.max_tokens
        spent = 0
        v = self.vocab
        lang_tok = v.lang_token_id(route.tgt)
        tag_tok = v.tag_token_id(route.domain) if self.tag_mode else None
        while True:
            cost = cur.peek_cost(specials)
            if srcs and spent + cost > budget:
                break
            src_ids, tgt_ids = cur.take()[:2]
            head = [lang_tok] if tag_tok is None else [lang_tok, tag_tok]
            srcs.append(head + list(src_ids) + [v.eos_id])
            tins.append([v.bos_id] + list(tgt_ids))
            touts.append(list(tgt_ids) + [v.eos_id])
            spent += cost
            if origin == "primary":
                self.pairs_drawn += 1
            if spent >= budget:
                break
        src = _pad_block(srcs, v.pad_id)
        tgt_in = _pad_block(tins, v.pad_id)
        tgt_out = _pad_block(touts, v.pad_id)
        mask = (tgt_out != v.pad_id).astype(np.float64)
        return Batch(
            route=route,
            src=src,
            tgt_in=tgt_in,
            tgt_out=tgt_out,
            loss_mask=mask,
            n_pairs=len(srcs),
            n_tokens=spent,
            origin=origin,
        )


def build_batches(
    data: dict,
    vocab,
    max_tokens: int,
    seed: int,
    temperature: float = 1.0,
    tag_mode: bool = False,
    extra: Optional[dict] = None,
    p_extra: float = 0.0,
):
    """Endless iterator over temperature-sampled homogeneous batches."""
    stream = BatchStream(
        data, vocab, max_tokens, temperature, seed, tag_mode, extra, p_extra
    )
    while True:
        yield stream.next_batch()


def mix_corpora(primary: dict, extra: dict, p_extra: float) -> tuple:
    """Bundle two route-keyed corpora for mixed sampling.

    Returns (primary, extra, p_extra) validated, ready to hand to
    BatchStream; each drawn batch comes from extra with probability
    p_extra and is flagged by Batch.origin.
    """
    if not 0.0 <= p_extra <= 1.0:
        raise ConfigError(f"p_extra must lie in [0, 1], got {p_extra}")
    if p_extra > 0.0 and not extra:
        raise ConfigError("cannot mix from an empty extra corpus")
    return primary, extra, p_extra
