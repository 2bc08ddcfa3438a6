"""The experiment matrix: every trainable system as a named preset.

A preset fixes the whole recipe: which checkpoint it builds on, which
adapters get installed and trained, where domain adapters sit, how the
training data is assembled (tags, back-translation, denoising copies,
general-domain mixing), and the optimizer settings. Running the same
preset twice with the same seed reproduces the same numbers.

The stages compose: "base" pretrains an English-centric trunk,
"paracrawl-la" adds language adapters on top of it, and the domain
presets stack domain adapters on that. Everything downstream of a
missing stage refuses to run rather than silently retraining it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .adapters import PlacementSpec, StackConfig
from .errors import ConfigError

__all__ = [
    "Preset",
    "PRESETS",
    "get_preset",
    "preset_ids",
    "IN_SET",
    "EVAL_DOMAIN",
]

IN_SET = ("cs", "de", "en", "fr")
EVAL_DOMAIN = "medical"
IN_DOMAINS = ("it", "koran", "medical", "ted")

# desk-scale model shape; the paper-shape-count-only scale never trains
DESK_MODEL = dict(d_model=64, n_heads=4, enc_layers=2, dec_layers=2, ffn_dim=256, max_len=64)
DESK_BOTTLENECK = 128  # twice the model width, same ratio as the full-size recipe


@dataclass(frozen=True)
class Preset:
    preset_id: str
    phase: str
    description: str
    requires: Optional[str] = None
    # adapter wiring
    install_las: bool = False
    train_domains: tuple = ()  # domains that get (and train) a domain adapter
    placement: str = "everywhere"  # encoder|decoder|everywhere|enc_first_half|enc_last_half
    stack_mode: str = "serial"
    dadrop_p: float = 0.0
    trainable: tuple = ("base",)
    # data recipe
    data: str = "en_centric_general"  # or "multiparallel_general", "en_centric_domain", "joint_domains", "tagged_domains"
    tag_mode: bool = False
    mix_general_p: float = 0.0  # chance a batch comes from the general corpus
    use_bt: bool = False  # synthetic-source pairs for languages outside the in-set
    use_mono: bool = False  # denoising copies for languages outside the in-set
    aug_lines: int = 300  # per-language cap on synthetic pairs
    # optimization
    updates: int = 1500
    lr_schedule: str = "fixed"
    lr_peak: float = 3e-3
    warmup: int = 400
    fixed_lr: float = 1e-3
    label_smoothing: float = 0.1
    dropout: float = 0.1
    max_tokens: int = 512
    temperature: float = 5.0
    eval_every: int = 250
    # evaluation
    eval_domains: tuple = (EVAL_DOMAIN,)

    def placement_spec(self, enc_layers: int, dec_layers: int) -> PlacementSpec:
        if self.placement == "everywhere":
            return PlacementSpec.everywhere(enc_layers, dec_layers)
        if self.placement == "encoder":
            return PlacementSpec.encoder_only(enc_layers)
        if self.placement == "decoder":
            return PlacementSpec.decoder_only(dec_layers)
        if self.placement == "enc_first_half":
            return PlacementSpec.encoder_first_half(enc_layers)
        if self.placement == "enc_last_half":
            return PlacementSpec.encoder_last_half(enc_layers)
        raise ConfigError(f"unknown placement {self.placement!r}")

    def stack_config(self) -> StackConfig:
        return StackConfig(mode=self.stack_mode, dadrop_p=self.dadrop_p)


def _da(preset_id: str, description: str, **kw) -> Preset:
    """A domain-adapter stage on top of the language-adapter stage."""
    base = Preset(
        preset_id=preset_id,
        phase="domain_adapters",
        description=description,
        requires="paracrawl-la",
        install_las=True,
        train_domains=(EVAL_DOMAIN,),
        trainable=("da:*",),
        data="en_centric_domain",
        updates=3000,
        fixed_lr=1e-3,
        eval_every=500,
    )
    return replace(base, **kw)


_ALL: list = [
    Preset(
        preset_id="base",
        phase="pretrain",
        description="English-centric general-domain trunk, no adapters",
        trainable=("base",),
        data="en_centric_general",
        updates=8000,
        lr_schedule="inv_sqrt",
        lr_peak=3e-3,
        warmup=400,
        eval_every=500,
    ),
    Preset(
        preset_id="paracrawl-la",
        phase="language_adapters",
        description="frozen trunk, one language adapter per language, all general-domain pairs",
        requires="base",
        install_las=True,
        trainable=("la:*",),
        data="multiparallel_general",
        updates=4000,
        fixed_lr=1e-3,
        eval_every=400,
    ),
    _da(
        "freeze-la+encdec-da",
        "frozen trunk and LAs, domain adapters in every layer both sides",
        placement="everywhere",
    ),
    _da(
        "freeze-la+enc-da",
        "domain adapters in encoder layers only",
        placement="encoder",
    ),
    _da(
        "freeze-la+dec-da",
        "domain adapters in decoder layers only",
        placement="decoder",
    ),
    _da(
        "freeze-la+encdec-da+dadrop",
        "both-sides domain adapters, stochastically skipped while training",
        placement="everywhere",
        dadrop_p=0.2,
    ),
    _da(
        "freeze-la+dec-da+dadrop",
        "decoder domain adapters with stochastic skipping",
        placement="decoder",
        dadrop_p=0.2,
    ),
    _da(
        "freeze-la+dec-da+bt",
        "decoder domain adapters, synthetic-source pairs for out-set languages",
        placement="decoder",
        use_bt=True,
    ),
    _da(
        "freeze-la+encdec-da+bt",
        "both-sides domain adapters with synthetic-source pairs",
        placement="everywhere",
        use_bt=True,
    ),
    _da(
        "freeze-la+dec-da+dadrop+bt",
        "decoder domain adapters, skipping plus synthetic pairs",
        placement="decoder",
        dadrop_p=0.2,
        use_bt=True,
    ),
    _da(
        "unfreeze-la+dec-da+dadrop+bt",
        "language adapters stay trainable during the domain stage",
        placement="decoder",
        dadrop_p=0.2,
        use_bt=True,
        trainable=("la:*", "da:*"),
    ),
    _da(
        "freeze-la+dec-da+mono",
        "decoder domain adapters plus denoising copies for out-set languages",
        placement="decoder",
        use_mono=True,
    ),
    _da(
        "madx-stack",
        "both-sides domain adapters sharing the host layer's norm and residual",
        placement="everywhere",
        stack_mode="madx",
    ),
    _da(
        "enc-first-half-da",
        "domain adapters in the first half of the encoder stack",
        placement="enc_first_half",
    ),
    _da(
        "enc-last-half-da",
        "domain adapters in the last half of the encoder stack",
        placement="enc_last_half",
    ),
    _da(
        "multi-domain-joint",
        "one adapter set per domain, all domains trained jointly",
        placement="everywhere",
        train_domains=IN_DOMAINS,
        data="joint_domains",
        updates=2500,
        eval_domains=IN_DOMAINS,
    ),
    Preset(
        preset_id="finetune",
        phase="finetune",
        description="whole trunk fine-tuned on the in-domain data, no adapters",
        requires="base",
        trainable=("base",),
        data="en_centric_domain",
        train_domains=(),
        updates=1500,
        fixed_lr=3e-4,
        eval_every=250,
    ),
    Preset(
        preset_id="tags",
        phase="tags",
        description="whole trunk fine-tuned with a domain tag token, no adapters",
        requires="base",
        trainable=("base",),
        data="tagged_domains",
        tag_mode=True,
        updates=2500,
        fixed_lr=3e-4,
        eval_every=250,
    ),
    Preset(
        preset_id="tags+paracrawl",
        phase="tags",
        description="tagged fine-tune with general-domain batches mixed in",
        requires="base",
        trainable=("base",),
        data="tagged_domains",
        tag_mode=True,
        mix_general_p=0.5,
        updates=2500,
        fixed_lr=3e-4,
        eval_every=250,
    ),
]

PRESETS: dict = {p.preset_id: p for p in _ALL}


def get_preset(preset_id: str) -> Preset:
    if preset_id not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown preset {preset_id!r}; known presets: {known}")
    return PRESETS[preset_id]


def preset_ids() -> list:
    return sorted(PRESETS)
