"""Synthetic multiparallel corpora with controllable language and domain structure.

Every sentence starts life as a sequence of semantic concept stems.  A
toy language realizes it by appending its own two-letter suffix to each
stem (the pivot language ``en`` keeps stems bare) and inserting a
language marker token at a fixed period.  A toy domain shapes which
concepts appear (a shared core plus a few domain-exclusive ones) and
applies a deterministic position-level rewrite, so the correct
translation for any language pair in any domain is well defined even
for combinations never generated together.

Digits are shared auxiliary symbols outside the mapped concept
vocabulary, the way punctuation behaves in natural corpora.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .routing import Route

__all__ = [
    "LANG_CODES",
    "DEFAULT_DOMAINS",
    "GENERAL_DOMAIN",
    "ToyLanguage",
    "ToyDomain",
    "CorpusSpec",
    "Vocab",
    "PairLine",
    "ParallelCorpus",
    "MultiParallel",
    "SplitSet",
    "make_languages",
    "make_domains",
    "build_vocab",
    "generate_multiparallel",
    "make_splits",
    "write_corpus_tree",
    "load_corpus_tree",
    "prepend_domain_tag",
    "strip_domain_tag",
    "make_denoising_pairs",
    "identify_language",
    "back_translate",
    "domain_transform",
]

LANG_CODES = ("cs", "da", "de", "en", "es", "fr", "it", "nb", "nl", "pl", "pt", "sv")
DEFAULT_DOMAINS = ("it", "koran", "medical", "ted")
GENERAL_DOMAIN = "paracrawl"
DIGITS = tuple(str(d) for d in range(10))

_SYLLABLES = (
    "ba", "be", "bi", "bo", "bu", "ga", "ge", "gi", "go", "gu",
    "ka", "ke", "ki", "ko", "ku", "lo", "lu", "ra", "ro", "ru",
)

# Position-level rewrites; they never look at token identity, so they
# commute with any per-token relabeling.
_TRANSFORMS = {
    "none": lambda seq: list(seq),
    "reverse": lambda seq: list(reversed(seq)),
    "rotate": lambda seq: list(seq[1:]) + list(seq[:1]),
    "double_even": lambda seq: [t for i, tok in enumerate(seq) for t in ((tok, tok) if i % 2 == 0 else (tok,))],
    "echo_first": lambda seq: list(seq) + [seq[0]] if seq else [],
    "swap_pairs": lambda seq: [seq[i + 1] if i % 2 == 0 and i + 1 < len(seq) else (seq[i - 1] if i % 2 == 1 else seq[i]) for i in range(len(seq))],
}

# Exact inverses for the rewrites a language may use. double_even is
# lossy, so it stays domain-only.
_INVERSES = {
    "none": lambda seq: list(seq),
    "reverse": lambda seq: list(reversed(seq)),
    "rotate": lambda seq: list(seq[-1:]) + list(seq[:-1]),
    "echo_first": lambda seq: list(seq[:-1]),
    "swap_pairs": _TRANSFORMS["swap_pairs"],
}

_DOMAIN_TRANSFORMS = {
    "koran": "reverse",
    "medical": "double_even",
    "it": "echo_first",
    "ted": "swap_pairs",
    GENERAL_DOMAIN: "none",
}


def stem_for_concept(i: int) -> str:
    n = len(_SYLLABLES)
    if not 0 <= i < n * n:
        raise ConfigError(f"concept index {i} outside the stem space [0, {n * n})")
    return _SYLLABLES[i // n] + _SYLLABLES[i % n]


def domain_transform(name: str, seq) -> list:
    if name not in _TRANSFORMS:
        raise ConfigError(f"unknown transform {name!r}")
    return _TRANSFORMS[name](seq)


@dataclass(frozen=True)
class ToyLanguage:
    """A deterministic relabeling plus a fixed word-order habit."""

    code: str
    suffix: str
    marker: str
    marker_period: int = 4
    transform: str = "none"

    def __post_init__(self):
        if self.transform not in _INVERSES:
            raise ConfigError(f"language transform {self.transform!r} must be invertible")

    def map_token(self, sem: str) -> str:
        if _is_stem(sem):
            return sem + self.suffix
        return sem  # digits and other shared symbols pass through

    def unmap_token(self, tok: str) -> str:
        if self.suffix and tok.endswith(self.suffix) and _is_stem(tok[: -len(self.suffix)]):
            return tok[: -len(self.suffix)]
        return tok

    def map_tokens(self, sem_tokens) -> list:
        return [self.map_token(t) for t in sem_tokens]

    def realize(self, sem_tokens) -> list:
        """Reordered, mapped tokens with this language's marker every few positions."""
        out = []
        for i, sem in enumerate(_TRANSFORMS[self.transform](sem_tokens)):
            if i % self.marker_period == 0:
                out.append(self.marker)
            out.append(self.map_token(sem))
        return out

    def strip(self, tokens) -> list:
        """Inverse of realize: drop markers, unmap, undo the word order."""
        plain = [self.unmap_token(t) for t in tokens if t != self.marker]
        return _INVERSES[self.transform](plain)


def _is_stem(tok: str) -> bool:
    return len(tok) == 4 and tok.isalpha() and tok.islower()


# Word-order habits per language. cs/de/en/fr share a family of orders
# while the rest use reorderings that family never produces, so target-side
# skills learned on the first four do not transfer for free.
_LANG_ORDER = {
    "cs": "swap_pairs", "de": "echo_first", "en": "none", "fr": "none",
    "da": "reverse", "es": "rotate", "it": "reverse", "nb": "rotate",
    "nl": "reverse", "pl": "rotate", "pt": "reverse", "sv": "rotate",
}


def make_languages(codes=LANG_CODES) -> dict:
    if "en" not in codes:
        raise ConfigError("the pivot language en must be present")
    if len(set(codes)) != len(codes):
        raise ConfigError("duplicate language codes")
    langs = {}
    for c in codes:
        if c != "en" and len(c) != 2:
            raise ConfigError(f"language codes are two letters, got {c!r}")
        langs[c] = ToyLanguage(
            code=c,
            suffix="" if c == "en" else c,
            marker="m" + c,
            transform=_LANG_ORDER.get(c, "none"),
        )
    return langs


@dataclass
class ToyDomain:
    """Concept support, sampling weights and a structural rewrite."""

    name: str
    transform: str
    support: tuple  # concept indices this domain draws from
    weights: tuple  # matching sampling probabilities
    exclusive: tuple  # the concepts only this domain emphasizes

    def __post_init__(self):
        if len(self.support) != len(self.weights):
            raise ConfigError(f"domain {self.name}: support/weights length mismatch")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"domain {self.name}: weights must sum to 1")


@dataclass
class CorpusSpec:
    """Everything that determines the synthetic data distribution."""

    languages: tuple = LANG_CODES
    domains: tuple = DEFAULT_DOMAINS
    n_shared: int = 12
    n_exclusive: int = 4  # per specialized domain
    lines: dict = field(
        default_factory=lambda: {
            GENERAL_DOMAIN: 2000,
            "medical": 1000,
            "ted": 700,
            "it": 600,
            "koran": 400,
        }
    )
    valid_size: int = 16
    test_size: int = 16
    min_len: int = 3
    max_len: int = 9
    exclusive_mass: float = 0.55
    general_exclusive_mass: float = 0.03
    digit_rate: float = 0.04

    def __post_init__(self):
        if GENERAL_DOMAIN in self.domains:
            raise ConfigError(f"{GENERAL_DOMAIN} is implicit, keep it out of domains")
        for d in list(self.domains) + [GENERAL_DOMAIN]:
            if d not in self.lines:
                raise ConfigError(f"no line count configured for domain {d!r}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError("bad sentence length bounds")

    @property
    def n_concepts(self) -> int:
        return self.n_shared + self.n_exclusive * len(self.domains)

    def all_domains(self) -> tuple:
        return tuple(sorted(self.domains)) + (GENERAL_DOMAIN,)

    def to_json(self) -> str:
        d = {
            "languages": list(self.languages),
            "domains": list(self.domains),
            "n_shared": self.n_shared,
            "n_exclusive": self.n_exclusive,
            "lines": self.lines,
            "valid_size": self.valid_size,
            "test_size": self.test_size,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "exclusive_mass": self.exclusive_mass,
            "general_exclusive_mass": self.general_exclusive_mass,
            "digit_rate": self.digit_rate,
        }
        return json.dumps(d, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "CorpusSpec":
        """Build a spec from JSON; omitted keys keep their defaults."""
        d = json.loads(text)
        for key in ("languages", "domains"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in fields(CorpusSpec)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus spec keys: {sorted(unknown)}")
        return CorpusSpec(**d)


def make_domains(spec: CorpusSpec) -> dict:
    """Deterministic domain definitions from the corpus spec."""
    shared = list(range(spec.n_shared))
    base_w = np.array([1.0 / (j + 2.0) for j in range(spec.n_shared)])
    domains = {}
    ordered = tuple(sorted(spec.domains))
    for idx, name in enumerate(ordered):
        lo = spec.n_shared + idx * spec.n_exclusive
        exclusive = list(range(lo, lo + spec.n_exclusive))
        # stable per-domain shuffle of the shared weight profile
        dseed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")
        perm = np.random.default_rng(dseed).permutation(spec.n_shared)
        w_shared = base_w[perm] / base_w.sum() * (1.0 - spec.exclusive_mass)
        w_excl = np.full(len(exclusive), spec.exclusive_mass / max(len(exclusive), 1))
        transform = _DOMAIN_TRANSFORMS.get(name, ("reverse", "double_even", "echo_first", "swap_pairs")[idx % 4])
        domains[name] = ToyDomain(
            name=name,
            transform=transform,
            support=tuple(shared + exclusive),
            weights=tuple(np.concatenate([w_shared, w_excl]).tolist()),
            exclusive=tuple(exclusive),
        )
    # the general domain touches everything, exclusives only in the tail
    n_excl_total = spec.n_exclusive * len(ordered)
    w_shared = base_w / base_w.sum() * (1.0 - spec.general_exclusive_mass)
    w_tail = np.full(n_excl_total, spec.general_exclusive_mass / max(n_excl_total, 1))
    domains[GENERAL_DOMAIN] = ToyDomain(
        name=GENERAL_DOMAIN,
        transform="none",
        support=tuple(range(spec.n_concepts)),
        weights=tuple(np.concatenate([w_shared, w_tail]).tolist()),
        exclusive=(),
    )
    return domains


class Vocab:
    """Deterministic token table shared by every model in an experiment."""

    def __init__(self, tokens):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            dupes = [t for t, c in Counter(self.id_to_token).items() if c > 1]
            raise ConfigError(f"vocabulary has duplicate surface forms: {dupes[:5]}")
        self.pad_id = self.token_to_id["<pad>"]
        self.bos_id = self.token_to_id["<bos>"]
        self.eos_id = self.token_to_id["<eos>"]
        self.unk_id = self.token_to_id["<unk>"]

    def __len__(self):
        return len(self.id_to_token)

    def lang_token_id(self, lang: str) -> int:
        key = f"<2{lang}>"
        if key not in self.token_to_id:
            raise ConfigError(f"no target-language token for {lang!r}")
        return self.token_to_id[key]

    def tag_token_id(self, domain: str) -> int:
        key = f"<{domain}>"
        if key not in self.token_to_id:
            raise ConfigError(f"no domain tag token for {domain!r}")
        return self.token_to_id[key]

    def tag_token_ids(self, domains) -> dict:
        return {d: self.tag_token_id(d) for d in domains}

    def is_special_id(self, i: int) -> bool:
        return self.id_to_token[i].startswith("<")

    def encode(self, tokens) -> np.ndarray:
        return np.array(
            [self.token_to_id.get(t, self.unk_id) for t in tokens], dtype=np.int64
        )

    def decode(self, ids, keep_specials: bool = False) -> list:
        out = []
        for i in ids:
            tok = self.id_to_token[int(i)]
            if keep_specials or not tok.startswith("<"):
                out.append(tok)
        return out


def build_vocab(spec: CorpusSpec) -> Vocab:
    tokens = ["<pad>", "<bos>", "<eos>", "<unk>"]
    tokens += [f"<2{c}>" for c in sorted(spec.languages)]
    tokens += [f"<{d}>" for d in spec.all_domains()]
    tokens += ["m" + c for c in sorted(spec.languages)]
    tokens += list(DIGITS)
    stems = [stem_for_concept(i) for i in range(spec.n_concepts)]
    tokens += stems
    for c in sorted(spec.languages):
        if c == "en":
            continue
        tokens += [s + c for s in stems]
    return Vocab(tokens)


@dataclass
class PairLine:
    pivot_id: str
    src: str
    tgt: str
    synthetic_src: bool = False
    synthetic_tgt: bool = False


@dataclass
class ParallelCorpus:
    route: Route
    lines: list

    def __len__(self):
        return len(self.lines)

    def pivot_ids(self) -> set:
        return {l.pivot_id for l in self.lines}


@dataclass
class DomainData:
    name: str
    pivot_ids: list
    realized: dict  # lang -> list of token lists, aligned with pivot_ids


class MultiParallel:
    """Per-domain aligned realizations in every language."""

    def __init__(self, spec: CorpusSpec, domains: dict):
        self.spec = spec
        self.data = domains  # name -> DomainData

    def languages(self):
        return self.spec.languages

    def route_pairs(self, domain: str, src: str, tgt: str, indices=None) -> ParallelCorpus:
        dd = self.data[domain]
        for lang in (src, tgt):
            if lang not in dd.realized:
                raise ConfigError(f"no {lang!r} side generated for domain {domain!r}")
        idx = range(len(dd.pivot_ids)) if indices is None else indices
        lines = [
            PairLine(
                pivot_id=dd.pivot_ids[i],
                src=" ".join(dd.realized[src][i]),
                tgt=" ".join(dd.realized[tgt][i]),
            )
            for i in idx
        ]
        return ParallelCorpus(Route(src, tgt, domain), lines)


def _sample_semantic(rng, domain: ToyDomain, spec: CorpusSpec) -> list:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    support = np.array(domain.support)
    weights = np.array(domain.weights)
    out = []
    for _ in range(n):
        if rng.random() < spec.digit_rate:
            out.append(DIGITS[int(rng.integers(0, len(DIGITS)))])
        else:
            c = int(support[rng.choice(len(support), p=weights)])
            out.append(stem_for_concept(c))
    return domain_transform(domain.transform, out)


def generate_multiparallel(spec: CorpusSpec, seed: int) -> MultiParallel:
    """Sample pivots per domain and realize them in every language."""
    langs = make_languages(spec.languages)
    domains = make_domains(spec)
    children = np.random.SeedSequence(seed).spawn(len(spec.all_domains()))
    out = {}
    for child, name in zip(children, spec.all_domains()):
        rng = np.random.default_rng(child)
        n = spec.lines[name]
        pivot_ids = [f"{name}-{i:06d}" for i in range(n)]
        sems = [_sample_semantic(rng, domains[name], spec) for _ in range(n)]
        realized = {
            code: [lang.realize(s) for s in sems] for code, lang in sorted(langs.items())
        }
        out[name] = DomainData(name=name, pivot_ids=pivot_ids, realized=realized)
    return MultiParallel(spec, out)


@dataclass
class SplitSet:
    """Held-out pivot ids chosen once per domain, shared by every route."""

    multi: MultiParallel
    valid_ids: dict  # domain -> ordered list of pivot ids
    test_ids: dict

    def _indices(self, domain: str, split: str):
        dd = self.multi.data[domain]
        pos = {pid: i for i, pid in enumerate(dd.pivot_ids)}
        if split == "valid":
            return [pos[p] for p in self.valid_ids[domain]]
        if split == "test":
            return [pos[p] for p in self.test_ids[domain]]
        if split == "train":
            held = set(self.valid_ids[domain]) | set(self.test_ids[domain])
            return [i for i, pid in enumerate(dd.pivot_ids) if pid not in held]
        raise ConfigError(f"unknown split {split!r}")

    def route_split(self, domain: str, src: str, tgt: str, split: str) -> ParallelCorpus:
        return self.multi.route_pairs(domain, src, tgt, self._indices(domain, split))


def make_splits(multi: MultiParallel, valid_size: int, test_size: int, seed: int) -> SplitSet:
    """Hold out pivots per domain; every route shares the same held-out ids."""
    valid_ids, test_ids = {}, {}
    children = np.random.SeedSequence(seed).spawn(len(multi.data))
    for child, name in zip(children, sorted(multi.data)):
        dd = multi.data[name]
        total = len(dd.pivot_ids)
        if valid_size + test_size >= total:
            raise ConfigError(
                f"domain {name} has {total} lines, cannot hold out "
                f"{valid_size}+{test_size}"
            )
        rng = np.random.default_rng(child)
        held = rng.choice(total, size=valid_size + test_size, replace=False)
        valid_ids[name] = [dd.pivot_ids[i] for i in sorted(held[:valid_size])]
        test_ids[name] = [dd.pivot_ids[i] for i in sorted(held[valid_size:])]
    return SplitSet(multi=multi, valid_ids=valid_ids, test_ids=test_ids)


# ---------------------------------------------------------------------------
# Disk layout: <root>/<domain>/<src>-<tgt>.tsv plus per-domain splits.json


def write_corpus_tree(multi: MultiParallel, splits: SplitSet, root: str) -> None:
    os.makedirs(root, exist_ok=True)
    spec = multi.spec
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(spec.to_json())
    for domain in spec.all_domains():
        ddir = os.path.join(root, domain)
        os.makedirs(ddir, exist_ok=True)
        with open(os.path.join(ddir, "splits.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {"valid": splits.valid_ids[domain], "test": splits.test_ids[domain]},
                fh,
                indent=0,
                sort_keys=True,
            )
        for src in sorted(spec.languages):
            for tgt in sorted(spec.languages):
                if src == tgt:
                    continue
                corpus = multi.route_pairs(domain, src, tgt)
                path = os.path.join(ddir, f"{src}-{tgt}.tsv")
                with open(path, "w", encoding="utf-8") as fh:
                    for line in corpus.lines:
                        fh.write(f"{line.pivot_id}\t{line.src}\t{line.tgt}\n")


def load_corpus_tree(root: str):
    """Rebuild the in-memory corpus and splits from a generated tree."""
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        spec = CorpusSpec.from_json(fh.read())
    langs = sorted(spec.languages)
    data = {}
    valid_ids, test_ids = {}, {}
    for domain in spec.all_domains():
        ddir = os.path.join(root, domain)
        realized = {}
        pivot_ids = None
        for lang in langs:
            # every side can be read off an en-centric file
            other = next(c for c in langs if c != "en") if lang == "en" else lang
            path = os.path.join(ddir, f"en-{other}.tsv")
            col = 1 if lang == "en" else 2
            ids, texts = [], []
            with open(path, encoding="utf-8") as fh:
                for raw in fh:
                    parts = raw.rstrip("\n").split("\t")
                    if len(parts) != 3:
                        raise ConfigError(f"malformed corpus line in {path}: {raw!r}")
                    ids.append(parts[0])
                    texts.append(parts[col].split())
            if pivot_ids is None:
                pivot_ids = ids
            elif ids != pivot_ids:
                raise ConfigError(f"pivot order mismatch in {path}")
            realized[lang] = texts
        data[domain] = DomainData(name=domain, pivot_ids=pivot_ids, realized=realized)
        with open(os.path.join(ddir, "splits.json"), encoding="utf-8") as fh:
            held = json.load(fh)
        valid_ids[domain] = held["valid"]
        test_ids[domain] = held["test"]
    multi = MultiParallel(spec, data)
    return multi, SplitSet(multi=multi, valid_ids=valid_ids, test_ids=test_ids)


# ---------------------------------------------------------------------------
# Tagging, denoising, identification, back-translation


def _is_tag(tok: str) -> bool:
    return tok.startswith("<") and tok.endswith(">") and not tok.startswith("<2")


def prepend_domain_tag(tokens, domain: str) -> list:
    """Put the domain tag in front of a source sentence, exactly once."""
    tokens = list(tokens)
    if tokens and _is_tag(tokens[0]):
        raise ConfigError(f"sentence already carries tag {tokens[0]!r}")
    return [f"<{domain}>"] + tokens


def strip_domain_tag(tokens) -> list:
    tokens = list(tokens)
    if tokens and _is_tag(tokens[0]):
        return tokens[1:]
    return tokens


def make_denoising_pairs(corpus: ParallelCorpus, mode: str, rate: float, seed: int) -> ParallelCorpus:
    """Corrupt the target side into a synthetic source for mono training.

    ``swap`` exchanges adjacent tokens, ``mask`` overwrites tokens with
    <unk>; either fires independently per position at the given rate.
    The clean text stays on the target side, the corrupted copy is the
    flagged synthetic source, and the route maps the language to itself.
    """
    if mode not in ("swap", "mask"):
        raise ConfigError(f"denoising mode must be swap or mask, got {mode!r}")
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"denoising rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    lines = []
    for line in corpus.lines:
        toks = line.tgt.split()
        noisy = list(toks)
        if mode == "mask":
            for i in range(len(noisy)):
                if rng.random() < rate:
                    noisy[i] = "<unk>"
        else:
            i = 0
            while i < len(noisy) - 1:
                if rng.random() < rate:
                    noisy[i], noisy[i + 1] = noisy[i + 1], noisy[i]
                    i += 2
                else:
                    i += 1
        lines.append(
            PairLine(
                pivot_id=line.pivot_id,
                src=" ".join(noisy),
                tgt=line.tgt,
                synthetic_src=True,
            )
        )
    tgt_lang = corpus.route.tgt
    return ParallelCorpus(Route(tgt_lang, tgt_lang, corpus.route.domain), lines)


def identify_language(tokens, codes=LANG_CODES):
    """Best-guess language of a token sequence, or None.

    Markers and suffixed content words each cast one vote; the language
    wins only with a strict majority over the runner-up. Empty input,
    digit-only input, or mixed evidence without a strict winner all
    return None.
    """
    markers = {"m" + c: c for c in codes}
    suffixes = {c: c for c in codes if c != "en"}
    votes = Counter()
    for tok in tokens:
        if tok in markers:
            votes[markers[tok]] += 1
        elif _is_stem(tok) and "en" in codes:
            votes["en"] += 1
        elif len(tok) == 6 and tok[4:] in suffixes and _is_stem(tok[:4]):
            votes[tok[4:]] += 1
    if not votes:
        return None
    ranked = votes.most_common(2)
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


def back_translate(model, vocab, experiment, corpus: ParallelCorpus,
                   beam_size: int = 5, max_len=None):
    """Translate a corpus's target side into the pivot language.

    Returns (en_to_lang, lang_to_en): the same sentences as training
    pairs in both orientations, with the synthetic side flagged so that
    evaluation can never score against machine output.
    """
    from .evaluation import beam_search  # lazy: corpus stays import-light
    from .routing import plan_activation

    lang = corpus.route.tgt
    domain = corpus.route.domain
    if lang == "en":
        raise ConfigError("back-translation runs from a non-pivot language into en")
    route = Route(lang, "en", GENERAL_DOMAIN)
    plan = plan_activation(route, experiment)
    head = [vocab.lang_token_id("en")]
    if plan.tag_token is not None:
        head.append(plan.tag_token)
    fwd, rev = [], []
    for line in corpus.lines:
        toks = line.tgt.split()
        ids = vocab.encode(toks)
        src = np.concatenate([head, ids, [vocab.eos_id]]).astype(np.int64)
        hyp = beam_search(
            model,
            src,
            plan,
            beam_size,
            max_len,
            bos_id=vocab.bos_id,
            eos_id=vocab.eos_id,
            blocked=(vocab.pad_id, vocab.bos_id),
        )
        syn = " ".join(vocab.decode(hyp.tokens))
        fwd.append(
            PairLine(line.pivot_id, src=syn, tgt=line.tgt, synthetic_src=True)
        )
        rev.append(
            PairLine(line.pivot_id, src=line.tgt, tgt=syn, synthetic_tgt=True)
        )
    return (
        ParallelCorpus(Route("en", lang, domain), fwd),
        ParallelCorpus(Route(lang, "en", domain), rev),
    )
