"""Decoding and scoring: beam search, corpus BLEU and chrF, target-language
hit rate, and the four-group aggregation used to compare systems.

Hypotheses and references are scored as detagged text: control tokens
(anything in angle brackets) never reach the metrics, marker tokens do.
The metric implementations deliberately use different mechanics than the
reference scorers in the test suite so agreement between them means
something.
"""

from __future__ import annotations

import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .corpus import identify_language
from .errors import ConfigError
from .routing import Route, plan_activation
from .tensor import Tensor

__all__ = [
    "BeamHypothesis",
    "beam_search",
    "greedy_decode",
    "translate_corpus",
    "bleu",
    "chrf",
    "off_target_rate",
    "RouteScore",
    "route_group",
    "aggregate",
    "EvalReport",
    "evaluate_grid",
    "heatmap_csv",
    "render_report",
    "render_comparison",
    "eval_workers",
]

GROUPS = ("in_in", "out_in", "in_out", "out_out")
METRICS = ("bleu", "chrf", "on_target_pct")

_BLOCK = -1e30  # additive penalty that keeps a token out of any beam


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class BeamHypothesis:
    tokens: tuple  # generated ids; ends with eos unless the length cap hit
    score: float  # length-normalized log-probability
    raw: float  # un-normalized log-probability
    finished: bool


def beam_search(
    model,
    src_ids,
    plan,
    beam_size: int = 5,
    max_len: Optional[int] = None,
    length_alpha: float = 0.6,
    *,
    bos_id: int,
    eos_id: int,
    blocked=(),
) -> BeamHypothesis:
    """Best completed hypothesis under log-prob / length ** length_alpha.

    One source sentence per call; the beam items are decoded as one
    batch per step. Ties in the final normalized score go to the
    lexicographically smaller token sequence, which pins the result
    down deterministically.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be at least 1, got {beam_size}")
    src = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    if src.size == 0:
        raise ConfigError("cannot decode an empty source")
    if max_len is None:
        max_len = model.config.max_len - 1
    if max_len < 1:
        raise ConfigError(f"max_len must be at least 1, got {max_len}")
    enc = model.encode(src[None, :], plan, "eval")
    prefixes: list = [()]
    scores = np.zeros(1, dtype=np.float64)
    done: list = []
    for step in range(max_len):
        k = len(prefixes)
        tgt_in = np.full((k, step + 1), bos_id, dtype=np.int64)
        for i, pref in enumerate(prefixes):
            if pref:
                tgt_in[i, 1:] = pref
        enc_k = Tensor(np.repeat(enc.data, k, axis=0))
        src_k = np.repeat(src[None, :], k, axis=0)
        logits = model.decode(tgt_in, enc_k, src_k, plan, "eval").data[:, -1, :]
        logp = _log_softmax(logits)
        for b in blocked:
            logp[:, b] = _BLOCK
        flat = (scores[:, None] + logp).reshape(-1)
        order = np.argsort(-flat, kind="stable")
        vsize = logp.shape[1]
        length = step + 1
        new_prefixes: list = []
        new_scores: list = []
        n_eos = 0
        for idx in order:
            i, tok = divmod(int(idx), vsize)
            s = float(flat[idx])
            if tok == eos_id:
                if n_eos < beam_size:
                    seq = prefixes[i] + (eos_id,)
                    done.append(BeamHypothesis(seq, s / length**length_alpha, s, True))
                    n_eos += 1
            elif len(new_prefixes) < beam_size:
                new_prefixes.append(prefixes[i] + (tok,))
                new_scores.append(s)
            if n_eos >= beam_size and len(new_prefixes) >= beam_size:
                break
        prefixes = new_prefixes
        scores = np.asarray(new_scores, dtype=np.float64)
        if not prefixes:
            break
    for pref, s in zip(prefixes, scores):
        done.append(
            BeamHypothesis(tuple(pref), float(s) / len(pref) ** length_alpha, float(s), False)
        )
    return min(done, key=lambda h: (-h.score, h.tokens))


def greedy_decode(
    model,
    src_ids,
    plan,
    max_len: Optional[int] = None,
    *,
    bos_id: int,
    eos_id: int,
    blocked=(),
) -> BeamHypothesis:
    """Stepwise argmax decoding, kept separate from the beam machinery."""
    src = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    if src.size == 0:
        raise ConfigError("cannot decode an empty source")
    if max_len is None:
        max_len = model.config.max_len - 1
    enc = model.encode(src[None, :], plan, "eval")
    out: list = []
    raw = 0.0
    finished = False
    for step in range(max_len):
        tgt_in = np.array([[bos_id] + out], dtype=np.int64)
        logits = model.decode(tgt_in, enc, src[None, :], plan, "eval").data[0, -1, :]
        logp = _log_softmax(logits)
        for b in blocked:
            logp[b] = _BLOCK
        tok = int(np.argmax(logp))
        raw += float(logp[tok])
        out.append(tok)
        if tok == eos_id:
            finished = True
            break
    return BeamHypothesis(tuple(out), raw, raw, finished)


def translate_corpus(
    model,
    vocab,
    experiment,
    corpus,
    beam_size: int = 5,
    max_len: Optional[int] = None,
    length_alpha: float = 0.6,
) -> list:
    """Beam-decode every source line of a parallel corpus to text."""
    plan = plan_activation(corpus.route, experiment)
    head = [vocab.lang_token_id(corpus.route.tgt)]
    if plan.tag_token is not None:
        head.append(plan.tag_token)
    blocked = (vocab.pad_id, vocab.bos_id)
    hyps = []
    for line in corpus.lines:
        ids = np.concatenate(
            [head, vocab.encode(line.src.split()), [vocab.eos_id]]
        ).astype(np.int64)
        hyp = beam_search(
            model,
            ids,
            plan,
            beam_size,
            max_len,
            length_alpha,
            bos_id=vocab.bos_id,
            eos_id=vocab.eos_id,
            blocked=blocked,
        )
        hyps.append(" ".join(vocab.decode(hyp.tokens)))
    return hyps


# ---------------------------------------------------------------------------
# Metrics.  Corpus-level, single reference.


def _tokenize_13a(line: str) -> list:
    # Splits punctuation off words; toy corpora carry none, so this is a
    # whitespace split there.
    return re.sub(r"([\.,\?:;!\(\)\"])", r" \1 ", line).split()


def _ngram_counts(tokens: list, n: int) -> dict:
    out: dict = {}
    for i in range(len(tokens) - n + 1):
        g = " ".join(tokens[i : i + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu(hypotheses: list, references: list) -> float:
    """Corpus 4-gram BLEU in [0, 100]: brevity penalty, exponentially
    smoothed zero counts, punctuation-splitting tokenization."""
    if len(hypotheses) != len(references):
        raise ConfigError(
            f"{len(hypotheses)} hypotheses against {len(references)} references"
        )
    if not hypotheses:
        raise ConfigError("cannot score an empty corpus")
    correct = [0, 0, 0, 0]
    total = [0, 0, 0, 0]
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = _tokenize_13a(hyp)
        r = _tokenize_13a(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hc = _ngram_counts(h, n)
            rc = _ngram_counts(r, n)
            for g, c in hc.items():
                total[n - 1] += c
                m = rc.get(g, 0)
                if m:
                    correct[n - 1] += c if c < m else m
    smooth = 1.0
    log_prec = 0.0
    for n in range(4):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 100.0 / (smooth * total[n])
        else:
            p = 100.0 * correct[n] / total[n]
        log_prec += math.log(p) / 4.0
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    # float noise in the log-precision sum can land a hair above 100
    return min(100.0, bp * math.exp(log_prec))


def _char_ngrams(text: str, n: int) -> dict:
    out: dict = {}
    for i in range(len(text) - n + 1):
        g = text[i : i + n]
        out[g] = out.get(g, 0) + 1
    return out


def chrf(hypotheses: list, references: list, order: int = 6, beta: float = 2.0) -> float:
    """Character n-gram F-score in [0, 1], whitespace excluded."""
    if len(hypotheses) != len(references):
        raise ConfigError(
            f"{len(hypotheses)} hypotheses against {len(references)} references"
        )
    if not hypotheses:
        raise ConfigError("cannot score an empty corpus")
    hyp_tot = [0] * order
    ref_tot = [0] * order
    match = [0] * order
    for hyp, ref in zip(hypotheses, references):
        h = "".join(hyp.split())
        r = "".join(ref.split())
        for n in range(1, order + 1):
            hc = _char_ngrams(h, n)
            rc = _char_ngrams(r, n)
            hyp_tot[n - 1] += len(h) - n + 1 if len(h) >= n else 0
            ref_tot[n - 1] += len(r) - n + 1 if len(r) >= n else 0
            for g, c in hc.items():
                m = rc.get(g, 0)
                if m:
                    match[n - 1] += c if c < m else m
    precision = 0.0
    recall = 0.0
    effective = 0
    for n in range(order):
        if hyp_tot[n] > 0 and ref_tot[n] > 0:
            precision += match[n] / hyp_tot[n]
            recall += match[n] / ref_tot[n]
            effective += 1
    if effective == 0:
        return 0.0
    precision /= effective
    recall /= effective
    if precision + recall == 0.0:
        return 0.0
    return (1 + beta**2) * precision * recall / (beta**2 * precision + recall)


def default_identifier(text: str) -> Optional[str]:
    return identify_language(text.split())


def off_target_rate(
    hypotheses: list,
    references: list,
    tgt_lang: str,
    identifier: Optional[Callable] = None,
) -> Optional[float]:
    """Percentage of hypotheses in the right language.

    The denominator is the set of lines whose reference identifies as
    the target language; unidentifiable references drop out. Returns
    None when nothing identifiable remains.
    """
    if len(hypotheses) != len(references):
        raise ConfigError(
            f"{len(hypotheses)} hypotheses against {len(references)} references"
        )
    ident = identifier or default_identifier
    denom = 0
    hits = 0
    for hyp, ref in zip(hypotheses, references):
        if ident(ref) != tgt_lang:
            continue
        denom += 1
        if ident(hyp) == tgt_lang:
            hits += 1
    if denom == 0:
        return None
    return 100.0 * hits / denom


# ---------------------------------------------------------------------------
# Grid evaluation and aggregation


@dataclass
class RouteScore:
    src: str
    tgt: str
    domain: str
    bleu: float
    chrf: float
    on_target_pct: Optional[float]
    n_scored: int

    @property
    def route(self) -> Route:
        return Route(self.src, self.tgt, self.domain)


def route_group(src: str, tgt: str, in_set) -> str:
    a = "in" if src in in_set else "out"
    b = "in" if tgt in in_set else "out"
    return f"{a}_{b}"


def aggregate(rows: list, in_set, languages=None) -> dict:
    """Unweighted per-group means plus the overall mean.

    Groups split on whether source and target sit in the in-domain
    language set. An on-target mean covers only the rows where the rate
    is defined.
    """
    buckets: dict = {g: [] for g in GROUPS}
    buckets["all"] = []
    for row in rows:
        if languages is not None:
            for lang in (row.src, row.tgt):
                if lang not in languages:
                    raise ConfigError(f"route {row.src}-{row.tgt} is not in the language grid")
        g = route_group(row.src, row.tgt, in_set)
        buckets[g].append(row)
        buckets["all"].append(row)
    out: dict = {}
    for g, members in buckets.items():
        if not members:
            out[g] = {"bleu": None, "chrf": None, "on_target_pct": None, "n_routes": 0}
            continue
        tgt_rates = [r.on_target_pct for r in members if r.on_target_pct is not None]
        out[g] = {
            "bleu": sum(r.bleu for r in members) / len(members),
            "chrf": sum(r.chrf for r in members) / len(members),
            "on_target_pct": (sum(tgt_rates) / len(tgt_rates)) if tgt_rates else None,
            "n_routes": len(members),
        }
    return out


@dataclass
class EvalReport:
    model_id: str
    split: str
    languages: tuple
    in_set: tuple
    domains: tuple
    beam_size: int
    seed: int
    rows: list  # RouteScore
    group_means: dict
    baseline_id: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        d["rows"] = [RouteScore(**r) for r in d["rows"]]
        d["languages"] = tuple(d["languages"])
        d["in_set"] = tuple(d["in_set"])
        d["domains"] = tuple(d["domains"])
        return EvalReport(**d)

    def row(self, src: str, tgt: str, domain: Optional[str] = None) -> RouteScore:
        for r in self.rows:
            if r.src == src and r.tgt == tgt and (domain is None or r.domain == domain):
                return r
        raise KeyError(f"no row for {src}-{tgt}")


def eval_workers(threads: Optional[int] = None) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("ADAPTERFORGE_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ConfigError(f"ADAPTERFORGE_THREADS must be an integer, got {env!r}") from e
    return min(8, os.cpu_count() or 1)


def evaluate_grid(
    model,
    vocab,
    experiment,
    splits,
    *,
    model_id: str,
    languages,
    in_set,
    domains,
    split: str = "test",
    beam_size: int = 5,
    max_len: Optional[int] = None,
    seed: int = 0,
    threads: Optional[int] = None,
    identifier: Optional[Callable] = None,
) -> EvalReport:
    """Score every ordered language pair on each domain's held-out split.

    Decoding runs across a thread pool (the model is frozen and eval
    mode draws no randomness, so scheduling cannot change any score);
    rows come back sorted.
    """
    languages = tuple(languages)
    in_set = tuple(in_set)
    domains = tuple(domains)
    jobs = [
        (domain, src, tgt)
        for domain in domains
        for src in languages
        for tgt in languages
        if src != tgt
    ]

    def score(job) -> RouteScore:
        domain, src, tgt = job
        corpus = splits.route_split(domain, src, tgt, split)
        hyps = translate_corpus(model, vocab, experiment, corpus, beam_size, max_len)
        refs = [line.tgt for line in corpus.lines]
        return RouteScore(
            src=src,
            tgt=tgt,
            domain=domain,
            bleu=bleu(hyps, refs),
            chrf=chrf(hyps, refs),
            on_target_pct=off_target_rate(hyps, refs, tgt, identifier),
            n_scored=len(hyps),
        )

    with ThreadPoolExecutor(max_workers=eval_workers(threads)) as pool:
        rows = list(pool.map(score, jobs))
    rows.sort(key=lambda r: (r.domain, r.src, r.tgt))
    return EvalReport(
        model_id=model_id,
        split=split,
        languages=languages,
        in_set=in_set,
        domains=domains,
        beam_size=beam_size,
        seed=seed,
        rows=rows,
        group_means=aggregate(rows, in_set, languages),
    )


# ---------------------------------------------------------------------------
# Rendering: per-model report, pair heatmap CSV, cross-model comparison


def corner_order(languages, in_set) -> list:
    """In-domain languages first so they land in the grid's top-left corner."""
    head = sorted(l for l in languages if l in in_set)
    tail = sorted(l for l in languages if l not in in_set)
    return head + tail


def _fmt(x, digits: int = 4) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def heatmap_csv(report: EvalReport, metric: str = "bleu", baseline: Optional[EvalReport] = None) -> str:
    """One row per ordered language pair; values averaged over domains."""
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")

    def cell(rep, src, tgt):
        vals = [
            getattr(r, metric)
            for r in rep.rows
            if r.src == src and r.tgt == tgt and getattr(r, metric) is not None
        ]
        return sum(vals) / len(vals) if vals else None

    order = corner_order(report.languages, report.in_set)
    lines = ["src_lang,tgt_lang,metric,value,delta_vs_baseline"]
    for src in order:
        for tgt in order:
            if src == tgt:
                continue
            value = cell(report, src, tgt)
            delta = None
            if baseline is not None and value is not None:
                base = cell(baseline, src, tgt)
                if base is not None:
                    delta = value - base
            lines.append(f"{src},{tgt},{metric},{_fmt(value)},{_fmt(delta)}")
    return "\n".join(lines) + "\n"


def _bracket(mean: dict, threshold: float = 90.0) -> str:
    """BLEU plus the on-target rate in brackets when it falls below 90%."""
    if mean["bleu"] is None:
        return "-"
    text = f"{mean['bleu']:.2f}"
    rate = mean["on_target_pct"]
    if rate is not None and rate < threshold:
        text += f" ({rate:.0f}%)"
    return text


def render_report(report: EvalReport) -> str:
    out = [
        f"model: {report.model_id}",
        f"split: {report.split}  beam: {report.beam_size}  seed: {report.seed}",
        f"languages: {' '.join(report.languages)}",
        f"in-set: {' '.join(report.in_set)}",
        f"domains: {' '.join(report.domains)}",
    ]
    if report.baseline_id:
        out.append(f"baseline for deltas: {report.baseline_id}")
    out.append("")
    out.append("group        bleu    chrf    on-target%  routes")
    for g in ("all",) + GROUPS:
        m = report.group_means[g]
        out.append(
            f"{g:<11}{_fmt(m['bleu'], 2):>7}{_fmt(m['chrf'], 4):>9}"
            f"{_fmt(m['on_target_pct'], 1):>11}{m['n_routes']:>8}"
        )
    out.append("")
    out.append("domain  src tgt    bleu    chrf  on-target%   n")
    order = {l: i for i, l in enumerate(corner_order(report.languages, report.in_set))}
    rows = sorted(report.rows, key=lambda r: (r.domain, order[r.src], order[r.tgt]))
    for r in rows:
        out.append(
            f"{r.domain:<8}{r.src:<4}{r.tgt:<4}{r.bleu:>7.2f}{r.chrf:>8.4f}"
            f"{_fmt(r.on_target_pct, 1):>11} {r.n_scored:>3}"
        )
    return "\n".join(out) + "\n"


def render_comparison(reports: list, baseline_id: Optional[str] = None) -> str:
    """Side-by-side group means, one line per model, bracket rule applied."""
    if not reports:
        raise ConfigError("no reports to compare")
    grids = {(r.languages, r.in_set) for r in reports}
    if len(grids) > 1:
        raise ConfigError("reports cover different language grids, cannot compare")
    base = None
    if baseline_id is not None:
        matches = [r for r in reports if r.model_id == baseline_id]
        if not matches:
            raise ConfigError(f"baseline {baseline_id!r} is not among the reports")
        base = matches[0]
    width = max(len(r.model_id) for r in reports) + 2
    cols = ("all",) + GROUPS
    head = "model".ljust(width) + "".join(c.replace("_", ">").rjust(16) for c in cols)
    if base is not None:
        head += "  d(all)"
    out = [head]
    for rep in reports:
        line = rep.model_id.ljust(width)
        for c in cols:
            line += _bracket(rep.group_means[c]).rjust(16)
        if base is not None:
            d = rep.group_means["all"]["bleu"] - base.group_means["all"]["bleu"]
            line += f"  {d:+.2f}"
        out.append(line)
    return "\n".join(out) + "\n"
