"""Executes presets end to end: stage a model, assemble data, train,
evaluate the full direction grid, and write the report artifacts.

Each preset writes into ``<out>/<preset-id>/``: checkpoint, training
log, report in JSON and text, and a BLEU heatmap CSV. Deltas are taken
against the language-adapter baseline's report when it exists in the
same output directory.
"""

from __future__ import annotations

import os
import zlib
from typing import Optional

import numpy as np

from .adapters import AdapterLayer
from .corpus import (
    GENERAL_DOMAIN,
    ParallelCorpus,
    back_translate,
    load_corpus_tree,
    build_vocab,
    make_denoising_pairs,
)
from .errors import ConfigError, MissingPrerequisiteError
from .evaluation import EvalReport, evaluate_grid, heatmap_csv, render_report
from .model import ModelConfig, TransformerModel
from .presets import DESK_BOTTLENECK, DESK_MODEL, IN_SET, Preset, get_preset
from .routing import ExperimentSpec, Route
from .training import TrainConfig, encode_corpus, restore_model, save_checkpoint, train

__all__ = [
    "load_workspace",
    "build_experiment",
    "stage_model",
    "assemble_data",
    "run_preset",
    "run_pipeline",
    "BASELINE_ID",
    "EVAL_MAX_LEN",
]

BASELINE_ID = "paracrawl-la"  # deltas in reports and heatmaps compare to this
EVAL_MAX_LEN = 20
MONO_NOISE = ("swap", 0.3)


def load_workspace(data_dir: str):
    """Corpus tree plus the vocabulary every model in it shares."""
    if not os.path.isdir(data_dir):
        raise MissingPrerequisiteError(f"no corpus directory at {data_dir}")
    multi, splits = load_corpus_tree(data_dir)
    vocab = build_vocab(multi.spec)
    return multi, splits, vocab


def build_experiment(preset: Preset, corpus_spec, vocab, model_cfg: ModelConfig) -> ExperimentSpec:
    languages = tuple(sorted(corpus_spec.languages))
    return ExperimentSpec(
        languages=languages,
        in_set=IN_SET,
        enc_layers=model_cfg.enc_layers,
        dec_layers=model_cfg.dec_layers,
        use_language_adapters=preset.install_las,
        domain_adapters=tuple(preset.train_domains),
        placement=preset.placement_spec(model_cfg.enc_layers, model_cfg.dec_layers),
        stack=preset.stack_config(),
        tag_mode=preset.tag_mode,
        tag_token_ids=vocab.tag_token_ids(corpus_spec.all_domains()) if preset.tag_mode else {},
    )


def _adapter_rng(seed: int, preset_id: str, owner: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(preset_id.encode()), zlib.crc32(owner.encode())])


def _install_language_adapters(model, languages, seed: int, preset_id: str) -> None:
    for lang in languages:
        rng = _adapter_rng(seed, preset_id, f"la:{lang}")
        for side, n in (("encoder", model.config.enc_layers), ("decoder", model.config.dec_layers)):
            for layer in range(n):
                model.install_adapter(
                    side,
                    layer,
                    AdapterLayer(
                        model.config.d_model, DESK_BOTTLENECK, "language", lang, rng,
                        dtype=model._np_dtype,
                    ),
                )


def _install_domain_adapters(model, preset: Preset, seed: int) -> None:
    spec = preset.placement_spec(model.config.enc_layers, model.config.dec_layers)
    for domain in preset.train_domains:
        rng = _adapter_rng(seed, preset.preset_id, f"da:{domain}")
        for layer in spec.encoder_layers:
            model.install_adapter(
                "encoder",
                layer,
                AdapterLayer(model.config.d_model, DESK_BOTTLENECK, "domain", domain, rng,
                             dtype=model._np_dtype),
            )
        for layer in spec.decoder_layers:
            model.install_adapter(
                "decoder",
                layer,
                AdapterLayer(model.config.d_model, DESK_BOTTLENECK, "domain", domain, rng,
                             dtype=model._np_dtype),
            )


def _checkpoint_path(out_dir: str, preset_id: str) -> str:
    return os.path.join(out_dir, preset_id, "checkpoint.npz")


def stage_model(preset: Preset, vocab, out_dir: str, seed: int) -> TransformerModel:
    """Fresh trunk for the pretrain stage, otherwise the prerequisite
    checkpoint with this preset's adapters added on top."""
    if preset.requires is None:
        if preset.install_las:
            raise ConfigError("language adapters always sit on a pretrained trunk")
        cfg = ModelConfig(vocab_size=len(vocab), dropout_p=preset.dropout, **DESK_MODEL)
        model = TransformerModel(cfg, seed=seed)
    else:
        path = _checkpoint_path(out_dir, preset.requires)
        if not os.path.exists(path):
            raise MissingPrerequisiteError(
                f"preset {preset.preset_id!r} needs the {preset.requires!r} checkpoint; "
                f"run that preset into {out_dir} first"
            )
        model = restore_model(path)
        if model.config.vocab_size != len(vocab):
            raise ConfigError(
                f"checkpoint vocabulary ({model.config.vocab_size}) does not match "
                f"the corpus ({len(vocab)})"
            )
        if preset.install_las:
            has_las = any(g.startswith("la:") for g in model.installed_adapter_groups())
            if not has_las and preset.phase == "language_adapters":
                _install_language_adapters(model, sorted_languages(vocab), seed, preset.preset_id)
            elif not has_las:
                raise MissingPrerequisiteError(
                    f"preset {preset.preset_id!r} expects language adapters in the "
                    f"{preset.requires!r} checkpoint"
                )
        _install_domain_adapters(model, preset, seed)
    model.stack_config = preset.stack_config()
    return model


def sorted_languages(vocab) -> list:
    return sorted(t[2:-1] for t in vocab.id_to_token if t.startswith("<2"))


def _en_centric_routes(languages, domain: str) -> list:
    routes = []
    for lang in sorted(languages):
        if lang == "en":
            continue
        routes.append(Route("en", lang, domain))
        routes.append(Route(lang, "en", domain))
    return routes


def _all_pairs_routes(languages, domain: str) -> list:
    langs = sorted(languages)
    return [Route(a, b, domain) for a in langs for b in langs if a != b]


def _cap(corpus: ParallelCorpus, n: int) -> ParallelCorpus:
    return ParallelCorpus(corpus.route, corpus.lines[:n])


def _bt_cache_path(out_dir: str, preset: Preset, domain: str) -> str:
    ck = _checkpoint_path(out_dir, preset.requires)
    with open(ck, "rb") as fh:
        crc = zlib.crc32(fh.read())
    name = f"bt_{domain}_{preset.aug_lines}_{crc:08x}.tsv"
    return os.path.join(out_dir, preset.requires, name)


def _load_bt_cache(path: str, route: Route) -> ParallelCorpus:
    from .corpus import PairLine

    lines = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            pivot, src, tgt = raw.rstrip("\n").split("\t")
            lines.append(PairLine(pivot, src, tgt, synthetic_src=True))
    return ParallelCorpus(route, lines)


def _make_bt_pairs(model, vocab, experiment, splits, preset: Preset, domain: str,
                   out_dir: str, out_langs) -> dict:
    """Synthetic-source pairs en -> each out-set language, cached beside
    the prerequisite checkpoint they were decoded with."""
    extra: dict = {}
    for lang in sorted(out_langs):
        route = Route("en", lang, domain)
        cache = _bt_cache_path(out_dir, preset, domain) + f".{lang}"
        if os.path.exists(cache):
            corpus = _load_bt_cache(cache, route)
        else:
            mono = _cap(splits.route_split(domain, "en", lang, "train"), preset.aug_lines)
            corpus, _ = back_translate(model, vocab, experiment, mono,
                                       beam_size=5, max_len=EVAL_MAX_LEN)
            tmp = cache + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                for line in corpus.lines:
                    fh.write(f"{line.pivot_id}\t{line.src}\t{line.tgt}\n")
            os.replace(tmp, cache)
        extra[route] = corpus
    return extra


def assemble_data(preset: Preset, splits, vocab, model, experiment, seed: int,
                  out_dir: str) -> tuple:
    """(train routes, validation routes, mixed-in routes), all encoded."""
    spec = splits.multi.spec
    languages = sorted(spec.languages)
    in_set = [l for l in languages if l in IN_SET]
    out_langs = [l for l in languages if l not in IN_SET]
    domain = preset.train_domains[0] if preset.train_domains else preset.eval_domains[0]

    raw_train: dict = {}
    raw_val: dict = {}
    raw_extra: dict = {}

    def add(table, routes, split):
        for r in routes:
            table[r] = splits.route_split(r.domain, r.src, r.tgt, split)

    if preset.data == "en_centric_general":
        add(raw_train, _en_centric_routes(languages, GENERAL_DOMAIN), "train")
        add(raw_val, _en_centric_routes(in_set, GENERAL_DOMAIN), "valid")
    elif preset.data == "multiparallel_general":
        # every ordered pair; each language adapter trains in both roles
        add(raw_train, _all_pairs_routes(languages, GENERAL_DOMAIN), "train")
        add(raw_val, _all_pairs_routes(in_set, GENERAL_DOMAIN), "valid")
    elif preset.data == "en_centric_domain":
        add(raw_train, _en_centric_routes(in_set, domain), "train")
        add(raw_val, _en_centric_routes(in_set, domain), "valid")
    elif preset.data == "joint_domains":
        for d in preset.train_domains:
            if d == "medical":
                add(raw_train, _en_centric_routes(in_set, d), "train")
            else:
                add(raw_train, _all_pairs_routes(in_set, d), "train")
            add(raw_val, _en_centric_routes(in_set, d), "valid")
    elif preset.data == "tagged_domains":
        for d in ("it", "koran", "medical", "ted"):
            add(raw_train, _en_centric_routes(in_set, d), "train")
            add(raw_val, _en_centric_routes(in_set, d), "valid")
    else:
        raise ConfigError(f"unknown data recipe {preset.data!r}")

    if preset.mix_general_p > 0.0:
        add(raw_extra, _en_centric_routes(languages, GENERAL_DOMAIN), "train")

    if preset.use_bt:
        raw_train.update(
            _make_bt_pairs(model, vocab, experiment, splits, preset, domain, out_dir, out_langs)
        )
    if preset.use_mono:
        mode, rate = MONO_NOISE
        for i, lang in enumerate(sorted(out_langs)):
            mono = _cap(splits.route_split(domain, "en", lang, "train"), preset.aug_lines)
            noisy = make_denoising_pairs(mono, mode, rate, seed=seed + 7000 + i)
            raw_train[noisy.route] = noisy

    def enc(table):
        return {r: encode_corpus(vocab, c) for r, c in table.items()}

    return enc(raw_train), enc(raw_val), (enc(raw_extra) if raw_extra else None)


def _train_config(preset: Preset, seed: int) -> TrainConfig:
    return TrainConfig(
        trainable_groups=tuple(preset.trainable),
        max_updates=preset.updates,
        phase=preset.phase,
        seed=seed,
        lr_schedule=preset.lr_schedule,
        lr_peak=preset.lr_peak,
        warmup=preset.warmup,
        fixed_lr=preset.fixed_lr,
        label_smoothing=preset.label_smoothing,
        dropout=preset.dropout,
        max_tokens=preset.max_tokens,
        temperature=preset.temperature,
        eval_every=preset.eval_every,
        tag_mode=preset.tag_mode,
        p_extra=preset.mix_general_p,
    )


def run_preset(
    preset_id: str,
    data_dir: str,
    out_dir: str,
    seed: int = 0,
    threads: Optional[int] = None,
    beam_size: int = 5,
    overrides: Optional[dict] = None,
) -> dict:
    """Train one preset and evaluate the full grid. Returns artifact paths.

    ``overrides`` replaces preset fields (update counts, learning rates)
    for scaled-down runs; the preset id and its artifacts stay the same.
    """
    preset = get_preset(preset_id)
    if overrides:
        from dataclasses import fields as preset_fields, replace

        legal = {f.name for f in preset_fields(preset)}
        bad = sorted(set(overrides) - legal)
        if bad:
            raise ConfigError(f"unknown preset fields in overrides: {bad}")
        preset = replace(preset, **overrides)
    multi, splits, vocab = load_workspace(data_dir)
    exp_dir = os.path.join(out_dir, preset_id)
    os.makedirs(exp_dir, exist_ok=True)

    model = stage_model(preset, vocab, out_dir, seed)
    experiment = build_experiment(preset, multi.spec, vocab, model.config)
    train_data, val_data, extra_data = assemble_data(
        preset, splits, vocab, model, experiment, seed, out_dir
    )
    config = _train_config(preset, seed)
    log_path = os.path.join(exp_dir, "train_log.ndjson")
    result = train(model, vocab, experiment, train_data, config, val_data, extra_data, log_path)

    ck_path = os.path.join(exp_dir, "checkpoint.npz")
    save_checkpoint(
        ck_path,
        model,
        meta={
            "preset": preset_id,
            "seed": seed,
            "updates": result.steps,
            "best_val_nll": result.best_val,
            "stopped_by": result.stopped_by,
        },
    )

    report = evaluate_grid(
        model,
        vocab,
        experiment,
        splits,
        model_id=preset_id,
        languages=sorted(multi.spec.languages),
        in_set=IN_SET,
        domains=preset.eval_domains,
        beam_size=beam_size,
        max_len=EVAL_MAX_LEN,
        seed=seed,
        threads=threads,
    )
    baseline = None
    base_path = os.path.join(out_dir, BASELINE_ID, "report.json")
    if preset_id != BASELINE_ID and os.path.exists(base_path):
        with open(base_path, encoding="utf-8") as fh:
            baseline = EvalReport.from_json(fh.read())
        report.baseline_id = BASELINE_ID

    paths = {
        "checkpoint": ck_path,
        "train_log": log_path,
        "report_json": os.path.join(exp_dir, "report.json"),
        "report_txt": os.path.join(exp_dir, "report.txt"),
        "heatmap": os.path.join(exp_dir, "heatmap_bleu.csv"),
    }
    with open(paths["report_json"], "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(paths["report_txt"], "w", encoding="utf-8") as fh:
        fh.write(render_report(report))
    with open(paths["heatmap"], "w", encoding="utf-8") as fh:
        fh.write(heatmap_csv(report, "bleu", baseline))
    return paths


def run_pipeline(preset_ids, data_dir: str, out_dir: str, seed: int = 0,
                 threads: Optional[int] = None) -> list:
    """Run presets in order; earlier stages feed later ones."""
    return [run_preset(p, data_dir, out_dir, seed, threads) for p in preset_ids]
