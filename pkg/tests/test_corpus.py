"""Synthetic corpus: language maps, domains, splits, disk format, hygiene."""

import json
import os

import numpy as np
import pytest

from adapterforge.corpus import (
    GENERAL_DOMAIN,
    LANG_CODES,
    CorpusSpec,
    build_vocab,
    domain_transform,
    generate_multiparallel,
    identify_language,
    load_corpus_tree,
    make_denoising_pairs,
    make_domains,
    make_languages,
    make_splits,
    prepend_domain_tag,
    stem_for_concept,
    strip_domain_tag,
    write_corpus_tree,
)
from adapterforge.errors import ConfigError


def small_spec(**kw):
    base = dict(
        lines={GENERAL_DOMAIN: 60, "medical": 40, "ted": 30, "it": 30, "koran": 30},
        valid_size=4,
        test_size=4,
    )
    base.update(kw)
    return CorpusSpec(**base)


# ------------------------------------------------------------ languages


def test_language_maps_are_bijective_on_stems():
    langs = make_languages()
    stems = [stem_for_concept(i) for i in range(60)]
    for lang in langs.values():
        mapped = lang.map_tokens(stems)
        assert len(set(mapped)) == len(stems)
        assert [lang.unmap_token(t) for t in mapped] == stems


def test_english_is_the_identity_relabeling():
    en = make_languages()["en"]
    stems = [stem_for_concept(i) for i in range(20)]
    assert en.map_tokens(stems) == stems


def test_surface_vocabularies_are_mostly_disjoint():
    langs = make_languages()
    stems = [stem_for_concept(i) for i in range(120)]
    surfaces = {c: set(l.map_tokens(stems)) for c, l in langs.items()}
    codes = sorted(surfaces)
    for i, a in enumerate(codes):
        for b in codes[i + 1:]:
            overlap = len(surfaces[a] & surfaces[b]) / len(stems)
            assert overlap <= 0.10, (a, b, overlap)


def test_markers_appear_on_schedule_and_strip_inverts():
    lang = make_languages()["fr"]
    sems = [stem_for_concept(i) for i in range(9)]
    out = lang.realize(sems)
    assert out[0] == "mfr"
    marker_positions = [i for i, t in enumerate(out) if t == "mfr"]
    assert marker_positions == [0, 5, 10]
    assert lang.strip(out) == sems


def test_digits_pass_through_every_language():
    for lang in make_languages().values():
        assert lang.map_token("7") == "7"


def test_domain_transforms_commute_with_relabeling():
    langs = make_languages()
    sems = [stem_for_concept(i) for i in range(8)]
    for name in ("none", "reverse", "rotate", "mirror_halves"):
        try:
            transformed = domain_transform(name, sems)
        except ConfigError:
            continue  # not every name needs to exist; the known ones suffice
        for lang in langs.values():
            a = lang.map_tokens(domain_transform(name, sems))
            b = domain_transform(name, lang.map_tokens(sems))
            assert a == b, (name, lang.code)
    with pytest.raises(ConfigError):
        domain_transform("scramble", sems)


# ------------------------------------------------------------ domains


def test_domains_emphasize_their_exclusive_concepts():
    spec = small_spec()
    domains = make_domains(spec)
    med = domains["medical"]
    general = domains[GENERAL_DOMAIN]
    excl = set(med.exclusive)
    med_mass = sum(w for c, w in zip(med.support, med.weights) if c in excl)
    gen_mass = sum(w for c, w in zip(general.support, general.weights) if c in excl)
    assert med_mass >= 0.5
    assert gen_mass <= 0.05
    # exclusive sets never overlap across specialized domains
    seen = set()
    for name, dom in domains.items():
        if name == GENERAL_DOMAIN:
            continue
        assert not (set(dom.exclusive) & seen)
        seen |= set(dom.exclusive)


def test_generation_is_deterministic():
    spec = small_spec()
    a = generate_multiparallel(spec, seed=5)
    b = generate_multiparallel(spec, seed=5)
    c = generate_multiparallel(spec, seed=6)
    for name in spec.all_domains():
        assert a.data[name].realized == b.data[name].realized
    assert any(
        a.data[n].realized != c.data[n].realized for n in spec.all_domains()
    )


def test_realizations_stay_aligned_across_languages():
    spec = small_spec()
    multi = generate_multiparallel(spec, seed=1)
    langs = make_languages(spec.languages)
    dd = multi.data["medical"]
    for i in range(len(dd.pivot_ids)):
        sems = {c: langs[c].strip(dd.realized[c][i]) for c in spec.languages}
        baseline = sems["en"]
        assert all(s == baseline for s in sems.values())


# ------------------------------------------------------------ splits


def test_splits_purge_and_align():
    spec = small_spec()
    multi = generate_multiparallel(spec, seed=2)
    splits = make_splits(multi, spec.valid_size, spec.test_size, seed=3)
    for domain in spec.all_domains():
        train = splits.route_split(domain, "de", "en", "train")
        valid = splits.route_split(domain, "de", "en", "valid")
        test = splits.route_split(domain, "de", "en", "test")
        assert len(valid) == spec.valid_size
        assert len(test) == spec.test_size
        assert not (train.pivot_ids() & (valid.pivot_ids() | test.pivot_ids()))
        assert not (valid.pivot_ids() & test.pivot_ids())
        # every route of a domain shares the same held-out pivots
        other = splits.route_split(domain, "fr", "pt", "test")
        assert other.pivot_ids() == test.pivot_ids()


def test_holdout_larger_than_domain_is_rejected():
    spec = small_spec()
    multi = generate_multiparallel(spec, seed=2)
    with pytest.raises(ConfigError):
        make_splits(multi, 20, 20, seed=0)


# ------------------------------------------------------------ disk format


def test_corpus_tree_round_trips(tmp_path):
    spec = small_spec()
    multi = generate_multiparallel(spec, seed=4)
    splits = make_splits(multi, spec.valid_size, spec.test_size, seed=5)
    root = str(tmp_path / "tree")
    write_corpus_tree(multi, splits, root)

    multi2, splits2 = load_corpus_tree(root)
    assert multi2.spec == spec
    for name in spec.all_domains():
        assert multi2.data[name].realized == multi.data[name].realized
        assert multi2.data[name].pivot_ids == multi.data[name].pivot_ids
    assert splits2.valid_ids == splits.valid_ids
    assert splits2.test_ids == splits.test_ids


def test_vocab_covers_every_generated_token():
    spec = small_spec()
    multi = generate_multiparallel(spec, seed=6)
    vocab = build_vocab(spec)
    for name in spec.all_domains():
        for lang, lines in multi.data[name].realized.items():
            for line in lines:
                ids = vocab.encode(line)
                assert vocab.unk_id not in ids


def test_vocab_round_trip_and_specials():
    spec = small_spec()
    vocab = build_vocab(spec)
    toks = ["mde", "babade", "7", "baba"]
    ids = vocab.encode(toks)
    assert vocab.decode(ids) == toks
    assert vocab.decode([vocab.pad_id, vocab.bos_id] + list(ids)) == toks
    kept = vocab.decode([vocab.lang_token_id("fr")] + list(ids), keep_specials=True)
    assert kept[0] == "<2fr>"
    assert vocab.encode(["nosuchtoken"])[0] == vocab.unk_id


# ------------------------------------------------------------ tags


def test_domain_tag_round_trip_and_double_tag_error():
    toks = ["mde", "bade"]
    tagged = prepend_domain_tag(toks, "medical")
    assert tagged == ["<medical>", "mde", "bade"]
    assert strip_domain_tag(tagged) == toks
    assert strip_domain_tag(toks) == toks
    with pytest.raises(ConfigError):
        prepend_domain_tag(tagged, "ted")


# ------------------------------------------------------------ denoising


def corpus_for(route_domain="medical", n=400, seed=7):
    spec = small_spec(lines={GENERAL_DOMAIN: 60, "medical": n, "ted": 30,
                             "it": 30, "koran": 30})
    multi = generate_multiparallel(spec, seed=seed)
    return multi.route_pairs(route_domain, "fr", "fr")


def test_denoising_swap_statistics():
    corpus = corpus_for()
    noisy = make_denoising_pairs(corpus, "swap", 0.3, seed=8)
    assert noisy.route.src == noisy.route.tgt == "fr"
    moved = total = 0
    for line, orig in zip(noisy.lines, corpus.lines):
        assert line.synthetic_src
        assert line.tgt == orig.tgt
        a, b = line.src.split(), orig.tgt.split()
        assert sorted(a) == sorted(b)  # swap permutes, never rewrites
        moved += sum(x != y for x, y in zip(a, b))
        total += len(a)
    # each fired swap displaces two tokens; rate 0.3 with same-token slack
    assert 0.25 < moved / total < 0.6


def test_denoising_mask_statistics():
    corpus = corpus_for()
    noisy = make_denoising_pairs(corpus, "mask", 0.3, seed=9)
    masked = total = 0
    for line in noisy.lines:
        toks = line.src.split()
        masked += sum(t == "<unk>" for t in toks)
        total += len(toks)
    assert 0.27 < masked / total < 0.33


def test_denoising_rejects_bad_config():
    corpus = corpus_for(n=40)
    with pytest.raises(ConfigError):
        make_denoising_pairs(corpus, "shuffle", 0.3, seed=0)
    with pytest.raises(ConfigError):
        make_denoising_pairs(corpus, "swap", 1.5, seed=0)


def test_denoising_is_seed_deterministic():
    corpus = corpus_for(n=40)
    a = make_denoising_pairs(corpus, "swap", 0.3, seed=10)
    b = make_denoising_pairs(corpus, "swap", 0.3, seed=10)
    assert [l.src for l in a.lines] == [l.src for l in b.lines]


# ------------------------------------------------------------ identification


def test_identify_language_hand_cases():
    assert identify_language("mfr babafr gakafr".split()) == "fr"
    assert identify_language("baba gaka".split()) == "en"
    assert identify_language(["mde", "babait"]) is None  # one vote each: tie
    assert identify_language([]) is None
    assert identify_language(["7", "3"]) is None
    # majority wins over a single stray token
    assert identify_language("mes babaes gakaes mde".split()) == "es"


def test_identify_language_on_generated_lines():
    spec = small_spec()
    multi = generate_multiparallel(spec, seed=11)
    for lang in ("de", "fr", "en", "pt"):
        lines = multi.data["medical"].realized[lang][:20]
        hits = sum(identify_language(l) == lang for l in lines)
        assert hits >= 19


# ------------------------------------------------------------ manifest JSON


def test_spec_json_round_trip_and_partial_manifest():
    spec = small_spec()
    again = CorpusSpec.from_json(spec.to_json())
    assert again == spec
    partial = CorpusSpec.from_json(json.dumps({"valid_size": 5}))
    assert partial.valid_size == 5
    assert partial.languages == LANG_CODES
    with pytest.raises(ConfigError):
        CorpusSpec.from_json(json.dumps({"lines_per_domain": {}}))


def test_spec_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        small_spec(min_len=0)
    with pytest.raises(ConfigError):
        small_spec(lines={GENERAL_DOMAIN: 10})  # missing specialized domains
    with pytest.raises(ConfigError):
        CorpusSpec(domains=("paracrawl",), lines={"paracrawl": 10})
