"""Route resolution, temperature sampling, homogeneous batching."""

import numpy as np
import pytest

from adapterforge.adapters import PlacementSpec, StackConfig
from adapterforge.corpus import Vocab
from adapterforge.errors import ConfigError, RoutingError
from adapterforge.routing import (
    BatchStream,
    ExperimentSpec,
    Route,
    mix_corpora,
    plan_activation,
    sample_direction,
)

LANGS = ("de", "en", "fr")


def vocab3():
    toks = ["<pad>", "<bos>", "<eos>", "<unk>"]
    toks += [f"<2{c}>" for c in LANGS]
    toks += ["<medical>", "<paracrawl>"]
    toks += [f"w{i}" for i in range(20)]
    return Vocab(toks)


def exp(**kw):
    base = dict(languages=LANGS, in_set=("de", "en"), enc_layers=2, dec_layers=3)
    base.update(kw)
    return ExperimentSpec(**base)


# ------------------------------------------------------------ plan shapes


def test_bare_plan_has_empty_stacks():
    plan = plan_activation(Route("de", "en", "paracrawl"), exp())
    assert plan.encoder == ((), ())
    assert plan.decoder == ((), (), ())
    assert plan.tag_token is None


def test_language_adapters_split_by_side():
    plan = plan_activation(
        Route("de", "fr", "paracrawl"), exp(use_language_adapters=True)
    )
    assert plan.encoder == (("la:de",), ("la:de",))
    assert plan.decoder == (("la:fr",),) * 3


def test_domain_adapter_follows_placement():
    e = exp(
        use_language_adapters=True,
        domain_adapters=("medical",),
        placement=PlacementSpec.decoder_only(3),
    )
    plan = plan_activation(Route("de", "en", "medical"), e)
    assert plan.encoder == (("la:de",), ("la:de",))
    assert plan.decoder == (("la:en", "da:medical"),) * 3

    e2 = exp(domain_adapters=("medical",), placement=PlacementSpec.encoder_first_half(2))
    plan2 = plan_activation(Route("de", "en", "medical"), e2)
    assert plan2.encoder == (("da:medical",), ())
    assert plan2.decoder == ((), (), ())


def test_route_without_matching_domain_adapter_gets_none():
    e = exp(domain_adapters=("medical",), placement=PlacementSpec.everywhere(2, 3))
    plan = plan_activation(Route("de", "en", "ted"), e)
    assert plan.encoder == ((), ())


def test_shared_domain_adapter_serves_every_domain():
    e = exp(
        domain_adapters=("general",),
        shared_domain_adapter=True,
        placement=PlacementSpec.decoder_only(3),
    )
    plan = plan_activation(Route("de", "en", "ted"), e)
    assert plan.decoder == (("da:general",),) * 3


def test_tag_mode_yields_token_not_stacks():
    e = exp(tag_mode=True, tag_token_ids={"medical": 9})
    plan = plan_activation(Route("de", "en", "medical"), e)
    assert plan.tag_token == 9
    assert plan.encoder == ((), ())
    assert plan.decoder == ((), (), ())
    with pytest.raises(RoutingError):
        plan_activation(Route("de", "en", "ted"), e)


def test_identity_routes_are_legal():
    plan = plan_activation(Route("de", "de", "paracrawl"), exp(use_language_adapters=True))
    assert plan.encoder == (("la:de",), ("la:de",))
    assert plan.decoder == (("la:de",),) * 3


def test_unknown_language_rejected():
    with pytest.raises(RoutingError):
        plan_activation(Route("xx", "en", "paracrawl"), exp())


# ------------------------------------------------------------ sampling law


def test_temperature_flattens_route_frequencies():
    sizes = {
        Route("de", "en", "paracrawl"): 800,
        Route("fr", "en", "paracrawl"): 100,
        Route("en", "de", "paracrawl"): 100,
    }
    rng = np.random.default_rng(0)
    n = 20000
    counts = {r: 0 for r in sizes}
    for _ in range(n):
        counts[sample_direction(sizes, 5.0, rng)] += 1
    w = np.array([800.0, 100.0, 100.0]) ** (1 / 5.0)
    w /= w.sum()
    got = np.array([
        counts[Route("de", "en", "paracrawl")],
        counts[Route("fr", "en", "paracrawl")],
        counts[Route("en", "de", "paracrawl")],
    ]) / n
    assert np.max(np.abs(got - w)) < 0.02

    # temperature 1 reproduces raw proportions
    counts = {r: 0 for r in sizes}
    for _ in range(n):
        counts[sample_direction(sizes, 1.0, rng)] += 1
    assert abs(counts[Route("de", "en", "paracrawl")] / n - 0.8) < 0.02


def test_sampling_rejects_bad_input():
    with pytest.raises(ConfigError):
        sample_direction({}, 1.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_direction({Route("de", "en", "x"): 5}, 0.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_direction({Route("de", "en", "x"): 0}, 1.0, np.random.default_rng(0))


# ------------------------------------------------------------ batching


def toy_data(vocab, n_pairs=40, route=None, seed=0):
    rng = np.random.default_rng(seed)
    route = route or Route("de", "en", "medical")
    lo = vocab.token_to_id["w0"]
    pairs = []
    for _ in range(n_pairs):
        ls, lt = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        pairs.append((
            rng.integers(lo, lo + 20, size=ls).astype(np.int64),
            rng.integers(lo, lo + 20, size=lt).astype(np.int64),
        ))
    return {route: pairs}


def test_batches_are_homogeneous_and_budgeted():
    v = vocab3()
    data = {
        **toy_data(v, 30, Route("de", "en", "medical"), 1),
        **toy_data(v, 30, Route("fr", "en", "medical"), 2),
    }
    stream = BatchStream(data, v, max_tokens=64, temperature=1.0, seed=3)
    for _ in range(50):
        b = stream.next_batch()
        assert b.route in data
        assert b.src.shape[0] == b.tgt_in.shape[0] == b.tgt_out.shape[0] == b.n_pairs
        assert b.n_tokens <= 64 or b.n_pairs == 1  # lone oversize pair still ships
        # every source row leads with the target-language token
        assert all(r[0] == v.lang_token_id(b.route.tgt) for r in b.src)
        # eos terminates each unpadded source row
        for row in b.src:
            content = row[row != v.pad_id]
            assert content[-1] == v.eos_id
        # teacher forcing alignment: tgt_in shifted right of tgt_out
        for ti, to in zip(b.tgt_in, b.tgt_out):
            ti_c = ti[ti != v.pad_id]
            to_c = to[to != v.pad_id]
            assert ti_c[0] == v.bos_id
            assert to_c[-1] == v.eos_id
            assert np.array_equal(ti_c[1:], to_c[:-1])
        assert np.array_equal(b.loss_mask, (b.tgt_out != v.pad_id).astype(float))


def test_tag_mode_adds_domain_token_after_language_token():
    v = vocab3()
    stream = BatchStream(toy_data(v), v, 64, 1.0, seed=4, tag_mode=True)
    b = stream.next_batch()
    assert all(r[0] == v.lang_token_id("en") for r in b.src)
    assert all(r[1] == v.tag_token_id("medical") for r in b.src)


def test_epoch_clock_counts_primary_pairs():
    v = vocab3()
    data = toy_data(v, 16, seed=5)
    stream = BatchStream(data, v, max_tokens=48, temperature=1.0, seed=6)
    drawn = 0
    while stream.epochs < 2.0:
        drawn += stream.next_batch().n_pairs
    assert drawn == stream.pairs_drawn
    assert stream.epochs == drawn / 16


def test_epoch_shuffles_are_exhaustive():
    v = vocab3()
    route = Route("de", "en", "medical")
    data = toy_data(v, 12, route, seed=7)
    originals = sorted(tuple(s) for s, _ in data[route])
    stream = BatchStream(data, v, max_tokens=40, temperature=1.0, seed=8)
    seen = []
    while len(seen) < 12:
        b = stream.next_batch()
        for row in b.src:
            content = row[row != v.pad_id]
            seen.append(tuple(content[1:-1]))  # strip head token and eos
    # the first full epoch visits every pair exactly once, in shuffled order
    assert sorted(seen[:12]) == originals


def test_mixing_probability_marks_origin():
    v = vocab3()
    primary = toy_data(v, 30, Route("de", "en", "medical"), 9)
    extra = toy_data(v, 30, Route("fr", "en", "paracrawl"), 10)
    p, e, pe = mix_corpora(primary, extra, 0.5)
    stream = BatchStream(p, v, 48, 1.0, seed=11, extra=e, p_extra=pe)
    n = 4000
    hits = sum(stream.next_batch().origin == "extra" for _ in range(n))
    assert 0.48 <= hits / n <= 0.52
    # extra draws must not advance the primary epoch clock
    assert stream.pairs_drawn < stream.total_pairs * n


def test_oversize_single_pair_still_ships():
    v = vocab3()
    route = Route("de", "en", "medical")
    lo = v.token_to_id["w0"]
    big = np.full(30, lo, dtype=np.int64)
    stream = BatchStream({route: [(big, big)]}, v, max_tokens=8, temperature=1.0, seed=12)
    b = stream.next_batch()
    assert b.n_pairs == 1


def test_stream_rejects_bad_config():
    v = vocab3()
    with pytest.raises(ConfigError):
        BatchStream(toy_data(v), v, max_tokens=2, temperature=1.0, seed=0)
    with pytest.raises(ConfigError):
        BatchStream(toy_data(v), v, 64, 1.0, seed=0, p_extra=0.5)  # no extra corpus
    with pytest.raises(ConfigError):
        mix_corpora(toy_data(v), {}, 0.3)
    with pytest.raises(ConfigError):
        BatchStream({Route("de", "en", "x"): []}, v, 64, 1.0, seed=0)
