"""Transformer trunk: shapes, masking, tying, budgets, gradients."""

import numpy as np
import pytest

from adapterforge.adapters import AdapterLayer, StackConfig
from adapterforge.errors import RoutingError
from adapterforge.model import (
    ModelConfig,
    TransformerModel,
    count_parameters,
    transformer_param_formula,
)
from adapterforge.routing import ExperimentSpec, Route, plan_activation
from adapterforge.tensor import Tape, backward, cross_entropy_smoothed, reshape

from oracles import finite_difference, max_rel_error

VOCAB = 23


def tiny_config(**kw):
    base = dict(
        vocab_size=VOCAB, d_model=8, n_heads=2, enc_layers=2, dec_layers=2,
        ffn_dim=16, max_len=12, dropout_p=0.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def bare_exp(enc_layers=2, dec_layers=2, **kw):
    base = dict(
        languages=("de", "en"), in_set=("de", "en"),
        enc_layers=enc_layers, dec_layers=dec_layers,
    )
    base.update(kw)
    return ExperimentSpec(**base)


def bare_plan(enc_layers=2, dec_layers=2):
    return plan_activation(Route("de", "en", "paracrawl"), bare_exp(enc_layers, dec_layers))


def test_output_shapes():
    model = TransformerModel(tiny_config(), seed=0)
    plan = bare_plan()
    src = np.array([[5, 6, 7, 0], [5, 6, 0, 0]])
    tgt = np.array([[2, 9, 8], [2, 9, 8]])
    enc = model.encode(src, plan)
    assert enc.shape == (2, 4, 8)
    logits = model.decode(tgt, enc, src, plan)
    assert logits.shape == (2, 3, VOCAB)
    # 1-D convenience path squeezes the batch axis back out
    enc1 = model.encode(src[0], plan)
    assert enc1.shape == (4, 8)
    logits1 = model.decode(tgt[0], enc1, src[0], plan)
    assert logits1.shape == (3, VOCAB)


def test_decoder_is_causal():
    model = TransformerModel(tiny_config(), seed=1)
    plan = bare_plan()
    src = np.array([4, 5, 6])
    enc = model.encode(src, plan)
    a = model.decode(np.array([2, 7, 8, 9]), enc, src, plan).data
    b = model.decode(np.array([2, 7, 11, 12]), enc, src, plan).data
    # positions 0 and 1 only see tokens 0..1, which agree across inputs
    assert np.array_equal(a[:2], b[:2])
    assert not np.array_equal(a[2:], b[2:])


def test_padding_does_not_leak():
    cfg = tiny_config(pad_id=0)
    model = TransformerModel(cfg, seed=2)
    plan = bare_plan()
    short = np.array([4, 5, 6])
    padded = np.array([4, 5, 6, 0, 0])
    tgt = np.array([2, 9, 10])
    la = model.decode(tgt, model.encode(short, plan), short, plan).data
    lb = model.decode(tgt, model.encode(padded, plan), padded, plan).data
    assert np.max(np.abs(la - lb)) < 1e-5


def test_embeddings_are_tied():
    model = TransformerModel(tiny_config(), seed=3)
    names = [n for n, _ in model.parameters()]
    assert "embed" in names
    assert not any("out_proj" in n or "lm_head" in n for n in names)
    plan = bare_plan()
    src = np.array([4, 5])
    logits = model.decode(np.array([2, 9]), model.encode(src, plan), src, plan)
    assert logits.shape[-1] == VOCAB


def test_param_formula_matches_instantiated_count():
    cfg = tiny_config()
    model = TransformerModel(cfg, seed=0)
    formula = transformer_param_formula(
        cfg.vocab_size, cfg.d_model, cfg.enc_layers, cfg.dec_layers, cfg.ffn_dim
    )
    assert formula == count_parameters(model, ["base"])

    desk = ModelConfig(vocab_size=379, d_model=64, n_heads=4, enc_layers=2,
                       dec_layers=2, ffn_dim=256, max_len=64)
    model = TransformerModel(desk, seed=0)
    assert transformer_param_formula(379, 64, 2, 2, 256) == count_parameters(model, ["base"])


def test_reference_shape_trunk_count():
    # 64k vocab, width 512, 6+6 layers, ffn 2048: ~79M within 5 percent.
    n = transformer_param_formula(64000, 512, 6, 6, 2048)
    assert n == 76_906_496
    assert abs(n - 79_000_000) / 79_000_000 < 0.05


def test_missing_adapter_is_a_routing_error():
    model = TransformerModel(tiny_config(), seed=4)
    exp = bare_exp(use_language_adapters=True)
    plan = plan_activation(Route("de", "en", "paracrawl"), exp)
    with pytest.raises(RoutingError):
        model.encode(np.array([4, 5]), plan)


def install_las(model, langs, bottleneck=4, seed=10):
    rng = np.random.default_rng(seed)
    for lang in langs:
        for side, n in (("encoder", model.config.enc_layers),
                        ("decoder", model.config.dec_layers)):
            for i in range(n):
                ad = AdapterLayer(model.config.d_model, bottleneck, "language", lang,
                                  rng, dtype=model._np_dtype)
                model.install_adapter(side, i, ad)


def test_fresh_adapters_leave_outputs_bitwise_identical():
    cfg = tiny_config()
    plain = TransformerModel(cfg, seed=5)
    adapted = TransformerModel(cfg, seed=5)
    install_las(adapted, ("de", "en"))
    exp = bare_exp(use_language_adapters=True)
    plan_plain = bare_plan()
    plan_adapted = plan_activation(Route("de", "en", "paracrawl"), exp)
    rng = np.random.default_rng(6)
    for _ in range(25):
        n = int(rng.integers(2, 8))
        src = rng.integers(3, VOCAB, size=n)
        tgt = rng.integers(3, VOCAB, size=n)
        la = plain.decode(tgt, plain.encode(src, plan_plain), src, plan_plain).data
        lb = adapted.decode(tgt, adapted.encode(src, plan_adapted), src, plan_adapted).data
        assert np.array_equal(la, lb)


def test_dropout_draws_are_seed_deterministic():
    cfg = tiny_config(dropout_p=0.3)
    plan = bare_plan()
    src = np.array([4, 5, 6])
    tgt = np.array([2, 9, 10])

    def run():
        model = TransformerModel(cfg, seed=7)
        model.seed_runtime(99)
        return model.decode(tgt, model.encode(src, plan, mode="train"), src, plan,
                            mode="train").data

    assert np.array_equal(run(), run())


def test_invocation_counter_tracks_sides():
    model = TransformerModel(tiny_config(), seed=8)
    install_las(model, ("de", "en"))
    da = AdapterLayer(8, 4, "domain", "medical", np.random.default_rng(1))
    model.install_adapter("decoder", 0, da)
    model.install_adapter("decoder", 1, da)
    from adapterforge.adapters import PlacementSpec
    exp = bare_exp(use_language_adapters=True, domain_adapters=("medical",),
                   placement=PlacementSpec.decoder_only(2))
    plan = plan_activation(Route("de", "en", "medical"), exp)
    src = np.array([4, 5])
    model.decode(np.array([2, 9]), model.encode(src, plan), src, plan)
    enc_da = sum(v for k, v in model.invocations.items()
                 if k[0] == "encoder" and str(k[2]).startswith("da:"))
    dec_da = sum(v for k, v in model.invocations.items()
                 if k[0] == "decoder" and str(k[2]).startswith("da:"))
    enc_la = sum(v for k, v in model.invocations.items()
                 if k[0] == "encoder" and str(k[2]).startswith("la:"))
    assert enc_da == 0
    assert dec_da == 2
    assert enc_la == 2  # source-language adapter ran in both encoder layers


def composed_loss(model, plan, src, tgt_in, tgt_out):
    with Tape() as tape:
        enc = model.encode(src, plan, mode="eval")
        logits = model.decode(tgt_in, enc, src, plan, mode="eval")
        flat = reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2])) \
            if logits.data.ndim == 3 else logits
        loss = cross_entropy_smoothed(flat, tgt_out.reshape(-1), smoothing=0.1)
        backward(tape, loss)
    return float(loss.data)


def test_composed_gradients_match_finite_differences():
    cfg = tiny_config(dtype="float64")
    model = TransformerModel(cfg, seed=9)
    install_las(model, ("de", "en"))
    da = AdapterLayer(8, 4, "domain", "medical", np.random.default_rng(2),
                      dtype=np.float64)
    for i in range(2):
        model.install_adapter("decoder", i, da)
    # nudge adapters off their exact-identity init so their grads are generic
    nudge = np.random.default_rng(3)
    for stacks in model.adapters.values():
        for ad in stacks.values():
            for p in ad.parameters().values():
                p.data = p.data + nudge.normal(0.0, 0.05, size=p.shape)

    from adapterforge.adapters import PlacementSpec
    exp = bare_exp(use_language_adapters=True, domain_adapters=("medical",),
                   placement=PlacementSpec.decoder_only(2))
    plan = plan_activation(Route("de", "en", "medical"), exp)
    src = np.array([[4, 5, 6]])
    tgt_in = np.array([[2, 9, 10]])
    tgt_out = np.array([[9, 10, 1]])

    composed_loss(model, plan, src, tgt_in, tgt_out)
    grads = {n: p.grad.copy() for n, p in model.parameters() if p.grad is not None}

    rng = np.random.default_rng(4)
    picked = 0
    for name, p in model.parameters():
        if name not in grads or p.data.size == 0:
            continue
        # spot-check a few entries of every kind of parameter
        idx = tuple(rng.integers(0, s) for s in p.shape) if p.shape else ()
        orig = p.data.copy()

        def f(v, p=p, idx=idx, orig=orig):
            p.data = orig.copy()
            if idx:
                p.data[idx] = v.reshape(-1)[0]
            else:
                p.data = v.reshape(p.data.shape)
            for _, q in model.parameters():
                q.clear_grad()
            out = composed_loss(model, plan, src, tgt_in, tgt_out)
            p.data = orig.copy()
            return out

        point = np.array([orig[idx] if idx else float(orig)])
        fd = finite_difference(f, point, h=1e-5)[0]
        got = grads[name][idx] if idx else float(grads[name])
        # default absolute floor absorbs central-difference noise (~1e-11)
        # on entries whose true gradient is zero
        assert max_rel_error(np.array([got]), np.array([fd])) < 1e-3, name
        picked += 1
    assert picked > 30
