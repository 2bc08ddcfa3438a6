"""Staged pipeline at micro scale: artifacts, freezing, reruns, augmentation.

One tiny six-language corpus and a short base -> language-adapter ->
domain-adapter chain are built once; every test inspects those artifacts.
Training budgets here are far below anything that translates well; the
point is the plumbing, not the scores.
"""

import json
import os

import numpy as np
import pytest

from adapterforge.corpus import back_translate, load_corpus_tree
from adapterforge.errors import ConfigError, MissingPrerequisiteError
from adapterforge.evaluation import EvalReport
from adapterforge.pipeline import load_workspace, run_preset
from adapterforge.training import load_checkpoint, restore_model

MANIFEST = {
    "languages": ["cs", "de", "en", "es", "fr", "it"],
    "lines": {"paracrawl": 200, "medical": 120, "ted": 60, "it": 50, "koran": 50},
    "valid_size": 5,
    "test_size": 5,
}

MICRO = {
    "base": {"updates": 120, "eval_every": 60, "warmup": 30},
    "paracrawl-la": {"updates": 80, "eval_every": 40},
    "freeze-la+dec-da": {"updates": 50, "eval_every": 25},
    "freeze-la+dec-da+bt": {"updates": 30, "eval_every": 15, "aug_lines": 12},
}

ARTIFACTS = ("checkpoint", "train_log", "report_json", "report_txt", "heatmap")


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data = str(root / "data")
    out = str(root / "out")
    from adapterforge.cli import main

    mpath = root / "manifest.json"
    mpath.write_text(json.dumps(MANIFEST))
    assert main(["generate", "--out", data, "--seed", "7",
                 "--manifest", str(mpath)]) == 0
    paths = {}
    for pid, ov in MICRO.items():
        paths[pid] = run_preset(pid, data, out, seed=0, threads=4, beam_size=2,
                                overrides=ov)
    return data, out, paths


def read_report(paths, pid) -> EvalReport:
    with open(paths[pid]["report_json"], encoding="utf-8") as fh:
        return EvalReport.from_json(fh.read())


def test_every_stage_writes_its_artifacts(chain):
    _, _, paths = chain
    for pid, arts in paths.items():
        for key in ARTIFACTS:
            assert key in arts, f"{pid} lacks {key}"
            assert os.path.exists(arts[key]), f"{pid}: {key} missing on disk"


def test_training_log_is_line_delimited_json(chain):
    _, _, paths = chain
    with open(paths["base"]["train_log"], encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) >= MICRO["base"]["updates"]
    steps = [r["step"] for r in records if "loss" in r]
    assert steps == sorted(steps)
    assert all({"step", "loss", "lr", "route"} <= set(r) for r in records if "loss" in r)
    assert any("val_nll" in r for r in records)


def test_checkpoint_meta_names_the_run(chain):
    _, _, paths = chain
    header, _ = load_checkpoint(paths["paracrawl-la"]["checkpoint"])
    meta = header["meta"]
    assert meta["preset"] == "paracrawl-la"
    assert meta["seed"] == 0
    assert meta["stopped_by"] in ("max_updates", "patience", "max_epochs")


def test_stage_two_leaves_trunk_bitwise_untouched(chain):
    _, _, paths = chain
    _, base_arrays = load_checkpoint(paths["base"]["checkpoint"])
    _, la_arrays = load_checkpoint(paths["paracrawl-la"]["checkpoint"])
    trunk = [k for k in base_arrays if not k.startswith("adapter.")]
    assert trunk
    for k in trunk:
        assert np.array_equal(base_arrays[k], la_arrays[k]), k
    grown = [k for k in la_arrays if ".la:" in k and k not in base_arrays]
    assert grown  # the language adapters exist only from stage two on


def test_stage_three_leaves_language_adapters_bitwise_untouched(chain):
    _, _, paths = chain
    _, la_arrays = load_checkpoint(paths["paracrawl-la"]["checkpoint"])
    _, da_arrays = load_checkpoint(paths["freeze-la+dec-da"]["checkpoint"])
    la_keys = [k for k in la_arrays if ".la:" in k]
    assert la_keys
    for k in la_keys:
        assert np.array_equal(la_arrays[k], da_arrays[k]), k
    da_keys = [k for k in da_arrays if ".da:" in k]
    assert da_keys
    assert all(k.startswith("adapter.decoder.") for k in da_keys)


def test_domain_report_carries_the_baseline_id(chain):
    _, _, paths = chain
    rep = read_report(paths, "freeze-la+dec-da")
    assert rep.baseline_id == "paracrawl-la"
    assert read_report(paths, "base").baseline_id is None


def test_report_covers_the_whole_grid(chain):
    _, _, paths = chain
    rep = read_report(paths, "paracrawl-la")
    n = len(MANIFEST["languages"])
    assert len(rep.rows) == n * (n - 1)
    assert rep.group_means["all"]["n_routes"] == n * (n - 1)
    assert rep.domains == ("medical",)
    assert {(r.src, r.tgt) for r in rep.rows} == {
        (s, t) for s in MANIFEST["languages"] for t in MANIFEST["languages"] if s != t
    }


def test_same_seed_rerun_reproduces_report_bytes(chain):
    data, out, paths = chain
    with open(paths["freeze-la+dec-da"]["report_json"], "rb") as fh:
        first = fh.read()
    run_preset("freeze-la+dec-da", data, out, seed=0, threads=2, beam_size=2,
               overrides=MICRO["freeze-la+dec-da"])
    with open(paths["freeze-la+dec-da"]["report_json"], "rb") as fh:
        second = fh.read()
    assert first == second


def test_restored_checkpoint_encodes_identically(chain):
    data, _, paths = chain
    model = restore_model(paths["freeze-la+dec-da"]["checkpoint"])
    again = restore_model(paths["freeze-la+dec-da"]["checkpoint"])
    multi, splits, vocab = load_workspace(data)
    content = [i for i, t in enumerate(vocab.id_to_token) if not t.startswith("<")][:3]
    ids = np.array([vocab.lang_token_id("de")] + content + [vocab.eos_id])
    from adapterforge.presets import get_preset
    from adapterforge.pipeline import build_experiment
    from adapterforge.routing import Route, plan_activation

    exp = build_experiment(get_preset("freeze-la+dec-da"), multi.spec, vocab,
                           model.config)
    plan = plan_activation(Route("en", "de", "medical"), exp)
    a = model.encode(ids, plan).data
    b = again.encode(ids, plan).data
    assert np.array_equal(a, b)


def test_missing_prerequisite_refuses_to_run(chain, tmp_path):
    data, _, _ = chain
    with pytest.raises(MissingPrerequisiteError):
        run_preset("freeze-la+dec-da", data, str(tmp_path / "fresh"), seed=0,
                   overrides=MICRO["freeze-la+dec-da"])


def test_bt_stage_trains_on_synthetic_source_pairs(chain):
    _, _, paths = chain
    with open(paths["freeze-la+dec-da+bt"]["train_log"], encoding="utf-8") as fh:
        routes = {r["route"] for r in map(json.loads, fh) if "route" in r}
    out_langs = {"es", "it"}
    assert any(r.split("-")[0] in out_langs or r.split("-")[1].split(":")[0] in out_langs
               for r in routes), routes


def test_back_translate_refuses_english_targets(chain):
    data, _, paths = chain
    multi, splits, vocab = load_workspace(data)
    model = restore_model(paths["paracrawl-la"]["checkpoint"])
    from adapterforge.pipeline import build_experiment
    from adapterforge.presets import get_preset

    exp = build_experiment(get_preset("paracrawl-la"), multi.spec, vocab,
                           model.config)
    corpus = splits.route_split("medical", "de", "en", "train")
    with pytest.raises(ConfigError):
        back_translate(model, vocab, exp, corpus, beam_size=1, max_len=6)


def test_overrides_reject_unknown_fields(chain):
    data, out, _ = chain
    with pytest.raises(ConfigError):
        run_preset("base", data, out, seed=0, overrides={"updatez": 5})
