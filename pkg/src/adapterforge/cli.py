"""Command-line front end.

Four subcommands: ``generate`` builds a synthetic corpus tree, ``run``
trains a preset and evaluates the translation grid, ``report`` merges
finished runs into one comparison table, ``budget`` prints parameter
accounting. Exit codes: 0 success, 2 bad configuration, 3 missing
prerequisite artifact, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import os
import sys

from .adapters import AdapterBudgetItem, count_adapter_budget
from .corpus import CorpusSpec, generate_multiparallel, make_splits, write_corpus_tree
from .errors import (
    CheckpointError,
    ConfigError,
    MissingPrerequisiteError,
    NumericError,
    RoutingError,
    ShapeError,
)
from .evaluation import EvalReport, render_comparison
from .model import transformer_param_formula
from .presets import get_preset, preset_ids

__all__ = ["main", "make_parser", "budget_lines"]

PAPER_SHAPE = dict(d_model=512, enc_layers=6, dec_layers=6, ffn_dim=2048,
                   bottleneck=1024, vocab=64000)
DESK_SHAPE = dict(d_model=64, enc_layers=2, dec_layers=2, ffn_dim=256,
                  bottleneck=128, vocab=379)


def _millions(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def budget_lines(scale: str) -> list:
    shape = PAPER_SHAPE if scale == "paper-shape-count-only" else DESK_SHAPE
    d, b = shape["d_model"], shape["bottleneck"]
    layers = shape["enc_layers"] + shape["dec_layers"]
    dec = shape["dec_layers"]

    def budget(sets, nlayers):
        return count_adapter_budget(
            [AdapterBudgetItem("language", sets, nlayers, d, b)]
        )

    trunk = transformer_param_formula(
        shape["vocab"], d, shape["enc_layers"], shape["dec_layers"], shape["ffn_dim"]
    )
    la_set = budget(1, layers)
    all_las = budget(12, layers)
    da_dec = budget(1, dec)
    da_all = budget(1, layers)
    lines = [
        f"scale: {scale}  (width {d}, bottleneck {b}, "
        f"{shape['enc_layers']}+{shape['dec_layers']} layers, vocab {shape['vocab']})",
        f"trunk parameters:                     {trunk:>12,}  ({_millions(trunk)})",
        f"one adapter set, every layer:         {la_set:>12,}  ({_millions(la_set)})",
        f"one adapter set, decoder only:        {da_dec:>12,}  ({_millions(da_dec)})",
        f"12 language adapter sets:             {all_las:>12,}  ({_millions(all_las)})",
        f"12 LA sets + 4 decoder domain sets:   {all_las + 4 * da_dec:>12,}"
        f"  ({_millions(all_las + 4 * da_dec)})",
        f"12 LA sets + 4 everywhere domain sets:{all_las + 4 * da_all:>12,}"
        f"  ({_millions(all_las + 4 * da_all)})",
    ]
    return lines


def _preset_budget_lines(preset_id: str) -> list:
    """Tunable-parameter accounting for one preset at full size."""
    preset = get_preset(preset_id)
    shape = PAPER_SHAPE
    d, b = shape["d_model"], shape["bottleneck"]
    placement = preset.placement_spec(shape["enc_layers"], shape["dec_layers"])
    da_layers = len(placement.encoder_layers) + len(placement.decoder_layers)
    la_layers = shape["enc_layers"] + shape["dec_layers"]
    trunk = transformer_param_formula(
        shape["vocab"], d, shape["enc_layers"], shape["dec_layers"], shape["ffn_dim"]
    )
    items = []
    if preset.install_las:
        items.append(AdapterBudgetItem("language", 12, la_layers, d, b))
    if preset.train_domains:
        items.append(AdapterBudgetItem("domain", len(preset.train_domains), da_layers, d, b))
    adapters = count_adapter_budget(items)
    tunable = 0
    if "base" in preset.trainable:
        tunable += trunk
    if any(g.startswith("la") for g in preset.trainable) and preset.install_las:
        tunable += count_adapter_budget([AdapterBudgetItem("language", 12, la_layers, d, b)])
    if any(g.startswith("da") for g in preset.trainable) and preset.train_domains:
        tunable += count_adapter_budget(
            [AdapterBudgetItem("domain", len(preset.train_domains), da_layers, d, b)]
        )
    return [
        f"preset {preset_id} at full size:",
        f"  trunk:            {trunk:>12,}  ({_millions(trunk)})",
        f"  adapters:         {adapters:>12,}  ({_millions(adapters)})",
        f"  tunable:          {tunable:>12,}  ({_millions(tunable)})",
    ]


def cmd_generate(args) -> int:
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fh:
            spec = CorpusSpec.from_json(fh.read())
    else:
        spec = CorpusSpec()
    multi = generate_multiparallel(spec, seed=args.seed)
    splits = make_splits(multi, spec.valid_size, spec.test_size, seed=args.seed + 1)
    write_corpus_tree(multi, splits, args.out)
    domains = ", ".join(spec.all_domains())
    print(f"wrote {len(spec.languages)} languages x ({domains}) under {args.out}")
    return 0


def cmd_run(args) -> int:
    if args.scale == "paper-shape-count-only":
        for line in _preset_budget_lines(args.preset):
            print(line)
        return 0
    from .pipeline import run_preset  # deferred: import cost only when training

    paths = run_preset(
        args.preset, args.data, args.out, seed=args.seed, beam_size=args.beam
    )
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _load_report(path: str) -> EvalReport:
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    if not os.path.exists(path):
        raise MissingPrerequisiteError(f"no report at {path}")
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_json(fh.read())


def cmd_report(args) -> int:
    reports = [_load_report(p) for p in args.runs]
    print(render_comparison(reports, baseline_id=args.baseline), end="")
    return 0


def cmd_budget(args) -> int:
    for line in budget_lines(args.scale):
        print(line)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapterforge",
        description="composable-adapter translation experiments at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a synthetic corpus tree")
    g.add_argument("--out", required=True, help="corpus directory to create")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--manifest", help="JSON corpus spec; default settings otherwise")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train one preset and evaluate the grid")
    r.add_argument("--preset", required=True, help=f"one of: {', '.join(preset_ids())}")
    r.add_argument("--data", required=True, help="corpus directory from `generate`")
    r.add_argument("--out", required=True, help="experiment output directory")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--beam", type=int, default=5)
    r.add_argument("--device", choices=["none"], default="none",
                   help="CPU only; kept for interface stability")
    r.add_argument("--scale", choices=["desk", "paper-shape-count-only"], default="desk",
                   help="'paper-shape-count-only' prints full-size parameter counts and exits")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="merge finished runs into one table")
    p.add_argument("runs", nargs="+", help="run directories or report.json paths")
    p.add_argument("--baseline", help="model id the delta column compares against")
    p.set_defaults(func=cmd_report)

    b = sub.add_parser("budget", help="parameter accounting")
    b.add_argument("--scale", choices=["desk", "paper-shape-count-only"],
                   default="paper-shape-count-only")
    b.set_defaults(func=cmd_budget)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingPrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (ConfigError, RoutingError, CheckpointError, ShapeError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
