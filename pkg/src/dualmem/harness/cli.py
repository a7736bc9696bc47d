"""Command-line entry point: gen-data, train, eval, ablate, analyze.

Every subcommand takes ``--config FILE``, ``--seed N`` and ``--out DIR``.
The output directory may also be set with the ``DUALMEM_OUT`` environment
variable, which takes precedence over ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

from ..config import load_train_config, parse_flat, _coerce
from ..policy import Variant, load_checkpoint
from ..worldgen.dataset import Workload, generate_dataset, load_dataset, save_dataset
from ..worldgen.episodes import EpisodeConfig
from ..worldgen.layout import LayoutConfig
from .ablation import ABLATIONS, run_ablations
from .analysis import analyze_traces
from .data import EpisodeCache
from .report import EvalReport, evaluate
from .train import train

OUT_ENV = "DUALMEM_OUT"
DATA_FILE = "dataset.jsonl"


def load_workload(path: str | None, seed: int | None = None) -> Workload:
    """Workload from the ``workload.*``, ``layout.*`` and ``episode.*`` keys of a config file."""
    raw = parse_flat(Path(path).read_text()) if path else {}
    parts = {"workload": {}, "layout": {}, "episode": {}}
    types = {"workload": {f.name: f.type for f in dataclasses.fields(Workload)},
             "layout": {f.name: f.type for f in dataclasses.fields(LayoutConfig)},
             "episode": {f.name: f.type for f in dataclasses.fields(EpisodeConfig)}}
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if section not in parts:
            continue
        if name not in types[section] or name in ("layout", "episode"):
            raise KeyError(f"unknown config key {key!r}")
        kind = types[section][name]
        if "tuple" in str(kind):
            parts[section][name] = tuple(float(v) for v in value.split(","))
        else:
            parts[section][name] = _coerce(kind, value)
    w = Workload(layout=LayoutConfig(**parts["layout"]), episode=EpisodeConfig(**parts["episode"]),
                 **parts["workload"])
    if seed is not None:
        w = dataclasses.replace(w, seed=seed)
    return w


def _out_dir(args) -> Path:
    out = Path(os.environ.get(OUT_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    over = {} if args.seed is None else {"seed": args.seed}
    return load_train_config(args.config, **over)


def _dataset(args, out: Path):
    path = Path(args.data) if args.data else out / DATA_FILE
    if not path.exists():
        raise SystemExit(f"dataset not found: {path} (run gen-data first or pass --data)")
    return load_dataset(path)


def _variant(cfg, header: dict | None = None) -> Variant:
    return Variant.from_train_config(cfg, memory=True)


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    w = load_workload(args.config, args.seed)
    if args.layouts is not None or args.episodes_per_layout is not None or args.splits:
        ratios = tuple(float(r) for r in (args.splits or "0.8,0.1,0.1").split(","))
        if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
            raise SystemExit("--splits needs three non-negative ratios, e.g. 0.8,0.1,0.1")
        n_layouts = args.layouts if args.layouts is not None else w.n_layouts + w.n_unseen_layouts
        per = args.episodes_per_layout if args.episodes_per_layout is not None else w.episodes_per_layout
        w = Workload.from_ratios(w.seed, n_layouts, per, ratios, n_eval_seeds=w.n_eval_seeds,
                                 layout=w.layout, episode=w.episode)
    ds = generate_dataset(w)
    path = Path(args.data) if args.data else out / DATA_FILE
    save_dataset(ds, path)
    with (out / "layouts.txt").open("w") as fh:
        for lay in ds.layouts.values():
            fh.write(f"[{lay.layout_id}] seed {lay.seed}\n{lay.ascii()}\n\n")
    counts = {s: len(ds.split(s)) for s in ("train", "val_seen", "val_unseen")}
    print(f"wrote {path}: {len(ds.layouts)} layouts, episodes {counts}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    ds = _dataset(args, out)
    pretrained = load_checkpoint(args.pretrained)[0] if args.pretrained else None
    res = train(cfg, ds, out, pretrained=pretrained)
    last = res.log[-1] if res.log else {}
    print(f"wrote {res.checkpoint} (config {cfg.config_hash()}); final L_total {last.get('L_total', float('nan')):.4f}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    ds = _dataset(args, out)
    model, header = load_checkpoint(args.checkpoint or out / "model.ckpt")
    t0 = time.perf_counter()
    report = evaluate(model, _variant(cfg), ds, header.get("config_hash", cfg.config_hash()), cfg.seed,
                      with_qa=not args.no_qa)
    report.runtime_seconds = time.perf_counter() - t0
    txt, js = report.save(out)
    print(report.to_text())
    print(f"wrote {txt} and {js} in {report.runtime_seconds:.1f}s")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    ds = _dataset(args, out)
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    pretrained = load_checkpoint(args.pretrained)[0] if args.pretrained else None

    def progress(row):
        print(f"seed {row['seed']} {row['variant']:<14} SR {row['SR']:.4f} SPL {row['SPL']:.4f}", flush=True)

    t0 = time.perf_counter()
    table = run_ablations(cfg, ds, seeds, pretrained=pretrained, variants=variants, progress=progress)
    report = EvalReport(cfg.config_hash(), cfg.seed, ablation=table.to_dict(),
                        runtime_seconds=time.perf_counter() - t0)
    txt, js = report.save(out, "ablation_report")
    print(report.to_text())
    print(f"wrote {txt} and {js}")
    return 0


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    ds = _dataset(args, out)
    model, header = load_checkpoint(args.checkpoint or out / "model.ckpt")
    cache = EpisodeCache(ds.layouts)
    res = analyze_traces(model, _variant(cfg), ds, cache, per_episode=args.per_episode)
    plot = res.write_plot_data(out / "episodic_distances.tsv")
    report = EvalReport(header.get("config_hash", cfg.config_hash()), cfg.seed, distance=res.to_dict())
    txt, js = report.save(out, "distance_report")
    print(report.to_text())
    print(f"wrote {plot}, {txt} and {js}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the seed in the config")
        p.add_argument("--out", default="runs/default", help=f"output directory (env {OUT_ENV} wins)")
        p.add_argument("--data", help=f"episode file (default: OUT/{DATA_FILE})")
        return p

    p = common(sub.add_parser("gen-data", help="generate layouts and episodes"))
    p.add_argument("--layouts", type=int, help="total layout count, split into seen and unseen")
    p.add_argument("--episodes-per-layout", type=int)
    p.add_argument("--splits", help="train,val_seen,val_unseen ratios, e.g. 0.8,0.1,0.1")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="pretrain and LoRA-adapt a policy"))
    p.add_argument("--pretrained", help="skip pretraining and start from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="navigation and QA metrics for a checkpoint"))
    p.add_argument("--checkpoint", help="default: OUT/model.ckpt")
    p.add_argument("--no-qa", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="train and score every ablation over several seeds"))
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATIONS)}")
    p.add_argument("--pretrained", help="shared pretrained checkpoint")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("analyze", help="episodic trace distance statistics and plot data"))
    p.add_argument("--checkpoint", help="default: OUT/model.ckpt")
    p.add_argument("--per-episode", type=int, default=4)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
