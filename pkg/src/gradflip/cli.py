"""Command-line entry point.

    gradflip gen-data --config cfg.txt --out runs/data
    gradflip train    --config cfg.txt --data runs/data --mode al --fork out --out runs
    gradflip probe    --checkpoints baseline=...,mt=...,al=... --layers in,mid,out \
                      --data runs/data/synth.train --out runs/probe
    gradflip eval     --checkpoint runs/al-out/best.ckpt --data runs/data/synth.dev --out runs/eval

Every config key is overridable as `--key=value`. Exit codes: 0 success,
2 validation error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from gradflip import analysis, config as cf, data as gd, model as gm, trainer as tr

__all__ = ["main", "entry"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3


def _split_overrides(extras: list[str]) -> dict[str, str]:
    """Leftover args of the form --key=value or --key value."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise ValueError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, _, val = body.partition("=")
            i += 1
        else:
            key = body
            if i + 1 >= len(extras):
                raise ValueError(f"flag --{key} needs a value")
            val = extras[i + 1]
            i += 2
        if key not in cf.SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = val
    return out


def _resolve_from_args(args, extras) -> dict[str, object]:
    file_values = cf.load_config_file(args.config) if args.config else None
    overrides = _split_overrides(extras)
    return cf.resolve(file_values, overrides, seed_flag=args.seed)


def _echo_resolved(cfg: dict[str, object], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(cf.format_resolved(cfg))


def _dataset_paths(data_dir: Path, name: str) -> dict[str, Path]:
    return {part: data_dir / f"{name}.{part}" for part in ("train", "dev", "test", "semi")}


def cmd_gen_data(args, extras) -> int:
    cfg = _resolve_from_args(args, extras)
    out_dir = Path(args.out)
    paths = _dataset_paths(out_dir, cfg["data.name"])
    existing = [str(p) for p in paths.values() if p.exists()]
    if existing and not args.force:
        raise ValueError(f"refusing to overwrite {existing[0]} (use --force)")
    _echo_resolved(cfg, out_dir)
    full = gd.generate(cf.gen_config(cfg))
    main_ds, semi_ds = gd.partition_semi(full)
    train_ds, dev_ds, test_ds = gd.split(main_ds, cfg["gen.train_frac"], cfg["gen.dev_frac"], cfg["seed"])
    counts = {}
    for part, ds in (("train", train_ds), ("dev", dev_ds), ("test", test_ds)):
        gd.save_dataset(ds, paths[part])
        counts[part] = len(ds.utterances)
    if semi_ds is not None:
        gd.save_dataset(semi_ds, paths["semi"])
        counts["semi"] = len(semi_ds.utterances)
    manifest = {
        "name": cfg["data.name"],
        "seed": cfg["seed"],
        "counts": counts,
        "n_speakers": len(main_ds.speakers),
        "n_semi_speakers": 0 if semi_ds is None else len(semi_ds.speakers),
        "dim": main_ds.dim,
        "vocab_size": len(main_ds.vocab),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(counts)} dataset files under {out_dir}")
    return EXIT_OK


def cmd_train(args, extras) -> int:
    cfg = _resolve_from_args(args, extras)
    if args.mode:
        cfg["train.mode"] = args.mode
    mode = cfg["train.mode"]
    if mode not in tr.MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if args.fork:
        if mode == "baseline":
            raise ValueError("baseline mode takes no fork")
        cfg["train.fork"] = args.fork

    data_dir = Path(args.data or cfg["data.dir"] or ".")
    paths = _dataset_paths(data_dir, cfg["data.name"])
    for part in ("train", "dev"):
        if not paths[part].exists():
            raise ValueError(f"missing dataset file {paths[part]}")
    train_ds = gd.load_dataset(paths["train"])
    dev_ds = gd.load_dataset(paths["dev"])
    semi_ds = None
    if mode == "semi":
        if not paths["semi"].exists():
            raise ValueError(f"semi mode needs {paths['semi']}")
        semi_ds = gd.load_dataset(paths["semi"])

    cell = mode if mode == "baseline" else f"{mode}-{cfg['train.fork']}"
    out_dir = Path(args.out) / cell
    _echo_resolved(cfg, out_dir)

    n_speakers = len(train_ds.speakers) + (len(semi_ds.speakers) if semi_ds else 0)
    mcfg = cf.model_config(cfg, train_ds.dim, len(train_ds.vocab), n_speakers)
    m = gm.build_model(mcfg, cfg["seed"])
    try:
        result = tr.train(m, train_ds, dev_ds, cf.train_config(cfg), out_dir, semi_ds=semi_ds)
    except tr.DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    print(
        f"trained {cell}: best dev LER {result.best_dev_ler:.4f}; "
        f"metrics at {result.metrics_path}"
    )
    return EXIT_OK


def _parse_checkpoint_list(spec: str) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for item in spec.split(","):
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"--checkpoints entries must be name=path, got {item!r}")
        name, _, path = item.partition("=")
        out[name] = Path(path)
    if not out:
        raise ValueError("--checkpoints is empty")
    return out


def cmd_probe(args, extras) -> int:
    cfg = _resolve_from_args(args, extras)
    out_dir = Path(args.out)
    checkpoints = _parse_checkpoint_list(args.checkpoints)
    for name, path in checkpoints.items():
        if not path.exists():
            raise ValueError(f"checkpoint {name}={path} does not exist")
    _echo_resolved(cfg, out_dir)
    dataset = gd.load_dataset(args.data)
    labels = [s for s in args.layers.split(",") if s]

    models = {name: gm.load_checkpoint(path) for name, path in checkpoints.items()}
    cells: list[analysis.ProbeCell] = []
    for name, m in models.items():
        layer_map: dict[str, int | None] = {}
        for label in labels:
            try:
                layer = int(label) if label.lstrip("-").isdigit() else gm.resolve_fork(m.cfg.n_layers, label)
                if not (0 <= layer <= m.cfg.n_layers):
                    raise ValueError
                layer_map[label] = layer
            except ValueError:
                layer_map[label] = None  # invalid for this model: absent cell
        cells += [
            c
            for c in analysis.figure2_report(
                {name: m}, layer_map, dataset, probe_epochs=cfg["probe.epochs"], seed=cfg["seed"]
            )
            if c.variant != "chance"
        ]
    chance = 1.0 / len(dataset.speakers)
    cells.append(analysis.ProbeCell("chance", "-", chance, chance, 0, cfg["seed"]))
    out_path = out_dir / "probe.csv"
    analysis.write_probe_csv(cells, out_path)
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_eval(args, extras) -> int:
    cfg = _resolve_from_args(args, extras)
    out_dir = Path(args.out)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ValueError(f"checkpoint {ckpt} does not exist")
    _echo_resolved(cfg, out_dir)
    m = gm.load_checkpoint(ckpt)
    rows = []
    for path_str in args.data.split(","):
        path = Path(path_str)
        if not path.exists():
            raise ValueError(f"dataset file {path} does not exist")
        ds = gd.load_dataset(path)
        split_name = path.suffix.lstrip(".") or path.name
        ler = analysis.evaluate_ler(m, ds)
        wer = analysis.evaluate_wer(m, ds)
        rows.append((split_name, "ler", ler.value, ler.n_scored))
        rows.append((split_name, "wer", wer.value, wer.n_scored))
        if ler.n_skipped:
            print(f"{split_name}: skipped {ler.n_skipped} untranscribed utterances")
    out_path = out_dir / "eval.csv"
    analysis.write_eval_csv(rows, out_path)
    print(f"wrote {out_path}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradflip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config document (key = value lines)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset files")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite existing dataset files")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one experiment cell")
    common(p)
    p.add_argument("--data", default=None, help="directory holding the dataset files")
    p.add_argument("--mode", choices=tr.MODES, default=None)
    p.add_argument("--fork", choices=("in", "mid", "out"), default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("probe", help="speaker-probe checkpoints at given layers")
    common(p)
    p.add_argument("--checkpoints", required=True, help="name=path[,name=path...]")
    p.add_argument("--layers", default="in,mid,out", help="labels or integer layer indices")
    p.add_argument("--data", required=True, help="dataset file to dump representations from")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("eval", help="LER/WER of a checkpoint on dataset files")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file, or comma-separated files")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args, extras)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
