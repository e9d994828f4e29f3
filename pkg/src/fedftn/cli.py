"""Command line entry point: ``fedftn train | evaluate | adapt | compare | gen-data``.

Exit codes: 0 success, 2 invalid configuration, 3 transport failure,
4 checkpoint incompatible with the configuration, 5 runs built on different
datasets.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgmod
from .config import ExperimentConfig
from .datacache import build_datasets, read_cache, write_cache
from .errors import ConfigError, DecodeError, FedFTNError, TransportError
from .evaluation import (CSV_COLUMNS, METRICS, evaluate_samples, fmt, format_table, level_means,
                         summarize)
from .federation import (init_model, load_checkpoint, run_federated_training,
                         save_checkpoint, site_adaptation)

log = logging.getLogger("fedftn")

EXIT_CONFIG, EXIT_TRANSPORT, EXIT_CHECKPOINT, EXIT_DATASET = 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SAMPLE_COLUMNS = CSV_COLUMNS + ("subject",)
SUMMARY_COLUMNS = ("site", "count_level", "n") + tuple(f"{m}_{s}" for m in METRICS
                                                       for s in ("mean", "std"))
COMPARE_COLUMNS = ("site", "count_level", "metric", "run_id", "value", "delta", "best")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "nmse": False}


class CheckpointMismatch(FedFTNError):
    pass


class DatasetMismatch(FedFTNError):
    pass


# -- helpers -------------------------------------------------------------------

def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def resolve_config(args) -> ExperimentConfig:
    config = cfgmod.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.output is not None:
        changes["output_dir"] = args.output
    if args.transport is not None:
        changes["transport"] = args.transport
    if args.precision is not None:
        changes["precision"] = args.precision
    return config.replace(**changes) if changes else config


def load_datasets(config: ExperimentConfig, data_dir: Optional[str]) -> list:
    if data_dir:
        return read_cache(data_dir, config.sites)
    return build_datasets(config)


def load_model(config: ExperimentConfig, path) -> tuple:
    """Checkpoint -> (model, site_id, epoch), checked against the configured architecture."""
    try:
        msg = load_checkpoint(path)
    except OSError as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from None
    except DecodeError as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from None
    model = init_model(config.train_settings())
    expected, found = model.params.shapes(), msg.payload.shapes()
    if expected != found:
        diff = sorted(set(expected) ^ set(found)) or [n for n in expected if expected[n] != found[n]]
        raise CheckpointMismatch(f"{path} does not match the configured model: {diff[:4]}")
    if msg.site_id not in {s.site_id for s in config.sites}:
        raise CheckpointMismatch(f"{path} belongs to site {msg.site_id}, not in the configuration")
    model.params.assign(msg.payload)
    return model, msg.site_id, msg.global_epoch


def site_dataset(datasets, site_id: int):
    return next(d for d in datasets if d.profile.site_id == site_id)


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    out = Path(args.output or Path(config.output_dir) / "data")
    manifest = write_cache(build_datasets(config), out)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(config, args.data)
    result = run_federated_training(datasets, config.train_settings(), config.transport,
                                    run_id=config.run_id)
    cfgmod.save(config, out / "config.yaml")
    write_csv(out / "metrics.csv", CSV_COLUMNS, result.rows)
    for site, model in sorted(result.models.items()):
        save_checkpoint(out / f"site{site}.ckpt", model.params, site, config.Q)
    save_checkpoint(out / "shared.ckpt", result.aggregated, 0, config.Q)
    final = [r for r in result.rows if r["epoch"] == config.Q]
    for r in final:
        log.info("site %d %s d=%g psnr=%.3f ssim=%.4f", r["site"], r["split"], r["count_level"],
                 r["psnr"], r["ssim"])
    print(f"trained {len(result.models)} site(s) for {config.Q} global epochs -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    model, site, epoch = load_model(config, args.checkpoint)
    ds = site_dataset(load_datasets(config, args.data), site)
    samples = ds.split(args.split)
    if args.levels:
        wanted = {round(float(d), 6) for d in args.levels}
        samples = [s for s in samples if round(s.d, 6) in wanted]
    if not samples:
        raise ConfigError(f"no {args.split} samples for site {site} at the requested levels")
    records = evaluate_samples(None if args.raw else model, samples)
    run_id = f"{config.run_id}/raw" if args.raw else config.run_id
    for r in records:
        r.update(run_id=run_id, epoch=epoch, split=args.split, gwc_loss=math.nan)
    summary = summarize(records)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"evaluation_site{site}_{args.split}" + ("_raw" if args.raw else "")
    write_csv(out / f"{stem}_samples.csv", SAMPLE_COLUMNS, records)
    write_csv(out / f"{stem}.csv", SUMMARY_COLUMNS, summary)
    print(format_table(summary))
    return 0


def cmd_adapt(args) -> int:
    config = resolve_config(args)
    model, site, epoch = load_model(config, args.checkpoint)
    ds = site_dataset(load_datasets(config, args.data), site)
    epochs = config.sa_epochs if args.epochs is None else args.epochs
    lr = config.sa_lr if args.lr is None else args.lr
    adapted = site_adaptation(model, ds.train, epochs=epochs, lr=lr, batch_size=config.batch,
                              crop=config.crop, flip=config.flip, seed=[config.seed, site, 0x5A])
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / f"{Path(args.checkpoint).stem}.sa", adapted.params, site, epoch)
    rows = []
    for tag, m in (("before", model), ("after", adapted)):
        for split in ("train", "test"):
            means = level_means(evaluate_samples(m, ds.split(split)))
            for d, vals in means.items():
                rows.append({"run_id": f"{config.run_id}/{tag}", "epoch": epoch, "site": site,
                             "split": split, "count_level": d, "gwc_loss": math.nan, **vals})
    write_csv(out / f"adapt_site{site}.csv", CSV_COLUMNS, rows)
    for r in rows:
        print(f"{r['run_id']:>16} {r['split']:>5} d={r['count_level']:<5g} psnr={r['psnr']:.3f} "
              f"recon={r['recon_loss']:.6g}")
    return 0


def final_rows(run_dir: Path, split: str) -> list:
    rows = [r for r in read_csv(run_dir / "metrics.csv") if r["split"] == split]
    if not rows:
        raise ConfigError(f"{run_dir}/metrics.csv has no {split} rows")
    last = max(int(r["epoch"]) for r in rows)
    return [r for r in rows if int(r["epoch"]) == last]


def cmd_compare(args) -> int:
    from .plotting import bar_chart

    runs = [Path(r) for r in args.runs]
    if len(runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    configs = [cfgmod.load(r / "config.yaml") for r in runs]
    datasets = {(c.data_seed, c.sites, c.n_subjects, c.split, c.volume_size) for c in configs}
    if len(datasets) > 1:
        raise DatasetMismatch("runs were trained on different datasets: data_seed "
                              + ", ".join(f"{r}={c.data_seed}" for r, c in zip(runs, configs)))
    run_ids = [c.run_id for c in configs]
    if len(set(run_ids)) != len(run_ids):
        run_ids = [f"{c.run_id}@{r.name}" for c, r in zip(configs, runs)]
    values = {m: {rid: {} for rid in run_ids} for m in METRICS}
    for rid, run in zip(run_ids, runs):
        for r in final_rows(run, args.split):
            key = (int(r["site"]), float(r["count_level"]))
            for m in METRICS:
                values[m][rid][key] = float(r[m])
    table = []
    for m in METRICS:
        keys = sorted({k for v in values[m].values() for k in v})
        for key in keys:
            vals = {rid: values[m][rid].get(key, math.nan) for rid in run_ids}
            finite = [v for v in vals.values() if not math.isnan(v)]
            best = (max if HIGHER_IS_BETTER[m] else min)(finite) if finite else math.nan
            first = vals[run_ids[0]]
            for rid in run_ids:
                table.append({"site": key[0], "count_level": key[1], "metric": m, "run_id": rid,
                              "value": vals[rid], "delta": vals[rid] - first,
                              "best": int(vals[rid] == best)})
    out = Path(args.output or "compare")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, table)
    for m in METRICS:
        bar_chart(values[m], m, out / f"compare_{m}.svg")
    for row in table:
        if row["metric"] == "psnr":
            flag = " *" if row["best"] else ""
            print(f"site {row['site']} d={row['count_level']:<5g} {row['run_id']:>20} "
                  f"{row['value']:.3f} ({row['delta']:+.3f}){flag}")
    print(f"wrote {out / 'compare.csv'}")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the training seed")
    common.add_argument("--output", help="output directory")
    common.add_argument("--transport", help="inproc or socket:HOST:PORT")
    common.add_argument("--precision", choices=("f32", "f64"))

    parser = argparse.ArgumentParser(prog="fedftn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run federated training")
    p.add_argument("--data", help="dataset cache written by gen-data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--levels", nargs="*", type=float, help="restrict to these count levels")
    p.add_argument("--raw", action="store_true", help="score the raw low-count input instead")
    p.add_argument("--data")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("adapt", parents=[common], help="local fine-tuning of a site checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("compare", parents=[common], help="tabulate and chart several runs")
    p.add_argument("runs", nargs="+", help="run directories written by train")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-data", parents=[common], help="write the phantom dataset cache")
    p.set_defaults(func=cmd_gen_data)
    return parser


def setup_logging() -> None:
    level = os.environ.get("FEDFTN_LOG_LEVEL", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"FEDFTN_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DatasetMismatch as exc:
        print(f"dataset mismatch: {exc}", file=sys.stderr)
        return EXIT_DATASET


if __name__ == "__main__":
    sys.exit(main())
