"""Command-line entry point.

Subcommands map one-to-one onto the pipeline stages: ``encode`` builds the
one-hot dataset, ``train`` fits a model, ``report`` evaluates it, ``sample``
draws the model-based or a classical audit sample, ``estimate`` runs the
point estimators, ``metrics`` scores disentanglement and ``export-latent``
dumps scatter data. Every successful run writes a manifest describing its
inputs, seeds and outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, disentangle, sampling, trainer, vqvae
from .errors import (
    CheckpointError,
    ConfigError,
    ContractViolationError,
    FormatError,
    IoError,
    SchemaMismatchError,
    ShapeError,
    TrainingDivergenceError,
)
from .ingest import DatasetConfig, EncodedDataset, load_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_SCHEMA = 4
EXIT_INVALID = 5
EXIT_IO = 6
EXIT_FORMAT = 7
EXIT_DIVERGED = 8


_RUN_STARTED = ""


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error:{kind}: {message}", file=sys.stderr)
    return code


def _write_manifest(out_dir: Path, command: str, config_snapshot, dataset: EncodedDataset | None,
                    seeds: list[int], outputs: list[Path]) -> Path:
    for p in outputs:
        if not p.exists():
            raise IoError(f"declared output {p} was not written")
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config_snapshot,
        "dataset_fingerprint": (
            {
                "rows": dataset.n_rows,
                "width": dataset.width,
                "schema_hash": dataset.schema.hash(),
            }
            if dataset is not None
            else None
        ),
        "seeds": seeds,
        "started_utc": _RUN_STARTED,
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, default=str))
    os.replace(tmp, path)
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(args) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    return [args.seed]


def _load_data(path: str) -> EncodedDataset:
    return EncodedDataset.load(path)


def cmd_encode(args) -> int:
    config = DatasetConfig.load(args.config)
    dataset = load_dataset(config)
    out = _out_dir(args)
    dataset_path = out / "dataset.npz"
    schema_path = out / "schema.json"
    dataset.save(dataset_path)
    dataset.schema.save(schema_path)
    _write_manifest(out, "encode", json.loads(Path(args.config).read_text()),
                    dataset, [], [dataset_path, schema_path])
    print(f"encoded {dataset.n_rows} rows into {dataset.width} columns -> {dataset_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = _load_data(args.data)
    config = trainer.TrainConfig.load(args.config) if args.config else trainer.TrainConfig()
    if args.k is not None:
        config = replace(config, codebook_size=args.k)
    seeds = _seeds(args)
    out = _out_dir(args)
    outputs: list[Path] = []
    if len(seeds) == 1:
        config = replace(config, seed=seeds[0])
        try:
            model, log = trainer.train(dataset, config)
        except TrainingDivergenceError as exc:
            if exc.model is not None:
                trainer.checkpoint_save(exc.model, out / "diagnostic.npz", config)
            return _fail("divergence", str(exc), EXIT_DIVERGED)
        ckpt = out / "model.npz"
        trainer.checkpoint_save(model, ckpt, config)
        log_path = out / "trainlog.csv"
        log.to_csv(log_path)
        outputs = [ckpt, log_path]
        print(f"trained {log.epochs} epochs (early stop: {log.stopped_early}) -> {ckpt}")
    else:
        result = trainer.multi_seed_run(dataset, config, seeds,
                                        label_column=args.label_column, jobs=args.jobs)
        for run in result.runs:
            if run.model is not None:
                ckpt = out / f"model-seed{run.seed}.npz"
                trainer.checkpoint_save(run.model, ckpt, replace(config, seed=run.seed))
                outputs.append(ckpt)
            print(f"seed {run.seed}: {run.status}")
        report_path = out / "report.json"
        report_path.write_text(json.dumps(
            {
                "per_seed": [
                    {"seed": r.seed, "status": r.status,
                     "report": r.report.as_dict() if r.report else None}
                    for r in result.runs
                ],
                "aggregate": result.aggregate(),
            }, indent=2))
        outputs.append(report_path)
        print(json.dumps(result.aggregate(), indent=2))
    _write_manifest(out, "train", json.loads(config.to_json()), dataset, seeds, outputs)
    return EXIT_OK


def cmd_report(args) -> int:
    dataset = _load_data(args.data)
    out = _out_dir(args)
    reports = []
    for path in args.model:
        model = trainer.checkpoint_load(path)
        rep = vqvae.evaluate(model, dataset, label_column=args.label_column)
        reports.append((path, rep))
    aggregate = {}
    for metric in ("recon_q", "recon_e", "perplexity", "purity"):
        values = [getattr(r, metric) for _, r in reports if getattr(r, metric) is not None]
        if values:
            arr = np.array(values, dtype=np.float64)
            aggregate[metric] = {"mean": float(arr.mean()), "std": float(arr.std())}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(
        {
            "models": [{"checkpoint": str(p), **r.as_dict()} for p, r in reports],
            "aggregate": aggregate,
        }, indent=2))
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint", "codebook_size", "recon_q", "recon_e",
                         "perplexity", "purity"])
        for p, r in reports:
            writer.writerow([p, r.codebook_size, f"{r.recon_q:.6g}", f"{r.recon_e:.6g}",
                             f"{r.perplexity:.6g}",
                             f"{r.purity:.6g}" if r.purity is not None else ""])
    _write_manifest(out, "report", {"models": list(args.model)}, dataset, [],
                    [report_path, csv_path])
    for metric, stats in aggregate.items():
        print(f"{metric}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    dataset = _load_data(args.data)
    out = _out_dir(args)
    seeds = _seeds(args)
    seed = seeds[0]
    if args.method == "vq":
        if not args.model:
            raise ConfigError("--model is required for the vq sampling method")
        model = trainer.checkpoint_load(args.model)
        audit = sampling.extract_audit_sample(model, dataset, top_r=args.top_r)
        csv_path = out / "sample.csv"
        json_path = out / "sample.json"
        audit.to_csv(csv_path)
        json_path.write_text(audit.to_json())
        _write_manifest(out, "sample", {"method": "vq", "top_r": args.top_r},
                        dataset, seeds, [csv_path, json_path])
        print(f"selected {len(audit.records)} records over "
              f"{audit.used_embeddings}/{audit.codebook_size} used embeddings")
        return EXIT_OK

    ids = dataset.row_ids
    if args.method == "random":
        result = sampling.random_sample(ids, args.n, seed)
    elif args.method == "systematic":
        result = sampling.systematic_sample(ids, args.n, seed)
    elif args.method == "stratified":
        if not args.strata_column:
            raise ConfigError("--strata-column is required for stratified sampling")
        labels = [str(v) for v in dataset.labels(args.strata_column)]
        sizes: dict[str, int] = {}
        for lab in labels:
            sizes[lab] = sizes.get(lab, 0) + 1
        allocation = sampling.proportional_allocation(sizes, args.n)
        result = sampling.stratified_sample(ids, labels, allocation, seed)
    elif args.method == "mus":
        if dataset.amounts is None:
            raise ConfigError("dataset has no amount column; re-encode with amount_column set")
        amounts = np.asarray(dataset.amounts)
        keep = np.isfinite(amounts) & (amounts > 0)
        excluded = int(np.count_nonzero(~keep))
        if not np.any(keep):
            raise ValueError("no strictly positive amounts; monetary-unit sampling impossible")
        result = sampling.mus_sample(
            [ids[i] for i in np.flatnonzero(keep)], amounts[keep], args.n, seed
        )
        result.params["excluded_nonpositive"] = excluded
    else:  # pragma: no cover - argparse limits choices
        raise ConfigError(f"unknown method {args.method}")
    json_path = out / "sample.json"
    json_path.write_text(result.to_json())
    csv_path = out / "sample.csv"
    id_set = {str(i) for i in result.row_ids}
    selected = [i for i in range(dataset.n_rows) if str(ids[i]) in id_set]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        columns = list(dataset.raw_rows[0])
        writer.writerow(["row_id"] + columns)
        for i in selected:
            writer.writerow([ids[i]] + [dataset.raw_rows[i].get(c, "") for c in columns])
    _write_manifest(out, "sample", {"method": args.method, "n": args.n},
                    dataset, seeds, [csv_path, json_path])
    print(f"{args.method} sample: {len(result.row_ids)} records -> {csv_path}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    pairs: list[tuple[float, float]] = []
    try:
        with open(args.pairs, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"recorded", "audited"} <= set(reader.fieldnames):
                raise FormatError(f"{args.pairs}: need columns recorded, audited")
            for row in reader:
                pairs.append((float(row["recorded"]), float(row["audited"])))
    except OSError as exc:
        raise IoError(f"cannot read {args.pairs}: {exc}") from exc
    if args.method == "difference":
        if args.population_size is None or args.population_total is None:
            raise ConfigError("difference estimation needs --population-size and --population-total")
        report = sampling.difference_estimate(pairs, args.population_size, args.population_total)
    elif args.method == "ratio":
        if args.population_total is None:
            raise ConfigError("ratio estimation needs --population-total")
        report = sampling.ratio_estimate(pairs, args.population_total)
    else:
        if args.population_size is None:
            raise ConfigError("mean-per-unit estimation needs --population-size")
        report = sampling.mpu_estimate([a for _, a in pairs], args.population_size)
    out = _out_dir(args)
    path = out / "estimate.json"
    path.write_text(report.to_json())
    _write_manifest(out, "estimate", {"method": args.method}, None, [], [path])
    print(f"{report.method} estimate of population audited total: {report.estimate:.2f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    dataset = _load_data(args.data)
    model = trainer.checkpoint_load(args.model)
    factor_names = [f.strip() for f in args.factors.split(",") if f.strip()]
    if not factor_names:
        raise ConfigError("--factors must list at least one attribute")
    report = disentangle.run_all_metrics_on_model(
        model, dataset, factor_names, _seeds(args)
    )
    out = _out_dir(args)
    json_path = out / "disentanglement.json"
    json_path.write_text(report.to_json())
    csv_path = out / "disentanglement.csv"
    rows = report.to_csv_rows(dataset_name=args.data, codebook_size=model.codebook.size)
    sampling.write_csv(csv_path, rows)
    _write_manifest(out, "metrics", {"factors": factor_names}, dataset, _seeds(args),
                    [json_path, csv_path])
    for metric, stats in report.summary().items():
        print(f"{metric}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
    return EXIT_OK


def cmd_export_latent(args) -> int:
    dataset = _load_data(args.data)
    model = trainer.checkpoint_load(args.model)
    rows, codebook_rows = sampling.export_latents(model, dataset,
                                                  label_column=args.label_column)
    out = _out_dir(args)
    latents_path = out / "latents.csv"
    codebook_path = out / "codebook.csv"
    sampling.write_csv(latents_path, rows)
    sampling.write_csv(codebook_path, codebook_rows)
    _write_manifest(out, "export-latent", {"label_column": args.label_column},
                    dataset, [], [latents_path, codebook_path])
    print(f"wrote {len(rows)} latent rows -> {latents_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqaudit",
        description="Learn a quantized representation of payment data and draw audit samples.",
    )
    parser.add_argument("--version", action="version", version=f"vqaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = True) -> None:
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, default=0, help="master random seed")
        p.add_argument("--seeds", help="comma-separated seed list for multi-seed runs")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers for multi-seed runs")
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                       help="force deterministic execution (default: on)")
        if data:
            p.add_argument("--data", required=True, help="encoded dataset (.npz from `encode`)")

    p = sub.add_parser("encode", help="one-hot encode a CSV per a dataset config")
    p.add_argument("--config", required=True, help="dataset config JSON")
    common(p, data=False)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a model on an encoded dataset")
    p.add_argument("--config", help="train config JSON (defaults apply when omitted)")
    p.add_argument("--k", type=int, help="override the codebook size")
    p.add_argument("--label-column", help="label column for per-seed purity reports")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="evaluate checkpoints (losses, perplexity, purity)")
    p.add_argument("--model", action="append", required=True, help="checkpoint path (repeatable)")
    p.add_argument("--label-column", help="label column for purity")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sample", help="draw an audit sample")
    p.add_argument("--method", required=True,
                   choices=["vq", "random", "systematic", "stratified", "mus"])
    p.add_argument("--model", help="checkpoint path (vq method)")
    p.add_argument("--n", type=int, default=1, help="sample size (baseline methods)")
    p.add_argument("--top-r", type=int, default=1, help="records per embedding (vq method)")
    p.add_argument("--strata-column", help="stratum attribute (stratified method)")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate", help="project audited amounts onto the population")
    p.add_argument("--method", required=True, choices=["difference", "ratio", "mpu"])
    p.add_argument("--pairs", required=True, help="CSV with recorded,audited columns")
    p.add_argument("--population-size", type=int)
    p.add_argument("--population-total", type=float)
    common(p, data=False)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("metrics", help="disentanglement metrics for a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--factors", required=True, help="comma-separated attribute names")
    common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export-latent", help="latent scatter data plus codebook positions")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--label-column", help="label column to attach to each row")
    common(p)
    p.set_defaults(func=cmd_export_latent)
    return parser


def main(argv: list[str] | None = None) -> int:
    global _RUN_STARTED
    _RUN_STARTED = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except SchemaMismatchError as exc:
        return _fail("schema-mismatch", str(exc), EXIT_SCHEMA)
    except TrainingDivergenceError as exc:
        return _fail("divergence", str(exc), EXIT_DIVERGED)
    except (FormatError, CheckpointError, ContractViolationError) as exc:
        return _fail("format", str(exc), EXIT_FORMAT)
    except IoError as exc:
        return _fail("io", str(exc), EXIT_IO)
    except (ShapeError, ValueError, KeyError) as exc:
        return _fail("invalid-argument", str(exc), EXIT_INVALID)


if __name__ == "__main__":
    sys.exit(main())
