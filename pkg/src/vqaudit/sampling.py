"""Audit-sample extraction from a trained model, plus classical baselines.

The model-driven sample picks, for every embedding that quantizes at least
one record, the real record whose latent lies closest to that embedding. The
baselines implement the standard attribute-sampling schemes (random,
systematic, stratified) and fixed-interval monetary-unit sampling; the three
point estimators project audited amounts onto the population.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vqvae
from .ingest import EncodedDataset
from .vqvae import VqVaeModel


@dataclass
class AuditRecord:
    embedding_index: int
    row_id: object
    distance: float
    cluster_size: int
    cluster_share: float
    raw: dict[str, str]


@dataclass
class AuditSample:
    """Representative records, one (or ``top_r``) per used embedding."""

    records: list[AuditRecord]
    n_rows: int
    codebook_size: int
    used_embeddings: int

    def row_ids(self) -> list:
        return [r.row_id for r in self.records]

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_rows": self.n_rows,
                "codebook_size": self.codebook_size,
                "used_embeddings": self.used_embeddings,
                "records": [
                    {
                        "embedding_index": r.embedding_index,
                        "row_id": r.row_id,
                        "distance": r.distance,
                        "cluster_size": r.cluster_size,
                        "cluster_share": r.cluster_share,
                        "raw": r.raw,
                    }
                    for r in self.records
                ],
            },
            indent=2,
            default=str,
        )

    def to_csv(self, path: str | Path) -> None:
        raw_columns = list(self.records[0].raw) if self.records else []
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["embedding_index", "row_id", "distance", "cluster_size", "cluster_share"]
                + raw_columns
            )
            for r in self.records:
                writer.writerow(
                    [r.embedding_index, r.row_id, f"{r.distance:.8g}", r.cluster_size,
                     f"{r.cluster_share:.8g}"] + [r.raw.get(c, "") for c in raw_columns]
                )


def extract_audit_sample(
    model: VqVaeModel, dataset: EncodedDataset, top_r: int = 1
) -> AuditSample:
    """Latent-nearest real record(s) per used embedding.

    Ties on distance break toward the lowest row id; embeddings that quantize
    no record are omitted from the records but reflected in the counts.
    """
    if top_r < 1:
        raise ValueError("top_r must be >= 1")
    model.require_schema(dataset)
    latents = vqvae.batched_latents(model, dataset.matrix)
    indices, quantized = vqvae.quantize(model.codebook, latents)
    distances = np.sqrt(np.sum((latents - quantized) ** 2, axis=1))
    records: list[AuditRecord] = []
    used = np.unique(indices)
    n = dataset.n_rows
    for k in used:
        members = np.flatnonzero(indices == k)
        ranked = sorted(members, key=lambda i: (distances[i], dataset.row_ids[i]))
        for i in ranked[:top_r]:
            records.append(
                AuditRecord(
                    embedding_index=int(k),
                    row_id=dataset.row_ids[i],
                    distance=float(distances[i]),
                    cluster_size=int(members.size),
                    cluster_share=float(members.size / n),
                    raw=dict(dataset.raw_rows[i]),
                )
            )
    return AuditSample(
        records=records,
        n_rows=n,
        codebook_size=model.codebook.size,
        used_embeddings=int(used.size),
    )


@dataclass
class BaselineSample:
    method: str
    row_ids: list
    params: dict = field(default_factory=dict)
    strata: list | None = None  # parallel to row_ids for stratified draws

    def __post_init__(self):
        if len(set(map(str, self.row_ids))) != len(self.row_ids):
            raise ValueError("selected ids must be distinct")

    def to_json(self) -> str:
        doc = {"method": self.method, "params": self.params, "row_ids": self.row_ids}
        if self.strata is not None:
            doc["strata"] = self.strata
        return json.dumps(doc, indent=2, default=str)


def random_sample(population_ids: list, n: int, seed: int) -> BaselineSample:
    """Uniform draw of ``n`` distinct ids, without replacement."""
    size = len(population_ids)
    if not 1 <= n <= size:
        raise ValueError(f"sample size {n} must be in [1, {size}]")
    rng = np.random.default_rng(seed)
    picks = rng.choice(size, size=n, replace=False)
    return BaselineSample(
        method="random",
        row_ids=[population_ids[i] for i in picks],
        params={"n": n, "seed": seed},
    )


def systematic_sample(
    ordered_ids: list, n: int, seed: int, start: int | None = None
) -> BaselineSample:
    """Every ``interval``-th id from a random start, ``interval = N // n``.

    ``start`` can be pinned for exhaustive checks; otherwise it is drawn
    uniformly from ``[0, interval)``.
    """
    size = len(ordered_ids)
    if not 1 <= n <= size:
        raise ValueError(f"sample size {n} must be in [1, {size}]")
    interval = size // n
    if start is None:
        start = int(np.random.default_rng(seed).integers(0, interval))
    if not 0 <= start < interval:
        raise ValueError(f"start must be in [0, {interval})")
    positions = [start + i * interval for i in range(n)]
    return BaselineSample(
        method="systematic",
        row_ids=[ordered_ids[p] for p in positions],
        params={"n": n, "seed": seed, "interval": interval, "start": start},
    )


def proportional_allocation(strata_sizes: dict, n: int) -> dict:
    """Largest-remainder rounding of proportional quotas to a total of ``n``."""
    total = sum(strata_sizes.values())
    if n < 1 or n > total:
        raise ValueError(f"total allocation {n} must be in [1, {total}]")
    keys = sorted(strata_sizes)
    quotas = {k: n * strata_sizes[k] / total for k in keys}
    alloc = {k: int(np.floor(quotas[k])) for k in keys}
    remaining = n - sum(alloc.values())
    by_remainder = sorted(keys, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in by_remainder[:remaining]:
        alloc[k] += 1
    for k in keys:
        alloc[k] = min(alloc[k], strata_sizes[k])
    # any clamped surplus is redistributed to strata with spare capacity
    short = n - sum(alloc.values())
    if short > 0:
        for k in by_remainder:
            room = strata_sizes[k] - alloc[k]
            take = min(room, short)
            alloc[k] += take
            short -= take
            if short == 0:
                break
    return alloc


def stratified_sample(
    population_ids: list, strata_labels: list, allocation: dict, seed: int
) -> BaselineSample:
    """Independent uniform draws within each stratum, per the allocation."""
    if len(population_ids) != len(strata_labels):
        raise ValueError("ids and strata labels must have the same length")
    groups: dict = {}
    for pid, label in zip(population_ids, strata_labels):
        groups.setdefault(label, []).append(pid)
    selected: list = []
    strata: list = []
    for stratum_index, label in enumerate(sorted(groups, key=str)):
        want = allocation.get(label, 0)
        members = groups[label]
        if want > len(members):
            raise ValueError(
                f"allocation {want} exceeds stratum {label!r} size {len(members)}"
            )
        if want == 0:
            continue
        rng = np.random.default_rng([seed, stratum_index])
        picks = rng.choice(len(members), size=want, replace=False)
        selected.extend(members[i] for i in picks)
        strata.extend(label for _ in picks)
    return BaselineSample(
        method="stratified",
        row_ids=selected,
        params={"seed": seed, "allocation": {str(k): v for k, v in allocation.items()}},
        strata=strata,
    )


def mus_sample(
    ids: list, amounts: list, n: int, seed: int, start: float | None = None
) -> BaselineSample:
    """Fixed-interval monetary-unit sampling.

    Every currency unit is a sampling unit: selection points are laid every
    ``total / n`` units from a random start, and each point selects the
    record whose cumulative-amount span contains it. A record at least one
    interval wide is therefore always selected. Duplicate hits collapse, so
    the sample can be smaller than ``n``.
    """
    amounts = np.asarray(amounts, dtype=np.float64)
    if len(ids) != amounts.shape[0]:
        raise ValueError("ids and amounts must have the same length")
    if n < 1:
        raise ValueError("sample size must be >= 1")
    if amounts.size == 0 or np.any(amounts <= 0):
        raise ValueError("monetary-unit sampling requires strictly positive amounts")
    total = float(amounts.sum())
    if total <= 0:
        raise ValueError("population recorded total must be positive")
    interval = total / n
    if start is None:
        start = float(np.random.default_rng(seed).uniform(0.0, interval))
    if not 0.0 <= start < interval:
        raise ValueError(f"start must be in [0, {interval})")
    points = start + interval * np.arange(n)
    cumulative = np.cumsum(amounts)
    hits = np.searchsorted(cumulative, points, side="right")
    hits = np.unique(hits)
    return BaselineSample(
        method="mus",
        row_ids=[ids[i] for i in hits],
        params={"n": n, "seed": seed, "interval": interval, "start": start,
                "population_total": total},
    )


@dataclass
class EstimateReport:
    method: str
    estimate: float
    sample_size: int
    population_size: int | None = None
    population_recorded_total: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.estimate):
            raise ValueError("estimate must be finite")
        if self.population_size is not None and self.sample_size > self.population_size:
            raise ValueError("sample size cannot exceed population size")

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "estimate": self.estimate,
                "sample_size": self.sample_size,
                "population_size": self.population_size,
                "population_recorded_total": self.population_recorded_total,
            },
            indent=2,
        )


def difference_estimate(
    pairs: list[tuple[float, float]], population_size: int, population_recorded_total: float
) -> EstimateReport:
    """Recorded total adjusted by the projected mean audit difference."""
    if not pairs:
        raise ValueError("difference estimation requires at least one pair")
    diffs = [audited - recorded for recorded, audited in pairs]
    estimate = population_recorded_total + population_size * float(np.mean(diffs))
    return EstimateReport(
        method="difference",
        estimate=estimate,
        sample_size=len(pairs),
        population_size=population_size,
        population_recorded_total=population_recorded_total,
    )


def ratio_estimate(
    pairs: list[tuple[float, float]], population_recorded_total: float
) -> EstimateReport:
    """Recorded total scaled by the sample audited-to-recorded ratio."""
    if not pairs:
        raise ValueError("ratio estimation requires at least one pair")
    recorded_sum = float(sum(r for r, _ in pairs))
    if recorded_sum == 0:
        raise ValueError("ratio estimation requires a non-zero recorded sum")
    audited_sum = float(sum(a for _, a in pairs))
    return EstimateReport(
        method="ratio",
        estimate=(audited_sum / recorded_sum) * population_recorded_total,
        sample_size=len(pairs),
        population_recorded_total=population_recorded_total,
    )


def mpu_estimate(audited: list[float], population_size: int) -> EstimateReport:
    """Sample mean audited amount projected onto the population size."""
    if not audited:
        raise ValueError("mean-per-unit estimation requires at least one amount")
    return EstimateReport(
        method="mean_per_unit",
        estimate=population_size * float(np.mean(audited)),
        sample_size=len(audited),
        population_size=population_size,
    )


def export_latents(
    model: VqVaeModel, dataset: EncodedDataset, label_column: str | None = None
) -> tuple[list[dict], list[dict]]:
    """Scatter-plot data: one row per record plus the codebook positions."""
    model.require_schema(dataset)
    latents = vqvae.batched_latents(model, dataset.matrix)
    indices, _ = vqvae.quantize(model.codebook, latents)
    labels = dataset.labels(label_column) if label_column else None
    rows = []
    for i in range(dataset.n_rows):
        row = {"row_id": dataset.row_ids[i]}
        for d in range(model.latent_dim):
            row[f"z{d}"] = float(latents[i, d])
        row["embedding_index"] = int(indices[i])
        row["label"] = str(labels[i]) if labels is not None else ""
        rows.append(row)
    codebook_rows = []
    for k in range(model.codebook.size):
        row = {"index": k}
        for d in range(model.latent_dim):
            row[f"e{d}"] = float(model.codebook.embeddings[k, d])
        codebook_rows.append(row)
    return rows, codebook_rows


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
