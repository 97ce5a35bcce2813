"""Mini-batch training loop, checkpointing and multi-seed runs."""

from __future__ import annotations

import csv
import json
import os
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import vqvae
from .errors import CheckpointError, ConfigError, FormatError, TrainingDivergenceError
from .ingest import EncodedDataset
from .nncore import AdamState, DenseLayer, adam_step
from .vqvae import Codebook, LossWeights, QuantizationReport, VqVaeModel

CHECKPOINT_FORMAT = "vqaudit-checkpoint-1"


@dataclass
class TrainConfig:
    """Every training knob, JSON round-trippable; unknown keys are rejected."""

    codebook_size: int = 8
    latent_dim: int = 2
    max_epochs: int = 4000
    batch_size: int = 128
    lrelu_slope: float = 0.4
    ema_decay: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    learning_rate: float = 1e-3
    adam_epsilon: float = 1e-8
    embed_weight: float = 1.0
    commit_weight: float = 0.25
    encoder_recon_weight: float = 1.0
    ema_enabled: bool = True
    patience: int = 50
    min_delta: float = 1e-4
    seed: int = 0
    precision: str = "float64"
    first_layer_width: int | None = None
    restart_dead_embeddings: bool = False

    def __post_init__(self):
        if not 2 <= self.codebook_size <= 2 ** 16:
            raise ConfigError("codebook_size must be in [2, 65536]")
        if self.latent_dim < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("latent_dim, max_epochs and batch_size must be >= 1")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ConfigError("lrelu_slope must be in (0, 1)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ConfigError("learning_rate and adam_epsilon must be > 0")
        if min(self.embed_weight, self.commit_weight, self.encoder_recon_weight) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.patience < 1 or self.min_delta < 0:
            raise ConfigError("patience must be >= 1 and min_delta >= 0")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be float64 or float32")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha=self.embed_weight,
            beta=self.commit_weight,
            gamma=self.encoder_recon_weight,
            ema_enabled=self.ema_enabled,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid train config JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("train config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read train config {path}: {exc}") from exc


@dataclass
class TrainLogRecord:
    epoch: int
    recon_q: float
    embed: float
    commit: float
    recon_e: float
    total: float
    perplexity: float
    usage_counts: list[int]
    seconds: float


@dataclass
class TrainLog:
    records: list[TrainLogRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "recon_q", "commit", "recon_e", "total", "perplexity", "seconds"]
            )
            for r in self.records:
                writer.writerow(
                    [r.epoch, f"{r.recon_q:.8g}", f"{r.commit:.8g}", f"{r.recon_e:.8g}",
                     f"{r.total:.8g}", f"{r.perplexity:.8g}", f"{r.seconds:.4f}"]
                )


def train(dataset: EncodedDataset, config: TrainConfig) -> tuple[VqVaeModel, TrainLog]:
    """Train a fresh model on the dataset.

    Rows are re-shuffled every epoch from a per-epoch generator derived from
    the master seed; the codebook is refreshed by EMA once per mini-batch
    (when enabled); early stopping fires after ``patience`` consecutive
    epochs without a relative total-loss improvement of ``min_delta``.
    """
    rng = np.random.default_rng(config.seed)
    model = vqvae.build_model(
        input_width=dataset.width,
        codebook_size=config.codebook_size,
        rng=rng,
        latent_dim=config.latent_dim,
        lrelu_slope=config.lrelu_slope,
        first_width=config.first_layer_width,
        decay=config.ema_decay,
        loss_weights=config.loss_weights(),
        schema_hash=dataset.schema.hash(),
    )
    dtype = np.float64 if config.precision == "float64" else np.float32
    matrix = dataset.matrix.astype(dtype, copy=False)
    if dtype is np.float32:
        _cast_model(model, dtype)

    params = model.parameters()
    train_codebook_by_grad = not config.ema_enabled
    if train_codebook_by_grad:
        params = params + [model.codebook.embeddings]
    adam = AdamState.init_like(
        params,
        learning_rate=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        epsilon=config.adam_epsilon,
    )

    log = TrainLog()
    n = matrix.shape[0]
    best = np.inf
    stale_epochs = 0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = {"recon_q": 0.0, "embed": 0.0, "commit": 0.0, "recon_e": 0.0}
        counts = np.zeros(config.codebook_size, dtype=np.int64)
        try:
            for lo in range(0, n, config.batch_size):
                batch = matrix[order[lo : lo + config.batch_size]]
                fb = vqvae.forward_backward(model, batch)
                grads = fb.encoder_grads.arrays() + fb.decoder_grads.arrays()
                if train_codebook_by_grad:
                    grads = grads + [
                        fb.codebook_grad
                        if fb.codebook_grad is not None
                        else np.zeros_like(model.codebook.embeddings)
                    ]
                new_params, adam = adam_step(params, grads, adam)
                model.set_parameters(new_params[: 2 * (len(model.encoder) + len(model.decoder))])
                if train_codebook_by_grad:
                    model.codebook.embeddings = new_params[-1]
                params = new_params
                if config.ema_enabled:
                    vqvae.ema_update(model.codebook, fb.assignment.latents, fb.assignment.indices)
                m = batch.shape[0]
                for key in sums:
                    sums[key] += getattr(fb.parts, key) * m
                counts += np.bincount(fb.assignment.indices, minlength=config.codebook_size)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(
                f"training diverged at epoch {epoch}: {exc}", model=model, epoch=epoch
            ) from exc

        if config.restart_dead_embeddings:
            _restart_dead(model.codebook, counts, fb.assignment.latents, rng)

        means = {k: v / n for k, v in sums.items()}
        total = sum(means.values())
        log.records.append(
            TrainLogRecord(
                epoch=epoch,
                recon_q=means["recon_q"],
                embed=means["embed"],
                commit=means["commit"],
                recon_e=means["recon_e"],
                total=total,
                perplexity=vqvae.perplexity(counts),
                usage_counts=counts.tolist(),
                seconds=time.perf_counter() - t0,
            )
        )
        if not np.isfinite(best) or best - total > config.min_delta * max(abs(best), 1e-12):
            best = total
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                log.stopped_early = True
                break
    return model, log


def _cast_model(model: VqVaeModel, dtype) -> None:
    for layer in model.encoder + model.decoder:
        layer.weights = layer.weights.astype(dtype)
        layer.bias = layer.bias.astype(dtype)
    model.codebook.embeddings = model.codebook.embeddings.astype(dtype)
    model.codebook.ema_sums = model.codebook.ema_sums.astype(dtype)
    model.codebook.ema_counts = model.codebook.ema_counts.astype(dtype)


def _restart_dead(codebook: Codebook, epoch_counts: np.ndarray, latents: np.ndarray,
                  rng: np.random.Generator) -> None:
    dead = np.flatnonzero(epoch_counts == 0)
    if dead.size == 0 or latents.shape[0] == 0:
        return
    picks = rng.integers(0, latents.shape[0], size=dead.size)
    codebook.embeddings[dead] = latents[picks]
    codebook.ema_sums[dead] = latents[picks]
    codebook.ema_counts[dead] = 1.0


def checkpoint_save(model: VqVaeModel, path: str | Path, config: TrainConfig | None = None) -> None:
    """Atomic single-file checkpoint; round-trips every array bitwise."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "schema_hash": model.schema_hash,
        "encoder": [
            {"activation": l.activation, "lrelu_slope": l.lrelu_slope,
             "in": l.in_size, "out": l.out_size}
            for l in model.encoder
        ],
        "decoder": [
            {"activation": l.activation, "lrelu_slope": l.lrelu_slope,
             "in": l.in_size, "out": l.out_size}
            for l in model.decoder
        ],
        "loss_weights": asdict(model.loss_weights),
        "decay": model.codebook.decay,
        "train_config": json.loads(config.to_json()) if config is not None else None,
    }
    arrays: dict[str, np.ndarray] = {"meta": np.array(json.dumps(meta))}
    for i, layer in enumerate(model.encoder):
        arrays[f"enc_w_{i}"] = layer.weights
        arrays[f"enc_b_{i}"] = layer.bias
    for i, layer in enumerate(model.decoder):
        arrays[f"dec_w_{i}"] = layer.weights
        arrays[f"dec_b_{i}"] = layer.bias
    arrays["cb_embeddings"] = model.codebook.embeddings
    arrays["cb_ema_counts"] = model.codebook.ema_counts
    arrays["cb_ema_sums"] = model.codebook.ema_sums
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def checkpoint_load(path: str | Path) -> VqVaeModel:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    with data:
        try:
            meta = json.loads(str(data["meta"]))
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint {path} has no readable metadata") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"unsupported checkpoint format {meta.get('format')!r}"
            )
        try:
            encoder = [
                DenseLayer(
                    weights=data[f"enc_w_{i}"], bias=data[f"enc_b_{i}"],
                    activation=spec["activation"], lrelu_slope=spec["lrelu_slope"],
                )
                for i, spec in enumerate(meta["encoder"])
            ]
            decoder = [
                DenseLayer(
                    weights=data[f"dec_w_{i}"], bias=data[f"dec_b_{i}"],
                    activation=spec["activation"], lrelu_slope=spec["lrelu_slope"],
                )
                for i, spec in enumerate(meta["decoder"])
            ]
            codebook = Codebook(
                embeddings=data["cb_embeddings"],
                ema_counts=data["cb_ema_counts"],
                ema_sums=data["cb_ema_sums"],
                decay=meta["decay"],
            )
        except KeyError as exc:
            raise FormatError(f"checkpoint {path} is missing array {exc}") from exc
    return VqVaeModel(
        encoder=encoder,
        decoder=decoder,
        codebook=codebook,
        loss_weights=LossWeights(**meta["loss_weights"]),
        schema_hash=meta.get("schema_hash"),
    )


def checkpoint_config(path: str | Path) -> TrainConfig | None:
    """Training-config snapshot stored in a checkpoint, if any."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    snap = meta.get("train_config")
    return TrainConfig(**snap) if snap else None


@dataclass
class SeedRun:
    seed: int
    status: str  # "ok" | "failed: <reason>"
    model: VqVaeModel | None
    log: TrainLog | None
    report: QuantizationReport | None


@dataclass
class MultiSeedResult:
    runs: list[SeedRun]

    def aggregate(self) -> dict[str, dict[str, float]]:
        """Mean and standard deviation per metric over the successful runs."""
        out: dict[str, dict[str, float]] = {}
        good = [r.report for r in self.runs if r.report is not None]
        for metric in ("recon_q", "recon_e", "perplexity", "purity"):
            values = [getattr(rep, metric) for rep in good]
            values = [v for v in values if v is not None]
            if values:
                arr = np.array(values, dtype=np.float64)
                out[metric] = {"mean": float(arr.mean()), "std": float(arr.std())}
        return out


def multi_seed_run(
    dataset: EncodedDataset,
    config: TrainConfig,
    seeds: list[int],
    label_column: str | None = None,
    jobs: int = 1,
) -> MultiSeedResult:
    """Independent training runs, one per seed; failures are isolated."""
    if not seeds:
        raise ValueError("multi_seed_run requires at least one seed")

    def run_one(seed: int) -> SeedRun:
        try:
            model, log = train(dataset, replace(config, seed=seed))
            report = vqvae.evaluate(model, dataset, label_column=label_column)
            report.seed = seed
            return SeedRun(seed=seed, status="ok", model=model, log=log, report=report)
        except Exception as exc:  # noqa: BLE001 - per-seed isolation is the contract
            return SeedRun(seed=seed, status=f"failed: {exc}", model=None, log=None, report=None)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(run_one, seeds))
    else:
        runs = [run_one(s) for s in seeds]
    return MultiSeedResult(runs=runs)
