"""Vector-quantized autoencoder: codebook, losses, gradient routing, metrics.

The encoder maps a one-hot row to a low-dimensional latent, the codebook
snaps it to the nearest embedding, and the decoder reconstructs the row from
either the quantized or the raw latent. Reconstruction losses are
per-dimension mean squared errors; the embedding and commitment terms are raw
squared L2 norms over the latent dimensions, averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import SchemaMismatchError, ShapeError, TrainingDivergenceError
from .ingest import EncodedDataset
from .nncore import DenseLayer, Gradients, backward_mlp, forward_mlp, glorot_init

EMA_COUNT_FLOOR = 1e-5
QUANTIZE_CHUNK = 8192


@dataclass
class Codebook:
    """K discrete embedding rows with EMA bookkeeping.

    ``ema_counts`` starts at one phantom unit per row and ``ema_sums`` at the
    initial embedding values, so a never-used row keeps its position while its
    state decays instead of snapping to the origin on the first update.
    """

    embeddings: np.ndarray  # (K, D)
    ema_counts: np.ndarray  # (K,)
    ema_sums: np.ndarray    # (K, D)
    decay: float = 0.95

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeError("codebook must be a non-empty (K, D) matrix")
        self.ema_counts = np.asarray(self.ema_counts)
        self.ema_sums = np.asarray(self.ema_sums)
        if self.ema_counts.shape != (self.size,) or self.ema_sums.shape != self.embeddings.shape:
            raise ShapeError("EMA buffers must match the embedding matrix")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("EMA decay must be in (0, 1)")
        if not np.all(np.isfinite(self.ema_counts)) or np.any(self.ema_counts < 0):
            raise ValueError("EMA counts must be finite and non-negative")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def init(cls, size: int, dim: int, rng: np.random.Generator, decay: float = 0.95) -> "Codebook":
        """Embeddings drawn uniformly from (-1, 1)."""
        emb = rng.uniform(-1.0, 1.0, size=(size, dim))
        return cls(
            embeddings=emb,
            ema_counts=np.ones(size),
            ema_sums=emb.copy(),
            decay=decay,
        )


@dataclass
class LossWeights:
    """Weights of the four loss terms.

    ``alpha`` scales the embedding loss and is unused while ``ema_enabled``
    (the codebook then trains by moving averages, not by gradient); ``beta``
    scales the commitment term and ``gamma`` the latent-path reconstruction.
    """

    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 1.0
    ema_enabled: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class Assignment:
    """Per-row quantization outcome for a batch."""

    indices: np.ndarray   # (N,) int
    latents: np.ndarray   # (N, D) encoder outputs
    quantized: np.ndarray  # (N, D), exact codebook rows


@dataclass
class LossParts:
    recon_q: float
    embed: float
    commit: float
    recon_e: float

    @property
    def total(self) -> float:
        return self.recon_q + self.embed + self.commit + self.recon_e

    def as_dict(self) -> dict[str, float]:
        return {
            "recon_q": self.recon_q,
            "embed": self.embed,
            "commit": self.commit,
            "recon_e": self.recon_e,
            "total": self.total,
        }


@dataclass
class VqVaeModel:
    encoder: list[DenseLayer]
    decoder: list[DenseLayer]
    codebook: Codebook
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schema_hash: str | None = None

    def __post_init__(self):
        if self.encoder[-1].out_size != self.codebook.dim:
            raise ShapeError("encoder output width must equal the codebook dimension")
        if self.decoder[0].in_size != self.codebook.dim:
            raise ShapeError("decoder input width must equal the codebook dimension")
        if self.decoder[-1].out_size != self.encoder[0].in_size:
            raise ShapeError("decoder output width must equal the encoder input width")

    @property
    def input_width(self) -> int:
        return self.encoder[0].in_size

    @property
    def latent_dim(self) -> int:
        return self.codebook.dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.encoder + self.decoder:
            out.extend((layer.weights, layer.bias))
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        it = iter(params)
        for layer in self.encoder + self.decoder:
            layer.weights = next(it)
            layer.bias = next(it)

    def require_schema(self, dataset: EncodedDataset) -> None:
        if dataset.width != self.input_width:
            raise ShapeError(
                f"dataset width {dataset.width} != model input width {self.input_width}"
            )
        if self.schema_hash is not None and self.schema_hash != dataset.schema.hash():
            raise SchemaMismatchError(
                f"model schema hash {self.schema_hash} != dataset {dataset.schema.hash()}"
            )


def hidden_widths(input_width: int, latent_dim: int, first_width: int | None = None) -> list[int]:
    """Layer width schedule: a verbatim first width, then strict halving.

    The default first width is the largest power of two not above half the
    input; the rest of the schedule halves from the largest power of two at
    or below half the first width, down to the latent bottleneck.
    """
    if input_width <= latent_dim:
        raise ValueError("input width must exceed the latent dimension")
    if first_width is None:
        first_width = 2 ** int(np.floor(np.log2(max(input_width / 2, latent_dim * 2))))
    if first_width <= latent_dim:
        raise ValueError("first width must exceed the latent dimension")
    widths = [int(first_width)]
    w = 2 ** int(np.floor(np.log2(first_width / 2)))
    while w > latent_dim:
        widths.append(w)
        w //= 2
    widths.append(latent_dim)
    return widths


def build_model(
    input_width: int,
    codebook_size: int,
    rng: np.random.Generator,
    latent_dim: int = 2,
    lrelu_slope: float = 0.4,
    first_width: int | None = None,
    widths: list[int] | None = None,
    decay: float = 0.95,
    loss_weights: LossWeights | None = None,
    schema_hash: str | None = None,
) -> VqVaeModel:
    """Glorot-initialized encoder/decoder mirror pair plus a fresh codebook.

    The encoder uses leaky-ReLU activations except the bottleneck layer,
    which is linear; the decoder mirrors the encoder with a sigmoid output.
    """
    ws = list(widths) if widths is not None else hidden_widths(input_width, latent_dim, first_width)
    if ws[-1] != latent_dim:
        raise ShapeError("width schedule must end at the latent dimension")
    enc_sizes = [input_width] + ws
    dec_sizes = list(reversed(enc_sizes))

    def make_stack(sizes: list[int], final_activation: str) -> list[DenseLayer]:
        layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            layers.append(
                DenseLayer(
                    weights=glorot_init(sizes[i], sizes[i + 1], rng),
                    bias=np.zeros(sizes[i + 1]),
                    activation=final_activation if last else "lrelu",
                    lrelu_slope=lrelu_slope,
                )
            )
        return layers

    return VqVaeModel(
        encoder=make_stack(enc_sizes, "identity"),
        decoder=make_stack(dec_sizes, "sigmoid"),
        codebook=Codebook.init(codebook_size, latent_dim, rng, decay=decay),
        loss_weights=loss_weights if loss_weights is not None else LossWeights(),
        schema_hash=schema_hash,
    )


def encode(model: VqVaeModel, x: np.ndarray) -> np.ndarray:
    """Encoder latent(s) for one row or a batch of rows."""
    return forward_mlp(model.encoder, x)[0]


def decode(model: VqVaeModel, z: np.ndarray) -> np.ndarray:
    """Decoder reconstruction(s); all outputs lie strictly inside (0, 1)."""
    return forward_mlp(model.decoder, z)[0]


def quantize(codebook: Codebook, z: np.ndarray) -> tuple[np.ndarray | int, np.ndarray]:
    """Nearest-embedding lookup; ties break toward the lowest index.

    Returns ``(index, codebook row)`` for a single latent or
    ``(indices, rows)`` for a batch. Rows are exact copies of codebook rows.
    """
    zb, squeeze = nncore._as_batch(z)
    if zb.shape[1] != codebook.dim:
        raise ShapeError(f"latent width {zb.shape[1]} != codebook dim {codebook.dim}")
    if not np.all(np.isfinite(zb)):
        raise ValueError("latents must be finite for quantization")
    indices = np.empty(zb.shape[0], dtype=np.int64)
    for lo in range(0, zb.shape[0], QUANTIZE_CHUNK):
        chunk = zb[lo : lo + QUANTIZE_CHUNK]
        diff = chunk[:, None, :] - codebook.embeddings[None, :, :]
        dists = np.sum(diff * diff, axis=-1)
        indices[lo : lo + chunk.shape[0]] = np.argmin(dists, axis=1)
    quantized = codebook.embeddings[indices]
    if squeeze:
        return int(indices[0]), quantized[0]
    return indices, quantized


def posterior_onehot(codebook: Codebook, z: np.ndarray) -> np.ndarray:
    """One-hot posterior over the codebook: 1 at the quantize index."""
    zb, squeeze = nncore._as_batch(z)
    indices, _ = quantize(codebook, zb)
    onehot = np.zeros((zb.shape[0], codebook.size))
    onehot[np.arange(zb.shape[0]), indices] = 1.0
    return onehot[0] if squeeze else onehot


def _sq_norm_rows(d: np.ndarray) -> np.ndarray:
    return np.sum(d * d, axis=-1)


def loss(model: VqVaeModel, batch: np.ndarray) -> LossParts:
    """The four training terms for a batch, each averaged over the batch."""
    xb, _ = nncore._as_batch(batch)
    if xb.shape[0] == 0:
        raise ValueError("loss requires a non-empty batch")
    w = model.loss_weights
    z_e = encode(model, xb)
    _, z_q = quantize(model.codebook, z_e)
    x_hat_q = decode(model, z_q)
    recon_q = nncore.mse_loss(xb, x_hat_q)
    embed = 0.0 if w.ema_enabled else w.alpha * float(np.mean(_sq_norm_rows(z_e - z_q)))
    commit = w.beta * float(np.mean(_sq_norm_rows(z_e - z_q)))
    recon_e = w.gamma * nncore.mse_loss(xb, decode(model, z_e)) if w.gamma > 0 else 0.0
    return LossParts(recon_q=recon_q, embed=embed, commit=commit, recon_e=recon_e)


@dataclass
class ForwardBackward:
    """Loss parts plus every gradient a training step needs."""

    parts: LossParts
    encoder_grads: Gradients
    decoder_grads: Gradients
    codebook_grad: np.ndarray | None
    assignment: Assignment


def forward_backward(model: VqVaeModel, batch: np.ndarray) -> ForwardBackward:
    """Forward pass plus hand-routed backward pass.

    The quantization step is bypassed in the backward direction: the gradient
    arriving at the decoder input is copied verbatim onto the encoder output
    (straight-through), then the commitment and latent-path reconstruction
    gradients are added. The codebook never receives reconstruction gradient;
    it gets an embedding-loss gradient only when EMA updates are disabled.
    """
    xb, _ = nncore._as_batch(batch)
    n = xb.shape[0]
    if n == 0:
        raise ValueError("forward_backward requires a non-empty batch")
    w = model.loss_weights

    z_e, enc_cache = forward_mlp(model.encoder, xb)
    indices, z_q = quantize(model.codebook, z_e)
    x_hat_q, dec_cache_q = forward_mlp(model.decoder, z_q)

    recon_q = nncore.mse_loss(xb, x_hat_q)
    dec_grads, d_zq = backward_mlp(model.decoder, dec_cache_q, nncore.mse_grad(xb, x_hat_q))

    # Straight-through copy: d loss / d z_e starts as the decoder-input gradient.
    d_ze = d_zq.copy()

    recon_e = 0.0
    if w.gamma > 0:
        x_hat_e, dec_cache_e = forward_mlp(model.decoder, z_e)
        recon_e = w.gamma * nncore.mse_loss(xb, x_hat_e)
        dec_grads_e, d_ze_recon = backward_mlp(
            model.decoder, dec_cache_e, w.gamma * nncore.mse_grad(xb, x_hat_e)
        )
        dec_grads.add_(dec_grads_e)
        d_ze += d_ze_recon

    delta = z_e - z_q
    commit = w.beta * float(np.mean(_sq_norm_rows(delta)))
    if w.beta > 0:
        d_ze += (2.0 * w.beta / n) * delta

    enc_grads, _ = backward_mlp(model.encoder, enc_cache, d_ze)

    embed = 0.0
    codebook_grad = None
    if not w.ema_enabled and w.alpha > 0:
        embed = w.alpha * float(np.mean(_sq_norm_rows(delta)))
        codebook_grad = np.zeros_like(model.codebook.embeddings)
        np.add.at(codebook_grad, indices, (-2.0 * w.alpha / n) * delta)

    parts = LossParts(recon_q=recon_q, embed=embed, commit=commit, recon_e=recon_e)
    if not np.isfinite(parts.total) or not np.all(np.isfinite(z_e)):
        raise TrainingDivergenceError("non-finite loss in forward_backward", model=model)
    return ForwardBackward(
        parts=parts,
        encoder_grads=enc_grads,
        decoder_grads=dec_grads,
        codebook_grad=codebook_grad,
        assignment=Assignment(indices=indices, latents=z_e, quantized=z_q),
    )


def ema_update(codebook: Codebook, latents: np.ndarray, indices: np.ndarray) -> Codebook:
    """Exponential-moving-average codebook step for one mini-batch.

    Counts and assigned-latent sums decay by the codebook's decay factor and
    absorb the batch totals; each embedding is the ratio of its smoothed sum
    to its smoothed count (floored to avoid division by zero).
    """
    latents = np.asarray(latents)
    indices = np.asarray(indices)
    if latents.shape[0] != indices.shape[0]:
        raise ShapeError("latents and assignments must have the same length")
    counts = np.bincount(indices, minlength=codebook.size).astype(np.float64)
    sums = np.zeros_like(codebook.ema_sums)
    np.add.at(sums, indices, latents)
    eta = codebook.decay
    codebook.ema_counts = eta * codebook.ema_counts + (1.0 - eta) * counts
    codebook.ema_sums = eta * codebook.ema_sums + (1.0 - eta) * sums
    codebook.embeddings = codebook.ema_sums / np.maximum(
        codebook.ema_counts, EMA_COUNT_FLOOR
    )[:, None]
    return codebook


def perplexity(counts: np.ndarray) -> float:
    """Two to the entropy (bits) of the assignment distribution; in [1, K]."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ValueError("counts must be a non-negative 1-D vector")
    total = counts.sum()
    if total <= 0:
        raise ValueError("perplexity requires at least one assigned row")
    p = counts[counts > 0] / total
    entropy_bits = float(-np.sum(p * np.log2(p)))
    return float(2.0 ** entropy_bits)


def purity(indices: np.ndarray, labels: np.ndarray) -> float:
    """Mean majority-label share over the non-empty clusters; in (0, 1]."""
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    if indices.shape[0] != labels.shape[0]:
        raise ShapeError("assignments and labels must have the same length")
    if indices.size == 0:
        raise ValueError("purity requires at least one labelled row")
    shares = []
    for k in np.unique(indices):
        cluster = labels[indices == k]
        _, label_counts = np.unique(cluster, return_counts=True)
        shares.append(label_counts.max() / cluster.size)
    return float(np.mean(shares))


@dataclass
class QuantizationReport:
    """Full-dataset evaluation of a trained model."""

    n_rows: int
    codebook_size: int
    recon_q: float
    recon_e: float
    commit: float
    perplexity: float
    purity: float | None
    assignment_counts: list[int]
    label_column: str | None = None
    seed: int | None = None

    def as_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "codebook_size": self.codebook_size,
            "recon_q": self.recon_q,
            "recon_e": self.recon_e,
            "commit": self.commit,
            "perplexity": self.perplexity,
            "purity": self.purity,
            "assignment_counts": self.assignment_counts,
            "label_column": self.label_column,
            "seed": self.seed,
        }


def batched_latents(model: VqVaeModel, matrix: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    out = np.empty((matrix.shape[0], model.latent_dim))
    for lo in range(0, matrix.shape[0], batch_size):
        out[lo : lo + batch_size] = encode(model, matrix[lo : lo + batch_size])
    return out


def evaluate(
    model: VqVaeModel,
    dataset: EncodedDataset,
    label_column: str | None = None,
    batch_size: int = 4096,
) -> QuantizationReport:
    """Reconstruction losses, perplexity and (optionally) purity on a dataset."""
    model.require_schema(dataset)
    n = dataset.n_rows
    counts = np.zeros(model.codebook.size, dtype=np.int64)
    sq_err_q = 0.0
    sq_err_e = 0.0
    commit_sum = 0.0
    all_indices = np.empty(n, dtype=np.int64)
    for lo in range(0, n, batch_size):
        xb = dataset.matrix[lo : lo + batch_size]
        z_e = encode(model, xb)
        idx, z_q = quantize(model.codebook, z_e)
        all_indices[lo : lo + xb.shape[0]] = idx
        counts += np.bincount(idx, minlength=model.codebook.size)
        sq_err_q += float(np.sum((xb - decode(model, z_q)) ** 2))
        sq_err_e += float(np.sum((xb - decode(model, z_e)) ** 2))
        commit_sum += float(np.sum(_sq_norm_rows(z_e - z_q)))
    pur = None
    if label_column is not None:
        pur = purity(all_indices, dataset.labels(label_column))
    return QuantizationReport(
        n_rows=n,
        codebook_size=model.codebook.size,
        recon_q=sq_err_q / (n * dataset.width),
        recon_e=sq_err_e / (n * dataset.width),
        commit=model.loss_weights.beta * commit_sum / n,
        perplexity=perplexity(counts),
        purity=pur,
        assignment_counts=counts.tolist(),
        label_column=label_column,
    )
