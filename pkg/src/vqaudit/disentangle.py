"""Disentanglement metrics over encoder latents, with their helper models.

Four scores, each in [0, 1]:

* ``beta_vae_score`` - accuracy of a multinomial linear classifier that
  predicts which attribute was held fixed in a batch, from the mean absolute
  latent difference over pairs (Higgins-style).
* ``factor_vae_score`` - accuracy of a majority-vote table from the
  lowest-variance latent dimension of each fixed-attribute batch.
* ``mig_score`` - normalized gap between the two largest mutual informations
  between binned latent dimensions and each attribute.
* ``dci_score`` - disentanglement part of the Eastwood-Williams framework,
  from Gini importances of per-attribute CART trees.

All randomness flows through explicit generators, so scores are reproducible
given (latents, factors, seed, protocol parameters).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import vqvae
from .ingest import EncodedDataset
from .vqvae import VqVaeModel

# ---------------------------------------------------------------------------
# Discrete information measures
# ---------------------------------------------------------------------------


def discrete_entropy(codes: np.ndarray) -> float:
    """Empirical entropy in bits of an integer-coded sample."""
    codes = np.asarray(codes)
    if codes.size == 0:
        raise ValueError("entropy requires at least one sample")
    _, counts = np.unique(codes, return_counts=True)
    p = counts / codes.size
    return float(-np.sum(p * np.log2(p)))


def discrete_mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """Empirical mutual information in bits: H(X) + H(Y) - H(X, Y).

    Exact on discrete inputs, in particular MI(X, X) == H(X).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError("samples must have the same length")
    joint = np.stack([x.astype(np.int64), y.astype(np.int64)], axis=1)
    _, joint_codes = np.unique(joint, axis=0, return_inverse=True)
    return discrete_entropy(x) + discrete_entropy(y) - discrete_entropy(joint_codes)


def bin_latents(latents: np.ndarray, bins: int = 20) -> np.ndarray:
    """Equal-width binning of each latent dimension over its observed range."""
    latents = np.asarray(latents, dtype=np.float64)
    out = np.zeros(latents.shape, dtype=np.int64)
    for d in range(latents.shape[1]):
        col = latents[:, d]
        lo, hi = col.min(), col.max()
        if hi <= lo:
            continue  # constant dimension: single bin 0
        edges = np.linspace(lo, hi, bins + 1)[1:-1]
        out[:, d] = np.searchsorted(edges, col, side="right")
    return out


# ---------------------------------------------------------------------------
# Internal classifiers
# ---------------------------------------------------------------------------


class LinearSoftmaxClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized internally; the iteration budget is fixed so
    runs are deterministic and cheap.
    """

    def __init__(self, n_classes: int, iterations: int = 500, learning_rate: float = 0.5):
        self.n_classes = n_classes
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.weights: np.ndarray | None = None
        self._mean: np.ndarray | None = None
        self._std: np.ndarray | None = None

    def _design(self, features: np.ndarray) -> np.ndarray:
        z = (features - self._mean) / self._std
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def fit(self, features: np.ndarray, targets: np.ndarray) -> "LinearSoftmaxClassifier":
        features = np.asarray(features, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.int64)
        self._mean = features.mean(axis=0)
        self._std = features.std(axis=0)
        self._std = np.where(self._std > 0, self._std, 1.0)
        x = self._design(features)
        n = x.shape[0]
        onehot = np.zeros((n, self.n_classes))
        onehot[np.arange(n), targets] = 1.0
        w = np.zeros((x.shape[1], self.n_classes))
        for _ in range(self.iterations):
            logits = x @ w
            logits -= logits.max(axis=1, keepdims=True)
            exp = np.exp(logits)
            probs = exp / exp.sum(axis=1, keepdims=True)
            w -= self.learning_rate * (x.T @ (probs - onehot)) / n
        self.weights = w
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise RuntimeError("classifier is not fitted")
        return np.argmax(self._design(np.asarray(features, dtype=np.float64)) @ self.weights, axis=1)

    def accuracy(self, features: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean(self.predict(features) == np.asarray(targets)))


class CartTree:
    """CART classifier with Gini splits and impurity-decrease importances.

    Split search is order-independent: candidate thresholds are midpoints of
    consecutive distinct feature values and ties in gain resolve toward the
    lowest feature index, then the lowest threshold. ``feature_importances_``
    holds raw (unnormalized) weighted impurity decreases, which sum to the
    total impurity decrease of the tree.
    """

    def __init__(self, max_depth: int = 8, min_samples_split: int = 2):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.nodes: list[dict] = []
        self.feature_importances_: np.ndarray | None = None
        self._n_total = 0

    @staticmethod
    def _gini(counts: np.ndarray) -> float:
        n = counts.sum()
        if n == 0:
            return 0.0
        p = counts / n
        return float(1.0 - np.sum(p * p))

    def _best_split(self, x: np.ndarray, y: np.ndarray, n_classes: int):
        n = y.shape[0]
        total_counts = np.bincount(y, minlength=n_classes).astype(np.float64)
        parent = self._gini(total_counts)
        best = None  # (gain, feature, threshold)
        for f in range(x.shape[1]):
            col = x[:, f]
            values = np.unique(col)
            if values.size < 2:
                continue
            # class counts per distinct value, accumulated in value order
            pos = np.searchsorted(values, col)
            counts = np.zeros((values.size, n_classes))
            np.add.at(counts, (pos, y), 1.0)
            cum = np.cumsum(counts, axis=0)
            left_counts = cum[:-1]
            left_n = left_counts.sum(axis=1)
            right_counts = total_counts - left_counts
            right_n = n - left_n
            gini_l = 1.0 - np.sum((left_counts / left_n[:, None]) ** 2, axis=1)
            gini_r = 1.0 - np.sum((right_counts / right_n[:, None]) ** 2, axis=1)
            gains = parent - (left_n / n) * gini_l - (right_n / n) * gini_r
            thresholds = (values[:-1] + values[1:]) / 2.0
            for i in range(gains.size):
                if gains[i] <= 0:
                    continue
                cand = (gains[i], f, thresholds[i])
                if best is None or cand[0] > best[0]:
                    best = cand
        return best

    def _build(self, x: np.ndarray, y: np.ndarray, n_classes: int, depth: int) -> int:
        node_id = len(self.nodes)
        self.nodes.append({})
        counts = np.bincount(y, minlength=n_classes).astype(np.float64)
        majority = int(np.argmax(counts))
        if (
            depth >= self.max_depth
            or y.shape[0] < self.min_samples_split
            or np.count_nonzero(counts) <= 1
        ):
            self.nodes[node_id] = {"leaf": True, "value": majority}
            return node_id
        best = self._best_split(x, y, n_classes)
        if best is None:
            self.nodes[node_id] = {"leaf": True, "value": majority}
            return node_id
        gain, feature, threshold = best
        self.feature_importances_[feature] += (y.shape[0] / self._n_total) * gain
        mask = x[:, feature] <= threshold
        left = self._build(x[mask], y[mask], n_classes, depth + 1)
        right = self._build(x[~mask], y[~mask], n_classes, depth + 1)
        self.nodes[node_id] = {
            "leaf": False,
            "feature": int(feature),
            "threshold": float(threshold),
            "left": left,
            "right": right,
            "value": majority,
        }
        return node_id

    def fit(self, x: np.ndarray, y: np.ndarray) -> "CartTree":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n_classes = int(y.max()) + 1 if y.size else 1
        self.nodes = []
        self.feature_importances_ = np.zeros(x.shape[1])
        self._n_total = y.shape[0]
        self._build(x, y, n_classes, depth=0)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0], dtype=np.int64)
        for i in range(x.shape[0]):
            node = self.nodes[0]
            while not node["leaf"]:
                node = self.nodes[node["left"] if x[i, node["feature"]] <= node["threshold"] else node["right"]]
            out[i] = node["value"]
        return out


# ---------------------------------------------------------------------------
# Factor handling
# ---------------------------------------------------------------------------


@dataclass
class FactorSpec:
    """A ground-truth attribute used as a factor, with its coded vocabulary."""

    name: str
    values: list[str]
    truncated: bool = False

    @property
    def n_codes(self) -> int:
        return len(self.values) + (1 if self.truncated else 0)


def code_factors(
    dataset: EncodedDataset, factor_names: list[str], top_values: int = 50
) -> tuple[list[FactorSpec], np.ndarray]:
    """Integer-code the chosen attributes; huge vocabularies keep only the
    ``top_values`` most frequent values and bucket the remainder."""
    specs: list[FactorSpec] = []
    columns: list[np.ndarray] = []
    for name in factor_names:
        raw = dataset.labels(name)
        values, counts = np.unique(raw.astype(str), return_counts=True)
        if values.size < 2:
            raise ValueError(f"factor {name!r} has fewer than 2 distinct values")
        order = np.lexsort((values, -counts))
        kept = sorted(values[order[:top_values]].tolist())
        truncated = values.size > top_values
        index = {v: i for i, v in enumerate(kept)}
        bucket = len(kept)
        codes = np.array([index.get(str(v), bucket) for v in raw], dtype=np.int64)
        specs.append(FactorSpec(name=name, values=kept, truncated=truncated))
        columns.append(codes)
    return specs, np.stack(columns, axis=1)


@dataclass
class ProtocolParams:
    """Pinned evaluation protocol; serialized into every report."""

    batch_size: int = 16
    train_batches: int = 1000
    eval_batches: int = 500
    mi_bins: int = 20
    mi_samples: int = 1000
    tree_depth: int = 8
    classifier_iterations: int = 500
    classifier_learning_rate: float = 0.5
    factor_top_values: int = 50


def fixed_factor_batches(
    factors: np.ndarray,
    batch_size: int,
    count: int,
    rng: np.random.Generator,
):
    """Yield ``count`` pairs ``(factor_index, row_indices)``.

    Each batch fixes one uniformly chosen factor to one uniformly chosen
    value that has at least ``batch_size`` matching rows, then draws the rows
    uniformly without replacement among the matches. Factors with no such
    value are skipped with a warning; if none remain this raises.
    """
    factors = np.asarray(factors)
    n_factors = factors.shape[1]
    eligible: list[tuple[int, list[np.ndarray]]] = []
    for f in range(n_factors):
        pools = []
        for v in np.unique(factors[:, f]):
            rows = np.flatnonzero(factors[:, f] == v)
            if rows.size >= batch_size:
                pools.append(rows)
        if pools:
            eligible.append((f, pools))
        else:
            warnings.warn(f"factor {f} has no value with >= {batch_size} rows; skipped",
                          stacklevel=2)
    if not eligible:
        raise ValueError("no factor has a value with enough rows for a batch")
    for _ in range(count):
        f, pools = eligible[rng.integers(0, len(eligible))]
        rows = pools[rng.integers(0, len(pools))]
        yield f, rng.choice(rows, size=batch_size, replace=False)


# ---------------------------------------------------------------------------
# The four metrics (array-level)
# ---------------------------------------------------------------------------


def beta_vae_score(
    latents: np.ndarray,
    factors: np.ndarray,
    rng: np.random.Generator,
    params: ProtocolParams | None = None,
) -> float:
    """Linear-classifier accuracy at spotting the fixed factor of a batch."""
    params = params or ProtocolParams()
    latents = np.asarray(latents, dtype=np.float64)
    n_factors = factors.shape[1]

    def batch_features(count: int) -> tuple[np.ndarray, np.ndarray]:
        feats = np.empty((count, latents.shape[1]))
        targets = np.empty(count, dtype=np.int64)
        for i, (f, rows) in enumerate(
            fixed_factor_batches(factors, params.batch_size, count, rng)
        ):
            z = latents[rows]
            half = params.batch_size // 2
            feats[i] = np.mean(np.abs(z[:half] - z[half : 2 * half]), axis=0)
            targets[i] = f
        return feats, targets

    train_x, train_y = batch_features(params.train_batches)
    if np.all(train_x.std(axis=0) < 1e-12):
        return 1.0 / n_factors  # degenerate representation: chance level
    clf = LinearSoftmaxClassifier(
        n_classes=n_factors,
        iterations=params.classifier_iterations,
        learning_rate=params.classifier_learning_rate,
    ).fit(train_x, train_y)
    eval_x, eval_y = batch_features(params.eval_batches)
    return clf.accuracy(eval_x, eval_y)


def factor_vae_score(
    latents: np.ndarray,
    factors: np.ndarray,
    rng: np.random.Generator,
    params: ProtocolParams | None = None,
) -> float:
    """Majority-vote accuracy from the least-varying normalized dimension."""
    params = params or ProtocolParams()
    latents = np.asarray(latents, dtype=np.float64)
    global_std = latents.std(axis=0)
    active = global_std > 1e-12
    if not np.any(active):
        return 0.0
    if not np.all(active):
        warnings.warn("zero-variance latent dimensions excluded from the vote",
                      stacklevel=2)
    normalized = latents[:, active] / global_std[active]
    n_factors = factors.shape[1]

    def argmin_dims(count: int) -> tuple[np.ndarray, np.ndarray]:
        dims = np.empty(count, dtype=np.int64)
        targets = np.empty(count, dtype=np.int64)
        for i, (f, rows) in enumerate(
            fixed_factor_batches(factors, params.batch_size, count, rng)
        ):
            dims[i] = int(np.argmin(normalized[rows].var(axis=0)))
            targets[i] = f
        return dims, targets

    dims, targets = argmin_dims(params.train_batches)
    votes = np.zeros((normalized.shape[1], n_factors))
    np.add.at(votes, (dims, targets), 1.0)
    table = np.argmax(votes, axis=1)
    eval_dims, eval_targets = argmin_dims(params.eval_batches)
    return float(np.mean(table[eval_dims] == eval_targets))


def mig_score(
    latents: np.ndarray,
    factors: np.ndarray,
    rng: np.random.Generator,
    params: ProtocolParams | None = None,
) -> float:
    """Mean normalized gap between the top two latent-factor mutual informations."""
    params = params or ProtocolParams()
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    take = min(n, params.mi_samples)
    rows = rng.choice(n, size=take, replace=False)
    binned = bin_latents(latents[rows], bins=params.mi_bins)
    gaps = []
    for f in range(factors.shape[1]):
        y = factors[rows, f]
        h = discrete_entropy(y)
        if h <= 0:
            continue
        mis = np.array(
            [discrete_mutual_information(binned[:, d], y) for d in range(binned.shape[1])]
        )
        top = np.sort(mis)[::-1]
        second = top[1] if top.size > 1 else 0.0
        gaps.append((top[0] - second) / h)
    if not gaps:
        raise ValueError("no factor has positive entropy")
    return float(np.clip(np.mean(gaps), 0.0, 1.0))


def dci_score(
    latents: np.ndarray,
    factors: np.ndarray,
    rng: np.random.Generator,
    params: ProtocolParams | None = None,
) -> float:
    """Eastwood-Williams disentanglement from CART Gini importances."""
    params = params or ProtocolParams()
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    take = min(n, params.train_batches * params.batch_size)
    rows = rng.choice(n, size=take, replace=False)
    x = latents[rows]
    n_factors = factors.shape[1]
    importance = np.zeros((latents.shape[1], n_factors))
    for f in range(n_factors):
        tree = CartTree(max_depth=params.tree_depth).fit(x, factors[rows, f])
        importance[:, f] = tree.feature_importances_
    total = importance.sum()
    if total <= 0:
        warnings.warn("all tree importances are zero; disentanglement undefined",
                      stacklevel=2)
        return 0.0
    col_sums = importance.sum(axis=0)
    r = importance[:, col_sums > 0] / col_sums[col_sums > 0]
    n_cols = r.shape[1]
    row_weights = r.sum(axis=1) / r.sum()
    scores = np.zeros(r.shape[0])
    for d in range(r.shape[0]):
        row = r[d]
        if row.sum() <= 0:
            continue
        p = row / row.sum()
        p = p[p > 0]
        entropy = float(-np.sum(p * np.log(p)))
        normalized = entropy / np.log(n_cols) if n_cols > 1 else 0.0
        scores[d] = 1.0 - normalized
    return float(np.clip(np.sum(row_weights * scores), 0.0, 1.0))


METRICS = {
    "beta_vae": beta_vae_score,
    "factor_vae": factor_vae_score,
    "mig": mig_score,
    "dci": dci_score,
}


@dataclass
class DisentanglementReport:
    """Per-metric scores across seeds, plus the protocol that produced them."""

    scores: dict[str, list[float]]
    seeds: list[int]
    factor_names: list[str]
    protocol: ProtocolParams
    failures: dict[str, str] = field(default_factory=dict)

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for metric, values in self.scores.items():
            if values:
                arr = np.array(values)
                out[metric] = {"mean": float(arr.mean()), "std": float(arr.std())}
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "seeds": self.seeds,
                "factors": self.factor_names,
                "protocol": asdict(self.protocol),
                "scores": self.scores,
                "summary": self.summary(),
                "failures": self.failures,
            },
            indent=2,
        )

    def to_csv_rows(self, dataset_name: str = "", codebook_size: int | None = None) -> list[dict]:
        summary = self.summary()
        row: dict = {"dataset": dataset_name, "codebook_size": codebook_size}
        for metric in METRICS:
            s = summary.get(metric)
            row[metric] = f"{s['mean']:.3f} +/- {s['std']:.2f}" if s else "n/a"
        return [row]


def run_all_metrics(
    latents: np.ndarray,
    factors: np.ndarray,
    seeds: list[int],
    factor_names: list[str] | None = None,
    params: ProtocolParams | None = None,
) -> DisentanglementReport:
    """All four metrics per seed, with per-metric failures isolated."""
    params = params or ProtocolParams()
    if not seeds:
        raise ValueError("run_all_metrics requires at least one seed")
    scores: dict[str, list[float]] = {m: [] for m in METRICS}
    failures: dict[str, str] = {}
    for seed in seeds:
        for metric_index, (name, fn) in enumerate(METRICS.items()):
            rng = np.random.default_rng([seed, metric_index])
            try:
                scores[name].append(float(fn(latents, factors, rng, params)))
            except Exception as exc:  # noqa: BLE001 - isolate metric failures
                failures[f"{name}@seed{seed}"] = str(exc)
    return DisentanglementReport(
        scores=scores,
        seeds=list(seeds),
        factor_names=list(factor_names or []),
        protocol=params,
        failures=failures,
    )


def run_all_metrics_on_model(
    model: VqVaeModel,
    dataset: EncodedDataset,
    factor_names: list[str],
    seeds: list[int],
    params: ProtocolParams | None = None,
) -> DisentanglementReport:
    """Encode the dataset with the model, then score its latents."""
    params = params or ProtocolParams()
    model.require_schema(dataset)
    latents = vqvae.batched_latents(model, dataset.matrix)
    _, factors = code_factors(dataset, factor_names, top_values=params.factor_top_values)
    return run_all_metrics(latents, factors, seeds, factor_names=factor_names, params=params)
