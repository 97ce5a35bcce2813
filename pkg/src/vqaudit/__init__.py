"""Vector-quantized representation learning and audit sampling for payments.

The pipeline: ``ingest`` one-hot encodes raw transaction CSVs, ``trainer``
fits the quantized autoencoder defined in ``vqvae``, ``sampling`` turns the
trained codebook into a representative audit sample (plus the classical
baselines), and ``disentangle`` scores how cleanly the latent dimensions
separate the record attributes. ``nncore`` is the underlying dense-network
numeric core; ``synthetic`` generates benchmark data with known ground truth.
"""

__version__ = "0.1.0"

from . import disentangle, errors, ingest, nncore, sampling, synthetic, trainer, vqvae
from .ingest import AttributeSchema, DatasetConfig, EncodedDataset, JournalEntry
from .sampling import AuditSample, BaselineSample, EstimateReport
from .trainer import TrainConfig, TrainLog
from .vqvae import Codebook, LossWeights, QuantizationReport, VqVaeModel

__all__ = [
    "AttributeSchema",
    "AuditSample",
    "BaselineSample",
    "Codebook",
    "DatasetConfig",
    "EncodedDataset",
    "EstimateReport",
    "JournalEntry",
    "LossWeights",
    "QuantizationReport",
    "TrainConfig",
    "TrainLog",
    "VqVaeModel",
    "__version__",
    "disentangle",
    "errors",
    "ingest",
    "nncore",
    "sampling",
    "synthetic",
    "trainer",
    "vqvae",
]
