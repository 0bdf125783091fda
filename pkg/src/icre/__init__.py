"""Cross-modal (visible-infrared) person re-identification with identity clue refinement."""

from .backbone import BackboneConfig, BNNeck, DualStreamBackbone, GeM, gem_pool
from .dataset import (
    AugmentConfig,
    Manifest,
    Modality,
    SampleRecord,
    SamplerConfig,
    Split,
    augment,
    generate_synthetic,
    load_manifest,
    sample_pk_batch,
)
from .estimator import ICREReID
from .harness import TrainConfig, Trainer, ablate, lr_at, train, train_step
from .losses import LossConfig, compute_centers, icg_loss, id_loss, total_loss, triplet_loss
from .metrics import EvalReport, ProtocolConfig, cmc_map, distance_histograms, pairwise_distances, run_protocol
from .model import ICRENet
from .mpfr import MPFR
from .sdce import SDCE

__version__ = "0.1.0"
