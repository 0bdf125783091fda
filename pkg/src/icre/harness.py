"""Training schedule, training loop, checkpoints, evaluation and ablation runs."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, Variant
from .dataset import (
    AugmentConfig,
    Manifest,
    SamplerConfig,
    augment,
    load_images,
    sample_pk_batch,
)
from .losses import LossConfig, icg_loss, id_loss, triplet_loss
from .metrics import EvalReport, Metric, ProtocolConfig, distance_histograms, run_protocol
from .model import ICRENet

__all__ = [
    "LossKind",
    "TrainConfig",
    "lr_at",
    "Trainer",
    "train_step",
    "train",
    "evaluate",
    "extract_features",
    "plot_dist",
    "ablate",
    "save_checkpoint",
    "load_checkpoint",
    "param_hash",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "icre-checkpoint"
CHECKPOINT_VERSION = 1
REFERENCE_EPOCHS = 150


class LossKind(str, enum.Enum):
    ICG = "ICG"
    TRI = "TRI"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    warmup_epochs: int = 10
    base_lr: float = 0.01
    peak_lr: float = 0.1
    decay_points: dict[int, float] = field(default_factory=lambda: {30: 0.01, 90: 0.001, 120: 0.0001})
    # Rescale warmup and decay epochs by epochs / 150 for shorter schedules.
    scale_schedule: bool = True
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # global gradient-norm clip; None disables it
    grad_clip: float | None = None
    # learning-rate multiplier for the attention cascade parameters
    sdce_lr_scale: float = 0.1
    lam: float = 1.0
    rho1: float = 0.01
    rho2: float = 0.7
    include_same_identity: bool = False
    triplet_margin: float = 0.3
    P: int = 6
    K: int = 8
    per_modality: bool = False
    iters_per_epoch: int | None = None
    mpfr_on: bool = True
    sdce_on: bool = True
    loss: LossKind = LossKind.ICG
    mpfr_scales: tuple[int, ...] = (2, 3, 4)
    sdce_self_block: bool = True
    sdce_jib: bool = True
    beta_cross: bool = True
    beta_self: bool = False
    sdce_residual: bool = True
    heads: int | None = None
    variant: Variant = Variant.TINY
    image_size: tuple[int, ...] = (64, 32)
    gem_p: float = 3.0
    bn_momentum: float = 0.1
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    gray_prob: float = 0.1
    channel_aug_prob: float = 0.5
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "decay_points", {int(k): float(v) for k, v in self.decay_points.items()})
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "mpfr_scales", tuple(int(v) for v in self.mpfr_scales))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if list(self.decay_points) != sorted(set(self.decay_points)):
            raise ValueError("decay epochs must be strictly increasing")
        warmup, steps = self.schedule()
        points = [p for p, _ in steps]
        if points and (points[0] < 1 or points[-1] > self.epochs):
            raise ValueError("decay epochs must lie in [1, epochs]")
        if points and warmup >= points[0]:
            raise ValueError("warmup must end before the first decay point")

    def schedule(self) -> tuple[int, list[tuple[int, float]]]:
        """Effective warmup length and ``(epoch, lr)`` decay steps after optional rescaling.

        Rescaled decay epochs that round onto the same epoch keep the later
        (smaller) rate, and the warmup is shortened to end before the first
        decay, so very short runs still get a valid schedule.
        """
        steps = sorted(self.decay_points.items())
        if not self.scale_schedule or self.epochs == REFERENCE_EPOCHS:
            return self.warmup_epochs, steps
        f = self.epochs / REFERENCE_EPOCHS
        merged: dict[int, float] = {}
        for p, value in steps:
            merged[max(1, round(p * f))] = value
        steps = sorted(merged.items())
        warmup = max(1, round(self.warmup_epochs * f)) if self.warmup_epochs else 0
        if steps:
            warmup = min(warmup, steps[0][0] - 1)
        return warmup, steps

    def loss_config(self) -> LossConfig:
        return LossConfig(self.rho1, self.rho2, self.lam, self.include_same_identity)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.P, self.K, self.seed, self.per_modality)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            size=self.image_size,
            flip_prob=self.flip_prob,
            erase_prob=self.erase_prob,
            gray_prob=self.gray_prob,
            channel_aug_prob=self.channel_aug_prob,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.resnet50() if self.variant is Variant.RESNET50 else BackboneConfig.tiny()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
            elif isinstance(v, tuple):
                d[k] = list(v)
        d["decay_points"] = {str(k): v for k, v in self.decay_points.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "decay_points" in d:
            d["decay_points"] = {int(k): float(v) for k, v in d["decay_points"].items()}
        for k in ("image_size", "mpfr_scales"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: linear warmup, plateau, then step table."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    warmup, steps = cfg.schedule()
    if epoch < warmup:
        return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch / warmup
    lr = cfg.peak_lr
    for p, value in steps:
        if epoch >= p:
            lr = value
    return lr


def build_model(cfg: TrainConfig, num_classes: int) -> ICRENet:
    return ICRENet(
        num_classes,
        backbone=cfg.backbone_config(),
        image_size=cfg.image_size,
        mpfr=cfg.mpfr_on,
        sdce=cfg.sdce_on,
        mpfr_scales=cfg.mpfr_scales,
        heads=cfg.heads,
        sdce_self_block=cfg.sdce_self_block,
        sdce_jib=cfg.sdce_jib,
        beta_cross=cfg.beta_cross,
        beta_self=cfg.beta_self,
        gem_p=cfg.gem_p,
        bn_momentum=cfg.bn_momentum,
        sdce_residual=cfg.sdce_residual,
    )


def _optimizer(model: ICRENet, cfg: TrainConfig) -> torch.optim.SGD:
    attn = {id(p) for p in model.sdce.parameters()} if model.sdce is not None else set()
    groups = [
        {"params": [p for p in model.parameters() if p.requires_grad and id(p) not in attn], "lr_scale": 1.0},
        {"params": [p for p in model.parameters() if p.requires_grad and id(p) in attn], "lr_scale": cfg.sdce_lr_scale},
    ]
    groups = [g for g in groups if g["params"]]
    return torch.optim.SGD(groups, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


def train_step(batch, model: ICRENet, cfg: TrainConfig, optimizer: torch.optim.Optimizer) -> dict:
    """One forward/backward/SGD update; returns the float loss breakdown."""
    model.train()
    logits, emb = model(batch.images, batch.modalities, batch.identities)
    ce = id_loss(logits, batch.identities)
    if cfg.loss is LossKind.ICG:
        metric = icg_loss(emb.F_pool, emb.identities, emb.modalities, cfg.loss_config())
    else:
        metric = triplet_loss(emb.F_pool, emb.identities, cfg.triplet_margin)
    # sum in float64 so the reported total is exactly ce + lam * metric
    total = ce.double() + cfg.lam * metric.double()
    if not torch.isfinite(total):
        raise FloatingPointError(
            "non-finite loss: "
            + json.dumps({"ce": float(ce), "metric": float(metric), "identities": batch.identities.tolist(),
                          "indices": np.asarray(batch.indices).tolist()})
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    key = "icg" if cfg.loss is LossKind.ICG else "tri"
    return {"ce": ce.item(), key: metric.item(), "total": total.item()}


def _set_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


class Trainer:
    """Owns the model, optimizer and RNG streams of one training run.

    ``images`` is an optional preloaded, normalized image bank aligned with
    ``manifest.records``; it is read from disk otherwise.
    """

    def __init__(self, cfg: TrainConfig, manifest: Manifest, images: torch.Tensor | None = None):
        _set_determinism(cfg)
        self.cfg = cfg
        self.manifest = manifest
        self.images = images if images is not None else load_images(manifest, cfg.image_size)
        self.num_classes = manifest.num_identities
        if set(manifest.identities().tolist()) != set(range(self.num_classes)):
            raise ValueError("identity labels must be contiguous from 0")
        torch.manual_seed(cfg.seed)
        self.model = build_model(cfg, self.num_classes)
        self.optimizer = _optimizer(self.model, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.sampler_cfg = cfg.sampler_config()
        self.augment_cfg = cfg.augment_config()
        self.epoch = 0
        self.history: list[dict] = []

    @property
    def iters_per_epoch(self) -> int:
        if self.cfg.iters_per_epoch:
            return self.cfg.iters_per_epoch
        per_mod = self.sampler_cfg.P * self.sampler_cfg.per_identity_per_modality
        return max(1, math.ceil(max(self.manifest.n_vis, self.manifest.n_ir) / per_mod))

    def next_batch(self):
        batch = sample_pk_batch(self.manifest, self.sampler_cfg, self.rng, self.images)
        mods = batch.modalities.tolist()
        batch.images = torch.stack([augment(img, m, self.augment_cfg, self.rng) for img, m in zip(batch.images, mods)])
        return batch

    def step(self) -> dict:
        return train_step(self.next_batch(), self.model, self.cfg, self.optimizer)

    def run_epoch(self) -> dict:
        lr = lr_at(self.epoch, self.cfg)
        set_lr(self.optimizer, lr)
        sums: dict = {}
        n = self.iters_per_epoch
        for _ in range(n):
            for k, v in self.step().items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"epoch": self.epoch, "lr": lr, **{k: v / n for k, v in sums.items()}}
        self.history.append(record)
        self.epoch += 1
        log.info(json.dumps(record))
        return record

    def fit(self, out_dir=None) -> "Trainer":
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        while self.epoch < self.cfg.epochs:
            record = self.run_epoch()
            if out is not None:
                with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
                every = self.cfg.checkpoint_every
                if every and self.epoch % every == 0 and self.epoch < self.cfg.epochs:
                    self.save(out / f"checkpoint_epoch{self.epoch:03d}.pt")
        if out is not None:
            self.save(out / "checkpoint.pt")
        return self

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "num_classes": self.num_classes,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "rng": {"numpy": self.rng.bit_generator.state, "torch": torch.get_rng_state()},
        }

    def save(self, path) -> Path:
        return save_checkpoint(self.state(), path)

    def restore(self, ckpt: dict) -> "Trainer":
        self.model.load_state_dict(ckpt["model"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.epoch = ckpt["epoch"]
        self.history = list(ckpt.get("history", []))
        self.rng.bit_generator.state = ckpt["rng"]["numpy"]
        torch.set_rng_state(ckpt["rng"]["torch"])
        return self


def save_checkpoint(state: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def load_checkpoint(path) -> dict:
    """Load and validate a checkpoint written by :class:`Trainer`."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an ICRE checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> tuple[ICRENet, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt["config"])
    model = build_model(cfg, ckpt["num_classes"])
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train(cfg: TrainConfig, manifest: Manifest, out_dir=None, images: torch.Tensor | None = None) -> Trainer:
    """Run the whole schedule; writes ``train_log.jsonl`` and ``checkpoint.pt`` when ``out_dir`` is set."""
    return Trainer(cfg, manifest, images).fit(out_dir)


@torch.no_grad()
def extract_features(model: ICRENet, images: torch.Tensor, modalities, batch_size: int = 128, which: str = "bn"):
    """Eval-mode embeddings; ``which`` is ``"bn"`` (retrieval) or ``"pool"``."""
    model.eval()
    modalities = torch.as_tensor(modalities).reshape(-1)
    out = []
    for start in range(0, images.shape[0], batch_size):
        f_pool, f_bn = model.embed(images[start:start + batch_size], modalities[start:start + batch_size])
        out.append(f_bn if which == "bn" else f_pool)
    return torch.cat(out).numpy()


def records_features_fn(model: ICRENet, image_size):
    def fn(records):
        m = Manifest(tuple(records))
        return extract_features(model, load_images(m, image_size), m.modalities())
    return fn


def evaluate(model: ICRENet, cfg: TrainConfig, query: Manifest, gallery: Manifest, protocol: ProtocolConfig) -> EvalReport:
    return run_protocol(records_features_fn(model, cfg.image_size), query, gallery, protocol)


def plot_dist(model: ICRENet, cfg: TrainConfig, manifest: Manifest, bins: int = 50, metric=Metric.COSINE_DISTANCE):
    """Cross-modal distance histograms of the retrieval features of ``manifest``."""
    feats = extract_features(model, load_images(manifest, cfg.image_size), manifest.modalities())
    return distance_histograms(feats, manifest.identities(), manifest.modalities(), bins=bins, metric=metric)


TABLE_COLUMNS = ("name", "seed", "BASE", "MPFR", "SDCE", "L_TRI", "L_ICG", "R1", "R10", "R20", "mAP", "dist_gap")


def _table_key(cfg: TrainConfig):
    # baseline rows first, then +MPFR, then +MPFR+SDCE; triplet before ICG within a group
    sdce = cfg.mpfr_on and cfg.sdce_on
    return (int(cfg.mpfr_on), int(sdce), 0 if cfg.loss is LossKind.TRI else 1)


def ablate(
    base_cfg: TrainConfig,
    grid: dict[str, dict] | Sequence[dict],
    train_manifest: Manifest,
    query: Manifest,
    gallery: Manifest,
    protocol: ProtocolConfig,
    seeds: Sequence[int] | None = None,
    out_csv=None,
) -> list[dict]:
    """Train and evaluate every grid entry for every seed.

    ``grid`` maps a row name to ``TrainConfig`` overrides. Rows are emitted
    in Table-V order (component switches, then loss). ``dist_gap`` is the
    inter- minus intra-class mean cross-modal distance on the query set.
    """
    if not isinstance(grid, dict):
        grid = {f"config{i}": g for i, g in enumerate(grid)}
    seeds = list(seeds) if seeds is not None else [base_cfg.seed]
    bank = load_images(train_manifest, base_cfg.image_size)
    entries = []
    for name, overrides in grid.items():
        cfg = dataclasses.replace(base_cfg, **overrides)
        entries.append((name, cfg))
    entries.sort(key=lambda e: _table_key(e[1]))
    rows = []
    for name, cfg in entries:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, seed=seed)
            trainer = train(run_cfg, train_manifest, images=bank)
            rep = evaluate(trainer.model, run_cfg, query, gallery, protocol)
            hist = plot_dist(trainer.model, run_cfg, query)
            rows.append({
                "name": name,
                "seed": seed,
                "BASE": 1,
                "MPFR": int(run_cfg.mpfr_on),
                "SDCE": int(run_cfg.mpfr_on and run_cfg.sdce_on),
                "L_TRI": int(run_cfg.loss is LossKind.TRI),
                "L_ICG": int(run_cfg.loss is LossKind.ICG),
                "R1": rep.rank(1),
                "R10": rep.rank(10),
                "R20": rep.rank(20),
                "mAP": rep.map,
                "dist_gap": hist.gap,
            })
    if out_csv is not None:
        Path(out_csv).write_text(rows_to_csv(rows), encoding="utf-8")
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def summarize(rows: list[dict], key: str = "mAP") -> dict[str, float]:
    """Median of ``key`` per row name across seeds."""
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r["name"], []).append(r[key])
    return {k: median(v) for k, v in out.items()}
