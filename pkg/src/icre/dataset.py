"""Manifests, synthetic two-modality data, PK cross-modal sampling and augmentation."""

from __future__ import annotations

import csv
import enum
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

__all__ = [
    "Modality",
    "Split",
    "SampleRecord",
    "Manifest",
    "ManifestError",
    "SamplerConfig",
    "AugmentConfig",
    "Batch",
    "MEAN",
    "STD",
    "load_manifest",
    "save_manifest",
    "generate_synthetic",
    "load_images",
    "sample_pk_indices",
    "sample_pk_batch",
    "augment",
    "worker_rng",
]

# Per-channel normalization applied when images are read from disk.
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)

MANIFEST_HEADER = ("path", "identity", "modality", "camera")

# Camera ids used by the synthetic generator (indoor cameras first).
VIS_CAMERAS = (1, 2, 4, 5)
IR_CAMERAS = (3, 6)


class ManifestError(ValueError):
    """Raised for a missing or malformed manifest."""


class Modality(str, enum.Enum):
    VIS = "VIS"
    IR = "IR"

    @property
    def other(self) -> "Modality":
        return Modality.IR if self is Modality.VIS else Modality.VIS

    @property
    def code(self) -> int:
        # integer label used in tensors: VIS=0, IR=1
        return 0 if self is Modality.VIS else 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    QUERY = "QUERY"
    GALLERY = "GALLERY"


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    identity: int
    modality: Modality
    camera: int

    def __post_init__(self):
        if not isinstance(self.modality, Modality):
            raise ManifestError(f"unknown modality {self.modality!r}")
        if self.identity < 0 or self.camera < 0:
            raise ManifestError("identity and camera must be non-negative")


@dataclass(frozen=True)
class Manifest:
    """A catalog of labeled images for one split.

    ``id_map`` maps the labels found on disk to the contiguous labels stored
    in ``records``. ``report`` collects non-fatal warnings raised on load.
    """

    records: tuple[SampleRecord, ...]
    split: Split = Split.TRAIN
    id_map: dict = field(default_factory=dict, compare=False)
    report: tuple[str, ...] = field(default=(), compare=False)

    @property
    def n_vis(self) -> int:
        return sum(r.modality is Modality.VIS for r in self.records)

    @property
    def n_ir(self) -> int:
        return sum(r.modality is Modality.IR for r in self.records)

    @property
    def num_identities(self) -> int:
        return len({r.identity for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    def modalities(self) -> np.ndarray:
        return np.array([r.modality.code for r in self.records], dtype=np.int64)

    def cameras(self) -> np.ndarray:
        return np.array([r.camera for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "Manifest":
        return Manifest(tuple(self.records[i] for i in indices), self.split, dict(self.id_map))


def _parse_modality(token: str, lineno: int) -> Modality:
    try:
        return Modality(token.strip().upper())
    except ValueError:
        raise ManifestError(f"line {lineno}: unknown modality {token!r}") from None


def load_manifest(path, split: Split | str = Split.TRAIN) -> Manifest:
    """Read a ``path,identity,modality,camera`` CSV.

    Relative image paths are resolved against the CSV's directory. Identity
    labels are re-indexed to ``0..P-1`` in order of first sorted appearance.
    """
    path = Path(path)
    split = Split(split)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    raw = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"bad header {header!r}, expected {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
            img, ident, mod, cam = row
            try:
                ident, cam = int(ident), int(cam)
            except ValueError:
                raise ManifestError(f"line {lineno}: identity and camera must be integers") from None
            if ident < 0 or cam < 0:
                raise ManifestError(f"line {lineno}: negative identity or camera")
            img_path = img if os.path.isabs(img) else str(base / img)
            raw.append((img_path, ident, _parse_modality(mod, lineno), cam))

    id_map = {old: new for new, old in enumerate(sorted({r[1] for r in raw}))}
    records = tuple(SampleRecord(p, id_map[i], m, c) for p, i, m, c in raw)

    report = []
    if split is Split.TRAIN:
        seen = {Modality.VIS: set(), Modality.IR: set()}
        for r in records:
            seen[r.modality].add(r.identity)
        for mod in Modality:
            missing = sorted(set(id_map.values()) - seen[mod])
            if missing:
                msg = f"identities {missing} have no {mod.value} records"
                warnings.warn(msg, stacklevel=2)
                report.append(msg)
    return Manifest(records, split, id_map, tuple(report))


def save_manifest(manifest: Manifest, path) -> None:
    """Write a manifest CSV; image paths are stored relative to the CSV when possible."""
    path = Path(path)
    base = path.parent.resolve()
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        p = Path(r.image_path)
        try:
            p = p.resolve().relative_to(base)
        except ValueError:
            pass
        writer.writerow((p.as_posix(), r.identity, r.modality.value, r.camera))
    path.write_bytes(buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class _Signature:
    part_bounds: tuple[float, ...]  # fractional row boundaries of head / torso / legs
    colors: np.ndarray  # (3 parts, RGB)
    pattern: int  # 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checker
    period: int
    accent: np.ndarray  # RGB of the accessory block
    accent_box: tuple[float, float, float, float]  # top, left, height, width (fractions)
    heat: float  # identity-specific infrared intensity offset


def _signature(rng: np.random.Generator) -> _Signature:
    head = rng.uniform(0.12, 0.2)
    torso = head + rng.uniform(0.3, 0.45)
    # luminance carries the identity across modalities; chroma is a smaller visible-only cue
    lum = rng.permutation(np.linspace(0.15, 0.85, 3) + rng.uniform(-0.1, 0.1, size=3))
    chroma = rng.uniform(-0.15, 0.15, size=(3, 3))
    colors = np.clip(lum[:, None] + chroma - chroma.mean(1, keepdims=True), 0.0, 1.0)
    return _Signature(
        part_bounds=(0.05, head, torso, 0.97),
        colors=colors,
        pattern=int(rng.integers(0, 4)),
        period=int(rng.integers(3, 7)),
        accent=rng.uniform(0.0, 1.0, size=3),
        accent_box=(rng.uniform(0.2, 0.6), rng.uniform(0.0, 0.6), rng.uniform(0.1, 0.25), rng.uniform(0.2, 0.4)),
        heat=float(rng.uniform(-0.1, 0.1)),
    )


def _render(sig: _Signature, modality: Modality, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.35, 0.65, size=3) if modality is Modality.VIS else rng.uniform(0.05, 0.2)
    dy = int(rng.integers(-max(1, h // 32), max(1, h // 32) + 1))
    dx = int(rng.integers(-max(1, w // 16), max(1, w // 16) + 1))
    left, right = int(0.2 * w) + dx, int(0.8 * w) + dx
    rows = [int(b * h) + dy for b in sig.part_bounds]
    yy, xx = np.mgrid[0:h, 0:w]
    for part in range(3):
        top, bot = max(rows[part], 0), min(rows[part + 1], h)
        if bot <= top:
            continue
        color = sig.colors[part]
        block = np.broadcast_to(color, (bot - top, max(min(right, w) - max(left, 0), 0), 3)).copy()
        if part == 1 and sig.pattern and block.size:
            ys, xs = yy[top:bot, max(left, 0):min(right, w)], xx[top:bot, max(left, 0):min(right, w)]
            if sig.pattern == 1:
                on = (ys // sig.period) % 2 == 0
            elif sig.pattern == 2:
                on = ((xs - left) // sig.period) % 2 == 0
            else:
                on = ((ys // sig.period) + ((xs - left) // sig.period)) % 2 == 0
            block[on] = 1.0 - color
        img[top:bot, max(left, 0):min(right, w)] = block
    t, l, bh, bw = sig.accent_box
    t0, l0 = int(t * h) + dy, left + int(l * (right - left))
    img[max(t0, 0):max(t0 + max(int(bh * h), 1), 0), max(l0, 0):max(l0 + max(int(bw * (right - left)), 1), 0)] = sig.accent

    if modality is Modality.VIS:
        img = img * rng.uniform(0.85, 1.15)
    else:
        lum = img @ np.array([0.299, 0.587, 0.114])
        lum = 0.8 * lum + 0.1 + sig.heat
        img = np.repeat(lum[..., None], 3, axis=2)
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    num_ids: int,
    imgs_per_id_per_modality: int,
    image_size: tuple[int, int] = (64, 32),
    seed: int = 0,
    out_dir=".",
    split: Split | str = Split.TRAIN,
) -> Manifest:
    """Render a two-modality toy re-identification set and write ``<split>.csv``.

    Every identity gets an appearance signature drawn from ``seed``. Visible
    images render it in color; infrared images render a luminance map with an
    intensity shift. Translation, brightness and pixel noise are drawn from a
    stream keyed on ``(seed, split)``, so the TRAIN/QUERY/GALLERY splits of one
    seed show the same people under different nuisance.
    """
    if num_ids < 2:
        raise ValueError("num_ids must be >= 2")
    if imgs_per_id_per_modality < 2:
        raise ValueError("imgs_per_id_per_modality must be >= 2")
    split = Split(split)
    out_dir = Path(out_dir)
    img_dir = out_dir / split.value.lower()
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc}") from exc

    sig_rng = np.random.default_rng([seed, 0])
    signatures = [_signature(sig_rng) for _ in range(num_ids)]
    noise_rng = np.random.default_rng([seed, 1 + list(Split).index(split)])

    records = []
    for pid, sig in enumerate(signatures):
        for modality, cams in ((Modality.VIS, VIS_CAMERAS), (Modality.IR, IR_CAMERAS)):
            for k in range(imgs_per_id_per_modality):
                arr = _render(sig, modality, tuple(image_size), noise_rng)
                fname = img_dir / f"{pid:04d}_{modality.value}_{k:03d}.png"
                Image.fromarray((arr * 255).round().astype(np.uint8)).save(fname)
                records.append(SampleRecord(str(fname), pid, modality, cams[k % len(cams)]))
    manifest = Manifest(tuple(records), split, {i: i for i in range(num_ids)})
    save_manifest(manifest, out_dir / f"{split.value.lower()}.csv")
    return manifest


def load_images(manifest: Manifest, size: tuple[int, int] | None = None, normalize: bool = True) -> torch.Tensor:
    """Read every image of ``manifest`` into an ``(N, 3, H, W)`` float tensor."""
    out = []
    for r in manifest.records:
        with Image.open(r.image_path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            out.append(np.asarray(im, dtype=np.float32) / 255.0)
    arr = torch.from_numpy(np.stack(out)).permute(0, 3, 1, 2).contiguous()
    if normalize:
        arr = (arr - torch.tensor(MEAN).view(1, 3, 1, 1)) / torch.tensor(STD).view(1, 3, 1, 1)
    return arr


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class SamplerConfig:
    """``K`` images per identity, half from each modality.

    With ``per_modality=True`` the alternative reading is used instead:
    ``K`` images per identity *per modality*, batch size ``2PK``.
    """

    P: int = 6
    K: int = 8
    seed: int = 0
    per_modality: bool = False

    def __post_init__(self):
        if self.P < 2:
            raise ValueError("P must be >= 2")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.K % 2 and not self.per_modality:
            raise ValueError("K must be even so it splits across the two modalities")

    @property
    def per_identity_per_modality(self) -> int:
        return self.K if self.per_modality else self.K // 2

    @property
    def batch_size(self) -> int:
        return 2 * self.P * self.per_identity_per_modality


@dataclass
class Batch:
    images: torch.Tensor
    identities: torch.Tensor
    modalities: torch.Tensor
    indices: np.ndarray


def _index_table(manifest: Manifest) -> dict:
    table = {}
    for i, r in enumerate(manifest.records):
        table.setdefault((r.identity, r.modality), []).append(i)
    return table


def sample_pk_indices(manifest: Manifest, cfg: SamplerConfig, rng: np.random.Generator, _table=None) -> np.ndarray:
    """Pick ``P`` identities and ``K/2`` images per modality for each.

    Returned order is all visible images (identity-major) followed by all
    infrared images in the same identity order. Identities with too few
    images in a modality are sampled with replacement.
    """
    if manifest.split is not Split.TRAIN:
        raise ValueError("PK sampling requires a TRAIN manifest")
    table = _table if _table is not None else _index_table(manifest)
    ids = sorted({i for i, _ in table})
    if cfg.P > len(ids):
        raise ValueError(f"P={cfg.P} exceeds the {len(ids)} identities in the manifest")
    n = cfg.per_identity_per_modality
    chosen = rng.choice(ids, size=cfg.P, replace=False)
    out = []
    for modality in (Modality.VIS, Modality.IR):
        for pid in chosen:
            pool = table.get((int(pid), modality))
            if not pool:
                raise ValueError(f"identity {pid} has no {modality.value} images")
            out.extend(rng.choice(pool, size=n, replace=len(pool) < n))
    return np.asarray(out, dtype=np.int64)


def sample_pk_batch(
    manifest: Manifest,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    images: torch.Tensor | None = None,
) -> Batch:
    """Draw one cross-modal PK batch; ``images`` is an optional preloaded bank."""
    idx = sample_pk_indices(manifest, cfg, rng)
    if images is None:
        imgs = load_images(manifest.subset(idx))
    else:
        imgs = images[torch.from_numpy(idx)]
    return Batch(
        images=imgs,
        identities=torch.from_numpy(manifest.identities()[idx]),
        modalities=torch.from_numpy(manifest.modalities()[idx]),
        indices=idx,
    )


def worker_rng(seed: int, worker_id: int = 0) -> np.random.Generator:
    """Independent RNG stream for one data-loading worker."""
    return np.random.default_rng([seed, worker_id])


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    size: tuple[int, int] | None = None  # train size; None keeps the input size
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    gray_prob: float = 0.1
    channel_aug_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: float = 0.3

    def __post_init__(self):
        for name in ("flip_prob", "erase_prob", "gray_prob", "channel_aug_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


_GRAY = torch.tensor([0.299, 0.587, 0.114]).view(3, 1, 1)


def augment(img: torch.Tensor, modality: Modality | int, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Resize, flip, channel-augment (visible only), grayscale, random-erase.

    Works on normalized tensors; erased pixels are set to 0, the dataset mean.
    """
    if isinstance(modality, (int, np.integer)):
        modality = Modality.VIS if int(modality) == 0 else Modality.IR
    out = img
    if cfg.size is not None and tuple(out.shape[-2:]) != tuple(cfg.size):
        out = F.interpolate(out[None], size=tuple(cfg.size), mode="bilinear", align_corners=False)[0]
    if rng.random() < cfg.flip_prob:
        out = out.flip(-1)
    if modality is Modality.VIS and rng.random() < cfg.channel_aug_prob:
        ch = int(rng.integers(0, 3))
        out = out[ch:ch + 1].expand(3, -1, -1).clone()
    if rng.random() < cfg.gray_prob:
        out = (out * _GRAY.to(out.dtype)).sum(0, keepdim=True).expand(3, -1, -1).clone()
    if rng.random() < cfg.erase_prob:
        out = _random_erase(out, cfg, rng)
    return out


def _random_erase(img: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    _, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(*cfg.erase_area) * area
        aspect = math.exp(rng.uniform(math.log(cfg.erase_aspect), math.log(1.0 / cfg.erase_aspect)))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            img = img.clone()
            img[:, top:top + eh, left:left + ew] = 0.0
            return img
    return img
