"""Retrieval evaluation: distance matrices, CMC / mAP, gallery protocols, distance histograms."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import Manifest, Modality, SampleRecord

__all__ = [
    "Metric",
    "SearchMode",
    "Shot",
    "ProtocolConfig",
    "EvalReport",
    "DistanceHistogram",
    "pairwise_distances",
    "cmc_map",
    "run_protocol",
    "distance_histograms",
]


class Metric(str, enum.Enum):
    EUCLIDEAN = "EUCLIDEAN"
    COSINE_DISTANCE = "COSINE_DISTANCE"


class SearchMode(str, enum.Enum):
    ALL = "ALL"
    INDOOR = "INDOOR"


class Shot(str, enum.Enum):
    SINGLE = "SINGLE"
    MULTI = "MULTI"


def pairwise_distances(query, gallery, metric: Metric | str = Metric.EUCLIDEAN) -> np.ndarray:
    """Full ``Q x G`` distance matrix. Cosine distance is ``1 - cos``."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError("query and gallery must be 2-D with equal feature width")
    metric = Metric(metric)
    if metric is Metric.COSINE_DISTANCE:
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        if (qn == 0).any() or (gn == 0).any():
            raise ValueError("cosine distance is undefined for zero-norm rows")
        d = 1.0 - (q / qn) @ (g / gn).T
        return np.clip(d, 0.0, 2.0)
    sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


@dataclass(frozen=True)
class ProtocolConfig:
    """Gallery composition for one cross-modal search setting.

    Camera sets are data: the defaults match the synthetic generator
    (visible cameras 1, 2 indoor and 4, 5 outdoor; infrared cameras 3, 6).
    """

    query_modality: Modality = Modality.IR
    gallery_modality: Modality = Modality.VIS
    mode: SearchMode = SearchMode.ALL
    shot: Shot = Shot.SINGLE
    all_cameras: tuple[int, ...] = (1, 2, 4, 5)
    indoor_cameras: tuple[int, ...] = (1, 2)
    query_cameras: tuple[int, ...] | None = None
    shots_per_id_per_camera: int | None = None
    trials: int = 10
    metric: Metric = Metric.COSINE_DISTANCE
    filter_same_camera: bool = False
    max_rank: int = 20
    seed: int = 0

    def __post_init__(self):
        for name, kind in (("query_modality", Modality), ("gallery_modality", Modality), ("mode", SearchMode),
                           ("shot", Shot), ("metric", Metric)):
            object.__setattr__(self, name, kind(getattr(self, name)))
        for name in ("all_cameras", "indoor_cameras", "query_cameras"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(int(c) for c in np.atleast_1d(val)))
        if self.query_modality is self.gallery_modality:
            raise ValueError("query and gallery modalities must differ")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @property
    def gallery_cameras(self) -> tuple[int, ...]:
        return self.all_cameras if self.mode is SearchMode.ALL else self.indoor_cameras

    @property
    def shots(self) -> int:
        if self.shots_per_id_per_camera is not None:
            return self.shots_per_id_per_camera
        return 1 if self.shot is Shot.SINGLE else 10

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class EvalReport:
    cmc: list
    map: float
    num_valid_queries: int
    per_trial: list = field(default_factory=list)
    protocol: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return self.cmc[min(k, len(self.cmc)) - 1]

    def to_dict(self) -> dict:
        return {
            "cmc": [float(c) for c in self.cmc],
            "map": float(self.map),
            "num_valid_queries": int(self.num_valid_queries),
            "per_trial": self.per_trial,
            "protocol": self.protocol,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cmc_map(
    dist,
    q_ids,
    g_ids,
    q_cams=None,
    g_cams=None,
    protocol: ProtocolConfig | None = None,
    max_rank: int | None = None,
) -> EvalReport:
    """CMC curve and mAP for one distance matrix.

    Gallery items are ranked by ascending distance with ties broken by gallery
    index. Queries with no correct gallery item count toward neither metric.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    nq, ng = dist.shape
    if len(q_ids) != nq or len(g_ids) != ng:
        raise ValueError("label arrays do not match the distance matrix")
    filter_cam = protocol is not None and protocol.filter_same_camera
    if filter_cam:
        if q_cams is None or g_cams is None:
            raise ValueError("same-camera filtering needs camera arrays")
        q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    if max_rank is None:
        max_rank = protocol.max_rank if protocol is not None else 20

    order = np.argsort(dist, axis=1, kind="stable")
    cmc = np.zeros(max_rank)
    aps = []
    for i in range(nq):
        ranked = order[i]
        if filter_cam:
            ranked = ranked[~((g_ids[ranked] == q_ids[i]) & (g_cams[ranked] == q_cams[i]))]
        hits = g_ids[ranked] == q_ids[i]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        if first < max_rank:
            cmc[first:] += 1
        hit_pos = np.flatnonzero(hits)
        aps.append(np.mean(np.arange(1, len(hit_pos) + 1) / (hit_pos + 1)))
    n_valid = len(aps)
    if n_valid:
        cmc /= n_valid
        mean_ap = float(np.mean(aps))
    else:
        mean_ap = 0.0
    return EvalReport(
        cmc=cmc.tolist(),
        map=mean_ap,
        num_valid_queries=n_valid,
        protocol=protocol.to_dict() if protocol is not None else {},
    )


def _sample_gallery(records: Sequence[SampleRecord], protocol: ProtocolConfig, rng: np.random.Generator) -> np.ndarray:
    groups: dict = {}
    cams = set(protocol.gallery_cameras)
    for i, r in enumerate(records):
        if r.modality is protocol.gallery_modality and r.camera in cams:
            groups.setdefault((r.identity, r.camera), []).append(i)
    picked = []
    for key in sorted(groups):
        pool = groups[key]
        n = min(protocol.shots, len(pool))
        picked.extend(sorted(rng.choice(pool, size=n, replace=False).tolist()) if n < len(pool) else pool)
    return np.asarray(picked, dtype=np.int64)


def run_protocol(
    features_fn: Callable[[Sequence[SampleRecord]], np.ndarray],
    query_manifest: Manifest,
    gallery_manifest: Manifest,
    protocol: ProtocolConfig,
    rng: np.random.Generator | None = None,
) -> EvalReport:
    """Evaluate ``protocol.trials`` gallery draws and average them.

    ``features_fn`` maps a sequence of records to an ``(n, D)`` array of
    retrieval embeddings. Each candidate image is embedded once.
    """
    if rng is None:
        rng = np.random.default_rng(protocol.seed)
    q_recs = [
        r for r in query_manifest.records
        if r.modality is protocol.query_modality
        and (protocol.query_cameras is None or r.camera in protocol.query_cameras)
    ]
    g_cands = [
        r for r in gallery_manifest.records
        if r.modality is protocol.gallery_modality and r.camera in set(protocol.gallery_cameras)
    ]
    if not q_recs:
        raise ValueError("no query records match the protocol")
    if not g_cands:
        raise ValueError("gallery is empty after protocol filtering")
    q_feat = np.asarray(features_fn(q_recs))
    g_feat = np.asarray(features_fn(g_cands))
    full = pairwise_distances(q_feat, g_feat, protocol.metric)
    q_ids = np.array([r.identity for r in q_recs])
    q_cams = np.array([r.camera for r in q_recs])
    g_ids_all = np.array([r.identity for r in g_cands])
    g_cams_all = np.array([r.camera for r in g_cands])

    trials = []
    for _ in range(protocol.trials):
        sel = _sample_gallery(g_cands, protocol, rng)
        rep = cmc_map(full[:, sel], q_ids, g_ids_all[sel], q_cams, g_cams_all[sel], protocol)
        trials.append(rep)
    cmc = np.mean([t.cmc for t in trials], axis=0)
    per_trial = [{"cmc": t.cmc, "map": t.map, "num_valid_queries": t.num_valid_queries} for t in trials]
    return EvalReport(
        cmc=cmc.tolist(),
        map=float(np.mean([t.map for t in trials])),
        num_valid_queries=int(trials[0].num_valid_queries),
        per_trial=per_trial,
        protocol=protocol.to_dict(),
    )


@dataclass
class DistanceHistogram:
    edges: np.ndarray
    intra_counts: np.ndarray
    inter_counts: np.ndarray
    intra_mean: float
    inter_mean: float

    @property
    def gap(self) -> float:
        return self.inter_mean - self.intra_mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "intra_count", "inter_count"))
        for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.intra_counts, self.inter_counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(a), int(b)))
        return buf.getvalue()


def distance_histograms(
    features,
    identities,
    modalities,
    bins: int = 50,
    metric: Metric | str = Metric.EUCLIDEAN,
) -> DistanceHistogram:
    """Histogram of visible-infrared pair distances, split into same- and different-identity pairs."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    identities, modalities = np.asarray(identities), np.asarray(modalities)
    if len(features) < 2:
        raise ValueError("need at least two features")
    vis, ir = modalities == 0, modalities == 1
    d = pairwise_distances(features[vis], features[ir], metric)
    same = identities[vis][:, None] == identities[ir][None, :]
    intra, inter = d[same], d[~same]
    hi = float(d.max()) if d.size and d.max() > 0 else 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    return DistanceHistogram(
        edges=edges,
        intra_counts=np.histogram(intra, bins=edges)[0],
        inter_counts=np.histogram(inter, bins=edges)[0],
        intra_mean=float(intra.mean()) if intra.size else float("nan"),
        inter_mean=float(inter.mean()) if inter.size else float("nan"),
    )
