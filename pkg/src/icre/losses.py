"""Identity-clue-guided center loss, identity cross-entropy and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "LossConfig",
    "CenterSet",
    "compute_centers",
    "icg_loss",
    "id_loss",
    "total_loss",
    "triplet_loss",
    "safe_norm",
]


@dataclass(frozen=True)
class LossConfig:
    rho1: float = 0.01
    rho2: float = 0.7
    lam: float = 1.0
    # Also hinge against the sample's own identity center in the second term.
    include_same_identity: bool = False

    def __post_init__(self):
        if self.rho1 < 0 or self.rho2 <= 0 or self.lam < 0:
            raise ValueError("need rho1 >= 0, rho2 > 0, lam >= 0")


@dataclass
class CenterSet:
    """Per-identity centers; row ``r`` belongs to ``labels[r]``."""

    labels: torch.Tensor
    vis: torch.Tensor
    ir: torch.Tensor
    both: torch.Tensor

    def row_of(self, identities: torch.Tensor) -> torch.Tensor:
        # labels are sorted (torch.unique), so searchsorted gives the row index
        return torch.searchsorted(self.labels, identities)


def compute_centers(features: torch.Tensor, identities: torch.Tensor, modalities: torch.Tensor) -> CenterSet:
    """Visible, infrared and joint means of ``features`` per identity (VIS=0, IR=1)."""
    labels, inv = torch.unique(identities, sorted=True, return_inverse=True)
    p = labels.numel()
    onehot = F.one_hot(inv, p).to(features.dtype)  # (N, P)
    is_vis = (modalities == 0).to(features.dtype).unsqueeze(1)
    vis_w, ir_w = onehot * is_vis, onehot * (1 - is_vis)
    n_vis, n_ir = vis_w.sum(0), ir_w.sum(0)
    if (n_vis == 0).any() or (n_ir == 0).any():
        missing = labels[(n_vis == 0) | (n_ir == 0)].tolist()
        raise ValueError(f"identities {missing} are missing a modality in the batch")
    vis = vis_w.T @ features / n_vis.unsqueeze(1)
    ir = ir_w.T @ features / n_ir.unsqueeze(1)
    both = onehot.T @ features / (n_vis + n_ir).unsqueeze(1)
    return CenterSet(labels, vis, ir, both)


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2 norm that is exactly 0 at the origin with a zero (sub)gradient there."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def icg_loss(
    features: torch.Tensor,
    identities: torch.Tensor,
    modalities: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Pull each feature to its identity's center in the other modality and push it
    at least ``rho2`` away from the joint centers of the other samples' identities.

    The pull term is averaged over ``N``; the push term is summed over ordered
    pairs ``i != j`` (with ``y_i != y_j`` unless ``include_same_identity``)
    and scaled by ``2 / (N (N + 1))``. Gradients flow through the centers.
    """
    n = features.shape[0]
    if n < 2:
        raise ValueError("ICG loss needs at least two samples")
    centers = compute_centers(features, identities, modalities)
    rows = centers.row_of(identities)

    opposite = torch.where((modalities == 0).unsqueeze(1), centers.ir[rows], centers.vis[rows])
    pull = F.relu(safe_norm(features - opposite) - cfg.rho1).sum() / n

    # dist[i, j] = || f_i - c_{y_j} ||
    to_center = safe_norm(features.unsqueeze(1) - centers.both.unsqueeze(0))  # (N, P)
    dist = to_center[:, rows]
    mask = ~torch.eye(n, dtype=torch.bool, device=features.device)
    if not cfg.include_same_identity:
        mask &= identities.unsqueeze(1) != identities.unsqueeze(0)
    push = (F.relu(cfg.rho2 - dist) * mask).sum() * (2.0 / (n * (n + 1)))
    return pull + push


def id_loss(logits: torch.Tensor, identities: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over identities."""
    if identities.numel() and (identities.min() < 0 or identities.max() >= logits.shape[1]):
        raise ValueError(f"identity label out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, identities)


def total_loss(ce, icg, cfg: LossConfig = LossConfig()):
    return ce + cfg.lam * icg


def triplet_loss(features: torch.Tensor, identities: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss (hardest positive and negative per anchor, Euclidean)."""
    diff = features.unsqueeze(1) - features.unsqueeze(0)
    dist = safe_norm(diff)
    same = identities.unsqueeze(1) == identities.unsqueeze(0)
    hardest_pos = torch.where(same, dist, torch.zeros_like(dist)).amax(1)
    big = dist.detach().max() + 1.0
    hardest_neg = torch.where(same, big.expand_as(dist), dist).amin(1)
    return F.relu(hardest_pos - hardest_neg + margin).mean()
