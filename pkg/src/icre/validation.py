"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
import torch

from .dataset import Modality

__all__ = ["check_images", "check_modalities", "check_identities"]


def check_images(X, dtype=torch.float32) -> torch.Tensor:
    """Return ``X`` as a finite ``(N, 3, H, W)`` tensor."""
    t = X if isinstance(X, torch.Tensor) else torch.from_numpy(np.asarray(X))
    t = t.to(dtype)
    if t.dim() != 4 or t.shape[1] != 3:
        raise ValueError(f"expected images shaped (N, 3, H, W), got {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise ValueError("no images given")
    if not torch.isfinite(t).all():
        raise ValueError("images contain non-finite values")
    return t


def check_modalities(modalities, n: int) -> torch.Tensor:
    """Accept ``"VIS"``/``"IR"`` tokens, :class:`Modality` members or 0/1 codes."""
    if modalities is None:
        raise ValueError("modalities are required")
    if isinstance(modalities, (str, Modality, int, np.integer)):
        modalities = [modalities] * n
    codes = []
    for m in modalities:
        if isinstance(m, (Modality, str)):
            codes.append(Modality(m.upper() if isinstance(m, str) else m).code)
        else:
            m = int(m)
            if m not in (0, 1):
                raise ValueError(f"modality code must be 0 (VIS) or 1 (IR), got {m}")
            codes.append(m)
    if len(codes) != n:
        raise ValueError(f"got {len(codes)} modality labels for {n} images")
    return torch.tensor(codes, dtype=torch.long)


def check_identities(y, n: int) -> tuple[torch.Tensor, np.ndarray]:
    """Encode labels to ``0..P-1``; returns the codes and the sorted original classes."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} identity labels")
    classes, codes = np.unique(y, return_inverse=True)
    return torch.from_numpy(codes.astype(np.int64)), classes
