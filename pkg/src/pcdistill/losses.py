"""Training objectives: latent distillation distances, chamfer loss,
least-squares adversarial terms, the category-level latent prior, and the
weighted total with its stepped lambda schedule.

All torch functions accept either tensors (differentiable path) or
floats/arrays, which they promote to float64 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import torch

from .nets import LatentCode

LATENT_DISTANCE_KINDS = ("kl", "js", "l1", "cosine")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, LatentCode):
        return torch.tensor(x.values, dtype=torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def chamfer_loss(a, b, gamma: float = 1.0) -> torch.Tensor:
    """Differentiable chamfer: gamma * mean_a min_b d2 + mean_b min_a d2.

    a, b: (n, 3) / (m, 3) or batched (B, n, 3) / (B, m, 3).
    """
    a, b = _t(a), _t(b)
    d2 = (
        (a * a).sum(-1).unsqueeze(-1)
        + (b * b).sum(-1).unsqueeze(-2)
        - 2.0 * a @ b.transpose(-1, -2)
    )
    return gamma * d2.min(dim=-1).values.mean() + d2.min(dim=-2).values.mean()


def latent_kl(target, current) -> torch.Tensor:
    """KL(softmax(target) || softmax(current)); target is a constant."""
    target, current = _t(target).detach(), _t(current)
    if not (torch.isfinite(target).all() and torch.isfinite(current).all()):
        raise FloatingPointError("non-finite latent code")
    log_p = torch.log_softmax(target, dim=-1)
    log_q = torch.log_softmax(current, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


def latent_distance(kind: str, target, current) -> torch.Tensor:
    """Distillation distance between latent codes; target is a constant."""
    if kind not in LATENT_DISTANCE_KINDS:
        raise ValueError(f"unknown latent distance kind {kind!r}")
    target, current = _t(target).detach(), _t(current)
    if kind == "kl":
        return latent_kl(target, current)
    if kind == "js":
        p = torch.softmax(target, dim=-1)
        q = torch.softmax(current, dim=-1)
        m = 0.5 * (p + q)
        kl_pm = (p * (torch.log(p) - torch.log(m))).sum(-1)
        kl_qm = (q * (torch.log(q) - torch.log(m))).sum(-1)
        return (0.5 * kl_pm + 0.5 * kl_qm).mean()
    if kind == "l1":
        return (target - current).abs().mean()
    # cosine on raw codes
    tn = torch.linalg.vector_norm(target, dim=-1)
    cn = torch.linalg.vector_norm(current, dim=-1)
    if (tn == 0).any() or (cn == 0).any():
        raise ValueError("cosine distance undefined for zero-norm latent code")
    cos = (target * current).sum(-1) / (tn * cn)
    return (1.0 - cos).mean()


def adversarial_d_loss(score_real, score_fake) -> torch.Tensor:
    """Least-squares discriminator loss, minimized at (1, 0)."""
    return ((_t(score_real) - 1.0) ** 2).mean() + (_t(score_fake) ** 2).mean()


def adversarial_g_loss(score_fake) -> torch.Tensor:
    """Least-squares generator loss, minimized when the fake scores 1."""
    return ((_t(score_fake) - 1.0) ** 2).mean()


def category_mean_code(
    codes: Sequence[LatentCode], labels: Sequence[int]
) -> Dict[int, LatentCode]:
    """Per-category arithmetic mean of raw latent codes."""
    if len(codes) != len(labels):
        raise ValueError("codes and labels must have equal length")
    sums: Dict[int, np.ndarray] = {}
    counts: Dict[int, int] = {}
    for code, label in zip(codes, labels):
        vals = code.values if isinstance(code, LatentCode) else np.asarray(code, dtype=np.float64)
        if label in sums:
            sums[label] = sums[label] + vals
            counts[label] += 1
        else:
            sums[label] = vals.astype(np.float64).copy()
            counts[label] = 1
    return {label: LatentCode(sums[label] / counts[label]) for label in sums}


@dataclass
class LossWeights:
    """Weights of the composite objective; lambda1 = lambda2 follow a step
    schedule over epochs (5 / 2 / 1 at epochs 1 / 20 / 100 by default)."""

    lambda3: float = 1.0
    lambda4: float = 0.5
    lambda5: float = 0.1
    schedule: List[Tuple[int, float]] = field(
        default_factory=lambda: [(1, 5.0), (20, 2.0), (100, 1.0)]
    )

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("schedule must be nonempty")
        epochs = [e for e, _ in self.schedule]
        if epochs[0] != 1:
            raise ValueError("schedule must start at epoch 1")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if any(v < 0 for v in (self.lambda3, self.lambda4, self.lambda5)):
            raise ValueError("loss weights must be nonnegative")

    def lambda12(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError("epoch must be >= 1")
        value = self.schedule[0][1]
        for start, v in self.schedule:
            if epoch >= start:
                value = v
        return value

    def rescaled(self, total_epochs: int, reference_epochs: int = 150) -> "LossWeights":
        """Schedule for a shrunken run: breakpoints kept when the run still
        reaches epoch 100, otherwise scaled proportionally (rounded, >= 1)."""
        if total_epochs >= self.schedule[-1][0]:
            return self
        scaled: List[Tuple[int, float]] = []
        for start, v in self.schedule:
            e = max(1, int(round(start * total_epochs / reference_epochs)))
            if scaled and e <= scaled[-1][0]:
                e = scaled[-1][0] + 1
            scaled.append((e, v))
        return LossWeights(self.lambda3, self.lambda4, self.lambda5, scaled)


def total_loss(terms: Mapping[str, object], weights: LossWeights, epoch: int):
    """lambda1*z_paired + lambda2*z_unpaired + lambda3*cd_paired
    + lambda4*cd_unpaired + lambda5*g."""
    lam12 = weights.lambda12(epoch)
    zero = torch.tensor(0.0, dtype=torch.float64)

    def term(name):
        return _t(terms.get(name, 0.0)) if terms.get(name) is not None else zero

    return (
        lam12 * term("z_paired")
        + lam12 * term("z_unpaired")
        + weights.lambda3 * term("cd_paired")
        + weights.lambda4 * term("cd_unpaired")
        + weights.lambda5 * term("g")
    )
