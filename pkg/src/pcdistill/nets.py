"""Encoder, decoder and discriminator: named parameter containers plus
functional forwards.

Parameters live in :class:`ModelParams` (ordered name -> float64 array) so
they can be copied between stages, frozen, and serialized. Forwards are
plain functions over a dict of torch tensors, which makes weight
distillation a value copy and keeps autograd available for training and
gradient checks.

Architecture (defaults follow the PCN-style coarse completion net):
  encoder:       per-point 3 -> h1 -> h2, max-pool, tile+concat (2*h2),
                 per-point 2*h2 -> g1 -> latent, max-pool
  decoder:       latent -> d1 -> d2 -> 3*n_points, reshaped to (n_points, 3)
  discriminator: per-point 3 -> 64 -> 128 -> 256, softmax attention pooling,
                 head 256 -> 128 -> 64 -> 1, logistic output
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Mapping

import numpy as np
import torch

ROLES = ("encoder", "decoder", "discriminator")


@dataclass
class ArchConfig:
    latent_dim: int = 1024
    enc_h1: int = 128
    enc_h2: int = 256
    enc_g1: int = 512
    dec_h1: int = 1024
    dec_h2: int = 1024
    n_points: int = 2048
    disc_h1: int = 64
    disc_h2: int = 128
    disc_h3: int = 256
    disc_head1: int = 128
    disc_head2: int = 64

    def scaled(self, width_scale: float, n_points: int | None = None) -> "ArchConfig":
        """Shrink every hidden width by a factor (desk-scale runs)."""

        def s(w):
            return max(2, int(round(w * width_scale)))

        return ArchConfig(
            latent_dim=s(self.latent_dim),
            enc_h1=s(self.enc_h1),
            enc_h2=s(self.enc_h2),
            enc_g1=s(self.enc_g1),
            dec_h1=s(self.dec_h1),
            dec_h2=s(self.dec_h2),
            n_points=self.n_points if n_points is None else n_points,
            disc_h1=s(self.disc_h1),
            disc_h2=s(self.disc_h2),
            disc_h3=s(self.disc_h3),
            disc_head1=s(self.disc_head1),
            disc_head2=s(self.disc_head2),
        )


@dataclass
class LatentCode:
    """Latent vector produced by an encoder (1024-dim at full scale)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent code contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class ModelParams:
    """Ordered name -> array parameter collection for one network role."""

    role: str
    entries: Dict[str, np.ndarray]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        clean = {}
        for name, val in self.entries.items():
            arr = np.asarray(val, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} contains non-finite values")
            clean[name] = arr
        self.entries = clean

    def copy(self) -> "ModelParams":
        return ModelParams(self.role, {k: v.copy() for k, v in self.entries.items()})

    def shapes(self) -> Dict[str, tuple]:
        return {k: v.shape for k, v in self.entries.items()}


# Layer name/shape layout per role. Weight matrices are (fan_in, fan_out).
def _layer_plan(role: str, arch: ArchConfig):
    if role == "encoder":
        return [
            ("mlp1", 3, arch.enc_h1),
            ("mlp2", arch.enc_h1, arch.enc_h2),
            ("mlp3", 2 * arch.enc_h2, arch.enc_g1),
            ("mlp4", arch.enc_g1, arch.latent_dim),
        ]
    if role == "decoder":
        return [
            ("fc1", arch.latent_dim, arch.dec_h1),
            ("fc2", arch.dec_h1, arch.dec_h2),
            ("fc3", arch.dec_h2, 3 * arch.n_points),
        ]
    return [
        ("mlp1", 3, arch.disc_h1),
        ("mlp2", arch.disc_h1, arch.disc_h2),
        ("mlp3", arch.disc_h2, arch.disc_h3),
        ("attn", arch.disc_h3, 1),
        ("head1", arch.disc_h3, arch.disc_head1),
        ("head2", arch.disc_head1, arch.disc_head2),
        ("head3", arch.disc_head2, 1),
    ]


def init_params(role: str, seed: int, arch: ArchConfig = ArchConfig()) -> ModelParams:
    """Uniform fan-in initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    entries: Dict[str, np.ndarray] = {}
    for name, fan_in, fan_out in _layer_plan(role, arch):
        bound = 1.0 / np.sqrt(fan_in)
        entries[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries[f"{name}.b"] = rng.uniform(-bound, bound, size=(fan_out,))
    return ModelParams(role, entries)


def distill_weights(source: ModelParams, target: ModelParams) -> ModelParams:
    """Value-copy of source into a fresh container shaped like target."""
    if source.role != target.role:
        raise ValueError(f"role mismatch: {source.role} vs {target.role}")
    if source.shapes() != target.shapes():
        raise ValueError(
            f"shape mismatch: {source.shapes()} vs {target.shapes()}"
        )
    return source.copy()


def to_tensors(params: ModelParams, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
    return {
        k: torch.tensor(v, dtype=torch.float64, requires_grad=requires_grad)
        for k, v in params.entries.items()
    }


def from_tensors(role: str, tensors: Mapping[str, torch.Tensor]) -> ModelParams:
    return ModelParams(role, {k: t.detach().numpy().copy() for k, t in tensors.items()})


def _linear(t, name, x):
    return x @ t[f"{name}.w"] + t[f"{name}.b"]


def encoder_apply(t: Mapping[str, torch.Tensor], pts: torch.Tensor) -> torch.Tensor:
    """pts: (n, 3) or (B, n, 3). Returns (latent,) or (B, latent)."""
    h = torch.relu(_linear(t, "mlp1", pts))
    h = torch.relu(_linear(t, "mlp2", h))
    g = h.max(dim=-2).values  # global feature, permutation invariant
    tiled = g.unsqueeze(-2).expand_as(h)
    h2 = torch.cat([h, tiled], dim=-1)
    h2 = torch.relu(_linear(t, "mlp3", h2))
    h2 = _linear(t, "mlp4", h2)
    return h2.max(dim=-2).values


def decoder_apply(t: Mapping[str, torch.Tensor], z: torch.Tensor) -> torch.Tensor:
    """z: (latent,) or (B, latent). Returns (n_points, 3) or (B, n_points, 3)."""
    h = torch.relu(_linear(t, "fc1", z))
    h = torch.relu(_linear(t, "fc2", h))
    out = _linear(t, "fc3", h)
    return out.reshape(*out.shape[:-1], -1, 3)


def discriminator_apply(t: Mapping[str, torch.Tensor], pts: torch.Tensor) -> torch.Tensor:
    """pts: (n, 3) or (B, n, 3). Returns scalar score(s) in (0, 1)."""
    h = torch.relu(_linear(t, "mlp1", pts))
    h = torch.relu(_linear(t, "mlp2", h))
    h = torch.relu(_linear(t, "mlp3", h))
    scores = _linear(t, "attn", h).squeeze(-1)
    weights = torch.softmax(scores, dim=-1)
    g = (weights.unsqueeze(-1) * h).sum(dim=-2)
    h = torch.relu(_linear(t, "head1", g))
    h = torch.relu(_linear(t, "head2", h))
    return torch.sigmoid(_linear(t, "head3", h).squeeze(-1))


def _check_role(params: ModelParams, role: str):
    if params.role != role:
        raise ValueError(f"expected {role} params, got {params.role}")


def encoder_forward(params: ModelParams, cloud) -> LatentCode:
    _check_role(params, "encoder")
    pts = torch.tensor(np.asarray(cloud.points if hasattr(cloud, "points") else cloud))
    with torch.no_grad():
        z = encoder_apply(to_tensors(params), pts.to(torch.float64))
    return LatentCode(z.numpy())


def decoder_forward(params: ModelParams, z: LatentCode):
    from .geometry import PointCloud

    _check_role(params, "decoder")
    zt = torch.tensor(z.values, dtype=torch.float64)
    with torch.no_grad():
        pts = decoder_apply(to_tensors(params), zt)
    return PointCloud(pts.numpy())


def discriminator_forward(params: ModelParams, cloud) -> float:
    _check_role(params, "discriminator")
    pts = torch.tensor(np.asarray(cloud.points if hasattr(cloud, "points") else cloud))
    with torch.no_grad():
        s = discriminator_apply(to_tensors(params), pts.to(torch.float64))
    return float(s)


def backward(loss_fn, params: Mapping[str, ModelParams]) -> Dict[str, Dict[str, np.ndarray]]:
    """Reverse-mode gradients of a scalar loss w.r.t. every parameter entry.

    `loss_fn` receives {key: {name: tensor}} with grads enabled and must
    return a scalar tensor built from the functional forwards above.
    """
    tensors = {key: to_tensors(p, requires_grad=True) for key, p in params.items()}
    loss = loss_fn(tensors)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss value {float(loss.detach())}")
    loss.backward()
    grads: Dict[str, Dict[str, np.ndarray]] = {}
    for key, tdict in tensors.items():
        grads[key] = {}
        for name, t in tdict.items():
            g = t.grad
            arr = np.zeros_like(params[key].entries[name]) if g is None else g.numpy().copy()
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient for {key}/{name}")
            grads[key][name] = arr
    return grads
