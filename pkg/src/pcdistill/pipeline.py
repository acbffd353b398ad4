"""Two-stage training and evaluation.

Stage 1 pretrains two autoencoders (complete and incomplete pools) on the
chamfer reconstruction loss; the incomplete encoder, complete decoder,
frozen complete encoder and per-category mean latent codes form the prior.

Stage 2 trains the completion network: weight distillation (copy-init from
the prior), feature distillation (latent KL toward the frozen complete
encoder / category means), supervised chamfer on the scarce pairs,
self-supervised chamfer through the degradation mask on unpaired partials,
and an optional least-squares adversarial term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import nets
from .degradation import DegradationConfig, resample_indices, selection_indices
from .geometry import MetricConfig, PointCloud, chamfer_distance, f1_score
from .losses import (
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    category_mean_code,
    chamfer_loss,
    latent_distance,
    total_loss,
)
from .nets import ArchConfig, LatentCode, ModelParams


@dataclass
class TrainingConfig:
    stage1_epochs: int = 300
    stage2_epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    latent_distance: str = "kl"
    use_weight_distill_encoder: bool = True
    use_weight_distill_decoder: bool = True
    use_feature_distill: bool = True
    use_self_supervised: bool = True
    use_discriminator: bool = True
    seed: int = 0
    validation_fraction: float = 0.1
    deterministic: bool = True

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_jsonable(self) -> dict:
        d = asdict(self)
        d["weights"]["schedule"] = [list(x) for x in d["weights"]["schedule"]]
        return d


@dataclass
class StagePrior:
    encoder_incomplete: ModelParams
    decoder_complete: ModelParams
    encoder_complete: ModelParams
    category_means: Dict[int, LatentCode]

    def global_mean(self) -> LatentCode:
        vals = np.mean([c.values for c in self.category_means.values()], axis=0)
        return LatentCode(vals)


def _stack(clouds: Sequence[PointCloud]) -> torch.Tensor:
    return torch.tensor(
        np.stack([c.points for c in clouds]), dtype=torch.float64
    )


def _setup_determinism(cfg: TrainingConfig):
    if cfg.deterministic:
        torch.set_num_threads(1)


def _adam(tensors: Dict[str, torch.Tensor], cfg: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        list(tensors.values()),
        lr=cfg.learning_rate,
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )


def _train_autoencoder(
    clouds: Sequence[PointCloud], cfg: TrainingConfig, seed: int
) -> Tuple[ModelParams, ModelParams, List[float]]:
    enc = nets.to_tensors(nets.init_params("encoder", seed, cfg.arch), requires_grad=True)
    dec = nets.to_tensors(nets.init_params("decoder", seed + 1, cfg.arch), requires_grad=True)
    opt = _adam({**{f"e.{k}": v for k, v in enc.items()},
                 **{f"d.{k}": v for k, v in dec.items()}}, cfg)
    rng = np.random.default_rng(seed + 2)
    history: List[float] = []
    n = len(clouds)
    for _epoch in range(cfg.stage1_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = [clouds[i] for i in order[start : start + cfg.batch_size]]
            x = _stack(batch)
            z = nets.encoder_apply(enc, x)
            pred = nets.decoder_apply(dec, z)
            loss = chamfer_loss(pred, x, cfg.metric.gamma)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite autoencoder loss at epoch {_epoch + 1}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
    return nets.from_tensors("encoder", enc), nets.from_tensors("decoder", dec), history


def train_stage1(
    complete: Sequence[PointCloud],
    incomplete: Sequence[PointCloud],
    cfg: TrainingConfig,
) -> Tuple[StagePrior, Dict[str, List[float]]]:
    """Reconstruction pretraining of both autoencoders; returns the prior
    (E_i, D_c, frozen E_c, category mean codes) and per-epoch loss history."""
    if not complete or not incomplete:
        raise ValueError("both cloud pools must be nonempty")
    _setup_determinism(cfg)
    e_c, d_c, hist_c = _train_autoencoder(complete, cfg, cfg.seed * 2 + 1)
    e_i, _d_i, hist_i = _train_autoencoder(incomplete, cfg, cfg.seed * 2 + 101)
    codes = [nets.encoder_forward(e_c, c) for c in complete]
    labels = [c.category if c.category is not None else -1 for c in complete]
    means = category_mean_code(codes, labels)
    prior = StagePrior(
        encoder_incomplete=e_i,
        decoder_complete=d_c,
        encoder_complete=e_c,
        category_means=means,
    )
    return prior, {"complete": hist_c, "incomplete": hist_i}


def _predict(enc_t, dec_t, x: torch.Tensor) -> torch.Tensor:
    return nets.decoder_apply(dec_t, nets.encoder_apply(enc_t, x))


def _degrade_batch(
    pred: torch.Tensor,
    partials: Sequence[PointCloud],
    cfg: DegradationConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Differentiable gather of the degradation selection, per batch item.

    Selection indices are computed on detached coordinates and treated as
    constants; gradients reach only the selected predicted points."""
    pred_np = pred.detach().numpy()
    out = []
    for b, partial in enumerate(partials):
        sel, _ = selection_indices(pred_np[b], partial.points, cfg, rng)
        res = resample_indices(len(sel), cfg.output_size, rng)
        out.append(pred[b][torch.from_numpy(sel[res])])
    return torch.stack(out)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_z_paired: Optional[float]
    loss_z_unpaired: Optional[float]
    loss_cd_paired: float
    loss_cd_unpaired: Optional[float]
    loss_g: Optional[float]
    loss_d: Optional[float]
    val_cd_e4: float
    val_f1: float


def _mean_or_none(vals: List[float]) -> Optional[float]:
    return float(np.mean(vals)) if vals else None


def train_stage2(
    prior: Optional[StagePrior],
    paired: Sequence[Tuple[PointCloud, PointCloud]],
    unpaired_incomplete: Sequence[PointCloud],
    cfg: TrainingConfig,
) -> Tuple[ModelParams, ModelParams, List[EpochRecord]]:
    """Prior distillation + self-supervised completion.

    `paired` holds (incomplete, complete) cloud pairs. `prior` may be None
    only when every distillation flag is off (no-prior baseline). Returns
    the best-validation encoder/decoder and the epoch history.
    """
    _setup_determinism(cfg)
    needs_prior = (
        cfg.use_weight_distill_encoder
        or cfg.use_weight_distill_decoder
        or cfg.use_feature_distill
    )
    if needs_prior and prior is None:
        raise ValueError("configuration requires a Stage-1 prior")
    if not paired:
        raise ValueError("at least one paired sample is required")

    rng = np.random.default_rng(cfg.seed + 7)
    deg_rng = np.random.default_rng(cfg.seed + 13)

    # held-out validation pairs for model selection
    order = rng.permutation(len(paired))
    n_val = max(1, int(round(cfg.validation_fraction * len(paired)))) if len(paired) > 1 else 0
    val_pairs = [paired[i] for i in order[:n_val]]
    train_pairs = [paired[i] for i in order[n_val:]] or list(paired)

    if cfg.use_weight_distill_encoder:
        e0 = nets.distill_weights(prior.encoder_incomplete, prior.encoder_incomplete)
    else:
        e0 = nets.init_params("encoder", cfg.seed + 301, cfg.arch)
    if cfg.use_weight_distill_decoder:
        d0 = nets.distill_weights(prior.decoder_complete, prior.decoder_complete)
    else:
        d0 = nets.init_params("decoder", cfg.seed + 302, cfg.arch)
    enc_t = nets.to_tensors(e0, requires_grad=True)
    dec_t = nets.to_tensors(d0, requires_grad=True)
    gen_opt = _adam({**{f"e.{k}": v for k, v in enc_t.items()},
                     **{f"d.{k}": v for k, v in dec_t.items()}}, cfg)

    use_disc = cfg.use_discriminator and cfg.use_self_supervised and unpaired_incomplete
    if use_disc:
        disc_t = nets.to_tensors(
            nets.init_params("discriminator", cfg.seed + 303, cfg.arch), requires_grad=True
        )
        disc_opt = _adam(disc_t, cfg)

    frozen_ec = nets.to_tensors(prior.encoder_complete) if prior is not None else None
    zc_cache: Dict[int, torch.Tensor] = {}

    def paired_targets(batch_complete: Sequence[PointCloud]) -> torch.Tensor:
        missing = [c for c in batch_complete if id(c) not in zc_cache]
        if missing:
            with torch.no_grad():
                z = nets.encoder_apply(frozen_ec, _stack(missing))
            for c, zi in zip(missing, z):
                zc_cache[id(c)] = zi
        return torch.stack([zc_cache[id(c)] for c in batch_complete])

    def unpaired_targets(batch: Sequence[PointCloud]) -> torch.Tensor:
        rows = []
        for c in batch:
            code = prior.category_means.get(
                c.category if c.category is not None else -1
            )
            if code is None:
                code = prior.global_mean()
            rows.append(torch.tensor(code.values, dtype=torch.float64))
        return torch.stack(rows)

    weights = cfg.weights.rescaled(cfg.stage2_epochs)
    use_selfsup = cfg.use_self_supervised and len(unpaired_incomplete) > 0

    history: List[EpochRecord] = []
    best_cd = math.inf
    best = (e0.copy(), d0.copy())
    unpaired_cursor = 0
    unpaired_order = rng.permutation(len(unpaired_incomplete)) if use_selfsup else None

    def next_unpaired(count: int) -> List[PointCloud]:
        nonlocal unpaired_cursor, unpaired_order
        batch = []
        for _ in range(count):
            if unpaired_cursor >= len(unpaired_order):
                unpaired_order = rng.permutation(len(unpaired_incomplete))
                unpaired_cursor = 0
            batch.append(unpaired_incomplete[unpaired_order[unpaired_cursor]])
            unpaired_cursor += 1
        return batch

    for epoch in range(1, cfg.stage2_epochs + 1):
        ep: Dict[str, List[float]] = {k: [] for k in
            ("total", "z_paired", "z_unpaired", "cd_paired", "cd_unpaired", "g", "d")}
        order = rng.permutation(len(train_pairs))
        for start in range(0, len(train_pairs), cfg.batch_size):
            batch = [train_pairs[i] for i in order[start : start + cfg.batch_size]]
            x_in = _stack([p for p, _ in batch])
            x_gt = _stack([c for _, c in batch])
            z = nets.encoder_apply(enc_t, x_in)
            pred = nets.decoder_apply(dec_t, z)
            terms: Dict[str, torch.Tensor] = {
                "cd_paired": chamfer_loss(pred, x_gt, cfg.metric.gamma)
            }
            if cfg.use_feature_distill:
                terms["z_paired"] = latent_distance(
                    cfg.latent_distance, paired_targets([c for _, c in batch]), z
                )

            fake = None
            if use_selfsup:
                u_batch = next_unpaired(len(batch))
                u_in = _stack(u_batch)
                z_u = nets.encoder_apply(enc_t, u_in)
                pred_u = nets.decoder_apply(dec_t, z_u)
                fake = _degrade_batch(pred_u, u_batch, cfg.degradation, deg_rng)
                terms["cd_unpaired"] = chamfer_loss(u_in, fake, cfg.metric.gamma)
                if cfg.use_feature_distill:
                    terms["z_unpaired"] = latent_distance(
                        cfg.latent_distance, unpaired_targets(u_batch), z_u
                    )
                if use_disc:
                    terms["g"] = adversarial_g_loss(
                        nets.discriminator_apply(disc_t, fake)
                    )

            loss = total_loss(terms, weights, epoch)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite stage-2 loss at epoch {epoch}"
                )
            gen_opt.zero_grad()
            if use_disc:
                disc_opt.zero_grad()
            loss.backward()
            gen_opt.step()

            if use_disc and fake is not None:
                score_real = nets.discriminator_apply(disc_t, u_in)
                score_fake = nets.discriminator_apply(disc_t, fake.detach())
                d_loss = adversarial_d_loss(score_real, score_fake)
                disc_opt.zero_grad()
                d_loss.backward()
                disc_opt.step()
                ep["d"].append(float(d_loss.detach()))

            ep["total"].append(float(loss.detach()))
            for key in ("z_paired", "z_unpaired", "cd_paired", "cd_unpaired", "g"):
                if key in terms:
                    ep[key].append(float(terms[key].detach()))

        e_cur = nets.from_tensors("encoder", enc_t)
        d_cur = nets.from_tensors("decoder", dec_t)
        eval_pairs = val_pairs or train_pairs
        report = evaluate(e_cur, d_cur, eval_pairs, cfg.metric)
        if report["mean_cd_e4"] < best_cd:
            best_cd = report["mean_cd_e4"]
            best = (e_cur, d_cur)
        history.append(
            EpochRecord(
                epoch=epoch,
                loss_total=float(np.mean(ep["total"])),
                loss_z_paired=_mean_or_none(ep["z_paired"]),
                loss_z_unpaired=_mean_or_none(ep["z_unpaired"]),
                loss_cd_paired=float(np.mean(ep["cd_paired"])),
                loss_cd_unpaired=_mean_or_none(ep["cd_unpaired"]),
                loss_g=_mean_or_none(ep["g"]),
                loss_d=_mean_or_none(ep["d"]),
                val_cd_e4=report["mean_cd_e4"],
                val_f1=report["mean_f1"],
            )
        )
    return best[0], best[1], history


def predict(encoder: ModelParams, decoder: ModelParams, cloud: PointCloud) -> PointCloud:
    z = nets.encoder_forward(encoder, cloud)
    out = nets.decoder_forward(decoder, z)
    return PointCloud(out.points, category=cloud.category, id=cloud.id, pair_id=cloud.pair_id)


def evaluate(
    encoder: ModelParams,
    decoder: ModelParams,
    test_pairs: Sequence[Tuple[PointCloud, PointCloud]],
    metric: MetricConfig = MetricConfig(),
) -> dict:
    """Mean CD (x 1e4 per reporting convention), mean F1, per-category rows."""

    def predictor(partial):
        return predict(encoder, decoder, partial)

    return _evaluate_with(predictor, test_pairs, metric)


def evaluate_identity(
    test_pairs: Sequence[Tuple[PointCloud, PointCloud]],
    metric: MetricConfig = MetricConfig(),
) -> dict:
    """Sanity mode: score each ground truth against itself (CD 0, F1 1)."""
    pairs = [(complete, complete) for _partial, complete in test_pairs]
    return _evaluate_with(lambda c: c, pairs, metric)


def _evaluate_with(predictor, test_pairs, metric: MetricConfig) -> dict:
    if not test_pairs:
        raise ValueError("test set is empty")
    rows = []
    for partial, complete in test_pairs:
        pred = predictor(partial)
        cat = complete.category if complete.category is not None else -1
        rows.append(
            (cat, chamfer_distance(pred, complete, metric) * 1e4, f1_score(pred, complete, metric))
        )
    cats = sorted({c for c, _, _ in rows})
    per_category = {
        c: {
            "count": sum(1 for cc, _, _ in rows if cc == c),
            "cd_e4": float(np.mean([cd for cc, cd, _ in rows if cc == c])),
            "f1": float(np.mean([f1 for cc, _, f1 in rows if cc == c])),
        }
        for c in cats
    }
    return {
        "mean_cd_e4": float(np.mean([cd for _, cd, _ in rows])),
        "mean_f1": float(np.mean([f1 for _, _, f1 in rows])),
        "per_category": per_category,
        "count": len(rows),
    }
