"""Command-line surface: data generation, the two training stages,
evaluation, degradation, and SVG rendering.

Every command exits nonzero on failure with a single ``ERROR: ...`` line on
stderr. ``--seed`` fully determines stochastic behavior; PCDISTILL_WORKERS caps
data-generation parallelism (0 = serial).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import datasetgen, dataio, pipeline
from .dataio import config_digest, group_params, load_checkpoint, save_checkpoint
from .degradation import METHODS, DegradationConfig, degrade
from .geometry import MetricConfig, PointCloud
from .losses import LATENT_DISTANCE_KINDS, LossWeights
from .nets import ArchConfig, LatentCode, ModelParams
from .pipeline import StagePrior, TrainingConfig

STAGE1_CKPT = "stage1.rpdc"
STAGE2_CKPT = "stage2.rpdc"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run config files


def _build_section(cls, data: dict, path: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise CliError(f"unknown config key(s) {sorted(unknown)} in {path}")
    return data


def config_from_dict(data: dict, source: str = "<config>") -> TrainingConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in (
        ("weights", LossWeights),
        ("degradation", DegradationConfig),
        ("metric", MetricConfig),
        ("arch", ArchConfig),
    ):
        if name in data:
            section = _build_section(cls, data.pop(name), f"{source}:{name}")
            if name == "weights" and "schedule" in section:
                section["schedule"] = [tuple(x) for x in section["schedule"]]
            kwargs[name] = cls(**section)
    top = _build_section(TrainingConfig, data, source)
    top.pop("adam_betas", None)
    kwargs.update(top)
    try:
        return TrainingConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config {source}: {e}") from e


def load_run_config(path: Optional[str]) -> TrainingConfig:
    if path is None:
        return TrainingConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a JSON object")
    return config_from_dict(data, path)


def _apply_overrides(cfg: TrainingConfig, args) -> TrainingConfig:
    updates = {}
    for flag, field_name in (
        ("seed", "seed"),
        ("stage1_epochs", "stage1_epochs"),
        ("stage2_epochs", "stage2_epochs"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
        ("latent_distance", "latent_distance"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            updates[field_name] = value
    for flag, field_name in (
        ("no_weight_distill_encoder", "use_weight_distill_encoder"),
        ("no_weight_distill_decoder", "use_weight_distill_decoder"),
        ("no_feature_distill", "use_feature_distill"),
        ("no_self_sup", "use_self_supervised"),
        ("no_discriminator", "use_discriminator"),
    ):
        if getattr(args, flag, False):
            updates[field_name] = False
    if getattr(args, "width_scale", None) is not None or getattr(args, "n_points", None) is not None:
        scale = args.width_scale if args.width_scale is not None else 1.0
        arch = cfg.arch.scaled(scale, n_points=getattr(args, "n_points", None) or cfg.arch.n_points)
        updates["arch"] = arch
        deg = dataclasses.replace(cfg.degradation, output_size=arch.n_points)
        updates["degradation"] = deg
    return dataclasses.replace(cfg, **updates) if updates else cfg


# ---------------------------------------------------------------------------
# csv helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: List[str], rows: List[List]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _cat_mean_extras(means: Dict[int, LatentCode]) -> Dict[str, np.ndarray]:
    return {f"cat_mean/{label}": code.values for label, code in means.items()}


def _extract_prior(entries: Dict[str, np.ndarray]) -> StagePrior:
    params, extra = group_params(entries)
    for key in ("encoder_incomplete", "decoder_complete", "encoder_complete"):
        if key not in params:
            raise CliError(f"prior checkpoint is missing {key!r}")
    means = {}
    for name, arr in extra.items():
        if name.startswith("cat_mean/"):
            means[int(name.split("/", 1)[1])] = LatentCode(arr)
    if not means:
        raise CliError("prior checkpoint has no category mean codes")
    return StagePrior(
        encoder_incomplete=params["encoder_incomplete"],
        decoder_complete=params["decoder_complete"],
        encoder_complete=params["encoder_complete"],
        category_means=means,
    )


def _check_arch(params: ModelParams, cfg: TrainingConfig, what: str):
    from .nets import init_params

    expected = init_params(params.role, 0, cfg.arch).shapes()
    if params.shapes() != expected:
        raise CliError(
            f"{what}: architecture mismatch (checkpoint {params.shapes()} vs config {expected})"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    manifest = dataio.build_splits(
        num_pairs=args.num_pairs,
        paired_fraction=args.paired_fraction,
        extra_unpaired_complete=args.extra_unpaired_complete,
        extra_unpaired_incomplete=args.extra_unpaired_incomplete,
        seed=args.seed,
        num_test=args.num_test,
        num_categories=args.categories,
    )
    bundle = datasetgen.generate_dataset(manifest, seed=args.seed, n_points=args.n_points)
    datasetgen.save_dataset(out, bundle)
    counts: Dict[str, int] = {}
    for it in manifest.items:
        counts[it.role] = counts.get(it.role, 0) + 1
    for role in dataio.ROLES:
        print(f"{role}: {counts.get(role, 0)}")
    print(f"total: {len(manifest.items)}")


def _load_bundle(path) -> datasetgen.DatasetBundle:
    try:
        return datasetgen.load_dataset(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load dataset {path}: {e}") from e


def cmd_pretrain(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    bundle = _load_bundle(args.data)
    complete = bundle.role_clouds("unpaired_complete")
    incomplete = bundle.role_clouds("unpaired_incomplete")
    if not complete or not incomplete:
        raise CliError("manifest lacks unpaired_complete / unpaired_incomplete items")
    prior, hist = pipeline.train_stage1(complete, incomplete, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg.to_jsonable())
    save_checkpoint(
        out / STAGE1_CKPT,
        {
            "encoder_incomplete": prior.encoder_incomplete,
            "decoder_complete": prior.decoder_complete,
            "encoder_complete": prior.encoder_complete,
        },
        epoch=cfg.stage1_epochs,
        digest=digest,
        extra=_cat_mean_extras(prior.category_means),
    )
    rows = [
        [e + 1, lc, li]
        for e, (lc, li) in enumerate(zip(hist["complete"], hist["incomplete"]))
    ]
    write_csv(out / "stage1_metrics.csv", ["epoch", "loss_complete", "loss_incomplete"], rows)
    print(f"stage1 checkpoint: {out / STAGE1_CKPT}")


def cmd_distill(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    bundle = _load_bundle(args.data)
    paired = bundle.pairs("paired")
    if not paired:
        raise CliError("manifest has no paired samples")
    unpaired = bundle.role_clouds("unpaired_incomplete")

    prior = None
    if not args.no_prior:
        if args.prior is None:
            raise CliError("--prior is required unless --no-prior is given")
        try:
            entries, _epoch, _digest = load_checkpoint(args.prior)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot load prior {args.prior}: {e}") from e
        prior = _extract_prior(entries)
        _check_arch(prior.encoder_incomplete, cfg, "prior encoder")
        _check_arch(prior.decoder_complete, cfg, "prior decoder")
    else:
        cfg = dataclasses.replace(
            cfg,
            use_weight_distill_encoder=False,
            use_weight_distill_decoder=False,
            use_feature_distill=False,
        )

    enc, dec, history = pipeline.train_stage2(prior, paired, unpaired, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg.to_jsonable())
    save_checkpoint(
        out / STAGE2_CKPT,
        {"encoder": enc, "decoder": dec},
        epoch=cfg.stage2_epochs,
        digest=digest,
    )
    rows = [
        [
            r.epoch, r.loss_total, r.loss_z_paired, r.loss_z_unpaired,
            r.loss_cd_paired, r.loss_cd_unpaired, r.loss_g, r.loss_d,
            r.val_cd_e4, r.val_f1,
        ]
        for r in history
    ]
    write_csv(
        out / "metrics.csv",
        [
            "epoch", "loss_total", "loss_z_paired", "loss_z_unpaired",
            "loss_cd_paired", "loss_cd_unpaired", "loss_g", "loss_d",
            "val_cd_e4", "val_f1",
        ],
        rows,
    )
    print(f"stage2 checkpoint: {out / STAGE2_CKPT}")
    print(f"best val CD x1e4: {min(r.val_cd_e4 for r in history)!r}")


def cmd_eval(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    bundle = _load_bundle(args.data)
    test_pairs = bundle.pairs("test")
    if not test_pairs:
        raise CliError("manifest has no test items")
    if args.identity:
        report = pipeline.evaluate_identity(test_pairs, cfg.metric)
    else:
        if args.checkpoint is None:
            raise CliError("--checkpoint is required unless --identity is given")
        try:
            entries, _epoch, _digest = load_checkpoint(args.checkpoint)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
        params, _extra = group_params(entries)
        if "encoder" not in params or "decoder" not in params:
            raise CliError("checkpoint does not contain a stage-2 encoder/decoder")
        _check_arch(params["encoder"], cfg, "encoder")
        _check_arch(params["decoder"], cfg, "decoder")
        report = pipeline.evaluate(params["encoder"], params["decoder"], test_pairs, cfg.metric)

    print(f"mean CD x1e4: {report['mean_cd_e4']:.4f}")
    print(f"mean F1:      {report['mean_f1']:.4f}")
    print("category  count  cd_e4      f1")
    rows = []
    for cat, stats in sorted(report["per_category"].items()):
        print(f"{cat:>8}  {stats['count']:>5}  {stats['cd_e4']:<9.4f}  {stats['f1']:.4f}")
        rows.append([cat, stats["count"], stats["cd_e4"], stats["f1"]])
    if args.out:
        write_csv(args.out, ["category", "count", "cd_e4", "f1"], rows)


def _read_cloud(path) -> PointCloud:
    try:
        return dataio.read_ply(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read cloud {path}: {e}") from e


def cmd_degrade(args):
    predicted = _read_cloud(args.predicted)
    partial = _read_cloud(args.partial)
    try:
        cfg = DegradationConfig(
            method=args.method,
            k=args.k,
            tau=args.tau,
            voxel_resolution=args.resolution,
            output_size=args.output_size if args.output_size else len(predicted),
            seed=args.seed or 0,
        )
    except ValueError as e:
        raise CliError(str(e)) from e
    result = degrade(predicted, partial, cfg)
    dataio.write_ply(args.out, result)
    print(f"degraded cloud ({len(result)} points): {args.out}")


_VIEW_AXES = {"x": (1, 2, 0), "y": (0, 2, 1), "z": (0, 1, 2)}


def cmd_render(args):
    cloud = _read_cloud(args.cloud)
    view = args.view or "z"
    if view not in _VIEW_AXES:
        raise CliError(f"unknown view {view!r} (choose from x, y, z)")
    ax, ay, depth_axis = _VIEW_AXES[view]
    pts = cloud.points
    # painter's order: far points first, nearer points drawn on top
    order = np.argsort(pts[:, depth_axis], kind="stable")
    size = 480.0
    margin = 1.2

    def to_px(v):
        return (v + margin) / (2 * margin) * size

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" '
        f'height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">',
        f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>',
    ]
    for i in order:
        x, y, d = pts[i, ax], pts[i, ay], pts[i, depth_axis]
        r = 1.5 + 1.0 * (d + 1.0) / 2.0  # nearer points slightly larger
        lines.append(
            f'<circle cx="{to_px(x):.3f}" cy="{size - to_px(y):.3f}" '
            f'r="{r:.3f}" fill="#1f77b4" fill-opacity="0.6"/>'
        )
    lines.append("</svg>")
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    print(f"rendered {len(pts)} points: {args.out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcdistill")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-pairs", type=int, default=200)
    g.add_argument("--paired-fraction", type=float, default=0.1)
    g.add_argument("--categories", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-points", type=int, default=2048)
    g.add_argument("--num-test", type=int, default=20)
    g.add_argument("--extra-unpaired-complete", type=int, default=0)
    g.add_argument("--extra-unpaired-incomplete", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def add_train_common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--learning-rate", dest="learning_rate", type=float)
        sp.add_argument("--width-scale", dest="width_scale", type=float)
        sp.add_argument("--n-points", dest="n_points", type=int)

    t1 = sub.add_parser("pretrain", help="stage 1: reconstruction pretraining")
    t1.add_argument("--data", required=True)
    t1.add_argument("--out", required=True)
    t1.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    add_train_common(t1)
    t1.set_defaults(func=cmd_pretrain)

    t2 = sub.add_parser("distill", help="stage 2: prior distillation")
    t2.add_argument("--data", required=True)
    t2.add_argument("--prior")
    t2.add_argument("--out", required=True)
    t2.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    t2.add_argument("--latent-distance", dest="latent_distance", choices=LATENT_DISTANCE_KINDS)
    t2.add_argument("--no-weight-distill-encoder", action="store_true")
    t2.add_argument("--no-weight-distill-decoder", action="store_true")
    t2.add_argument("--no-feature-distill", action="store_true")
    t2.add_argument("--no-self-sup", action="store_true")
    t2.add_argument("--no-discriminator", action="store_true")
    t2.add_argument("--no-prior", action="store_true",
                    help="train the supervised baseline without any stage-1 prior")
    add_train_common(t2)
    t2.set_defaults(func=cmd_distill)

    ev = sub.add_parser("eval", help="evaluate a stage-2 checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint")
    ev.add_argument("--out")
    ev.add_argument("--identity", action="store_true",
                    help="sanity mode: evaluate ground truth against itself")
    add_train_common(ev)
    ev.set_defaults(func=cmd_eval)

    d = sub.add_parser("degrade", help="degrade a predicted cloud toward a partial")
    d.add_argument("--predicted", required=True)
    d.add_argument("--partial", required=True)
    d.add_argument("--method", choices=METHODS, default="k_mask")
    d.add_argument("--k", type=int, default=4)
    d.add_argument("--tau", type=float, default=0.05)
    d.add_argument("--resolution", type=int, default=32)
    d.add_argument("--output-size", type=int, default=0,
                   help="0 = match the predicted cloud size")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_degrade)

    r = sub.add_parser("render", help="orthographic SVG projection of a cloud")
    r.add_argument("--cloud", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--view", choices=sorted(_VIEW_AXES))
    r.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
