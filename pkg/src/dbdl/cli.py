"""Command-line surface: dataset generation, training, deblurring, cross-validation.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Machine-readable
results (CSV rows, selected k) go to standard output; progress and
diagnostics to standard error.
"""

import argparse
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .imaging import (GaussianKernelSpec, Image, align_for_kernel,
                      center_crop_to_common, extract_patch_pairs,
                      generate_blurred_dataset, load_image, pool_patch_sets,
                      random_patches, save_image)
from .inference import DeblurRequest, deblur
from .metrics import MetricReport, laplace_variance, psnr, sobel_variance, ssim
from .training import (CheckpointError, ModelCheckpoint, TrainConfig,
                       config_from_text, load_checkpoint, save_checkpoint,
                       stderr_progress, train_no_correspondence, train_paired)

CSV_HEADER = "image,k,sigma,mode,psnr,ssim,sobel_var,laplace_var"
IMAGE_SUFFIXES = (".pgm", ".png")
SELECTION_METRICS = ("psnr", "sobel_var", "laplace_var")


@dataclass
class CrossValPlan:
    """Candidate kernel sizes with one trained checkpoint each."""

    candidate_ks: list
    selection_metric: str
    checkpoint_paths: dict

    def __post_init__(self):
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(f"selection metric must be one of {SELECTION_METRICS}")
        for k in self.candidate_ks:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"candidate kernel sizes must be odd and >= 1, got {k}")
            if k not in self.checkpoint_paths:
                raise ValueError(f"missing checkpoint for k={k}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    return str(value)


def csv_row(image: str, k, sigma, mode, report: MetricReport) -> str:
    cells = [image, _fmt(k), _fmt(sigma), _fmt(mode), _fmt(report.psnr),
             _fmt(report.ssim), _fmt(report.sobel_var), _fmt(report.laplace_var)]
    return ",".join(cells)


def _list_images(directory: Path) -> list:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _split_counts(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


# ---------------------------------------------------------------------------
# blur-gen
# ---------------------------------------------------------------------------

def cmd_blur_gen(args) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        print(f"error: input directory {in_dir} does not exist", file=sys.stderr)
        return 1
    inputs = _list_images(in_dir)
    if not inputs:
        print(f"error: no .pgm/.png images in {in_dir}", file=sys.stderr)
        return 1
    spec = GaussianKernelSpec(args.k, args.sigma)
    records = generate_blurred_dataset(inputs, spec, args.out_dir)
    print(f"wrote {len(records)} blurred images to {args.out_dir}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_FLAG_TO_FIELD = {
    "mode": "mode", "bme": "bme", "atoms": "n_atoms", "lam": "lam",
    "lr": "lr", "iters": "outer_iters", "patch": "p", "k": "k",
    "patches": "n_patches", "seed": "seed", "fista_iters": "fista_iters",
    "fista_tol": "fista_tol", "adam_steps": "adam_steps", "b_every": "b_every",
}


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = config_from_text(Path(args.config).read_text(encoding="utf-8"), cfg)
    overrides = {}
    for flag, field_name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = value
    if getattr(args, "fast", False):
        overrides["deterministic"] = False
    if overrides.get("mode") == "nc":
        overrides["mode"] = "no_correspondence"
    merged = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    merged.update(overrides)
    return TrainConfig(**merged)


def _load_training_patches(cfg: TrainConfig, hr_dir: Path, lr_dir: Path):
    hr_paths = _list_images(hr_dir)
    lr_paths = _list_images(lr_dir)
    if not hr_paths or not lr_paths:
        raise RuntimeError(f"no training images found in {hr_dir} / {lr_dir}")
    q = cfg.p - cfg.k + 1

    if cfg.mode == "paired":
        if len(hr_paths) != len(lr_paths):
            raise RuntimeError(
                f"paired mode needs matching image counts, got "
                f"{len(hr_paths)} HR vs {len(lr_paths)} LR"
            )
        counts = _split_counts(cfg.n_patches, len(hr_paths))
        hr_sets, lr_sets = [], []
        for i, (hp, lp, n) in enumerate(zip(hr_paths, lr_paths, counts)):
            if n == 0:
                continue
            hr_img, lr_img = align_for_kernel(load_image(hp), load_image(lp), cfg.k)
            hs, ls = extract_patch_pairs(hr_img, lr_img, cfg.p, cfg.k, n,
                                         cfg.seed + i)
            hr_sets.append(hs)
            lr_sets.append(ls)
        return pool_patch_sets(hr_sets), pool_patch_sets(lr_sets)

    hr_sets = []
    for i, (path, n) in enumerate(zip(hr_paths, _split_counts(cfg.n_patches, len(hr_paths)))):
        if n:
            hr_sets.append(random_patches(load_image(path), cfg.p, n, cfg.seed + i))
    lr_sets = []
    for i, (path, n) in enumerate(zip(lr_paths, _split_counts(cfg.n_patches, len(lr_paths)))):
        if n:
            lr_sets.append(random_patches(load_image(path), q, n, cfg.seed + 7919 + i))
    return pool_patch_sets(hr_sets), pool_patch_sets(lr_sets)


def cmd_train(args) -> int:
    try:
        cfg = _build_config(args)
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    hr_patches, lr_patches = _load_training_patches(
        cfg, Path(args.hr_dir), Path(args.lr_dir))
    progress = stderr_progress(every=50)
    if cfg.mode == "paired":
        cp, _ = train_paired(hr_patches, lr_patches, cfg, progress)
    else:
        cp, _ = train_no_correspondence(hr_patches, lr_patches, cfg, progress)
    save_checkpoint(cp, args.out)
    print(f"checkpoint written to {args.out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# deblur
# ---------------------------------------------------------------------------

def _score(output: Image, gt: Optional[Image]) -> MetricReport:
    report = MetricReport(
        sobel_var=sobel_variance(output),
        laplace_var=laplace_variance(output),
    )
    if gt is not None:
        a, b = center_crop_to_common(output, gt)
        report.psnr = psnr(a, b)
        report.ssim = ssim(a, b)
    return report


def cmd_deblur(args) -> int:
    cp = load_checkpoint(args.ckpt)
    lr_img = load_image(args.in_path)
    req = DeblurRequest(lr_img, cp, stride=args.stride,
                        lam_infer=args.lambda_infer,
                        fista_iters=args.fista_iters, fista_tol=args.fista_tol,
                        deterministic=not args.fast)
    output = deblur(req)
    save_image(output, args.out_path)
    gt = load_image(args.gt) if args.gt else None
    report = _score(output, gt)
    print(CSV_HEADER)
    print(csv_row(str(args.in_path), cp.k, args.sigma, cp.config.mode, report))
    return 0


# ---------------------------------------------------------------------------
# crossval
# ---------------------------------------------------------------------------

def run_crossval(plan: CrossValPlan, lr_image: Image, gt: Optional[Image] = None,
                 stride: int = 1, lam_infer: Optional[float] = None,
                 fista_iters: int = 200, fista_tol: float = 1e-6,
                 deterministic: bool = True):
    """Deblur with every candidate checkpoint and pick the best-scoring k.

    Ties break toward the smallest k.  Returns (selected_k, rows, outputs)
    where rows are per-candidate dicts with the report and outputs maps
    k -> reconstructed Image.
    """
    if plan.selection_metric == "psnr" and gt is None:
        raise ValueError("psnr selection requires a ground-truth image")
    rows = []
    outputs = {}
    for k in sorted(plan.candidate_ks):
        cp = load_checkpoint(plan.checkpoint_paths[k])
        if cp.k != k:
            raise ValueError(
                f"checkpoint {plan.checkpoint_paths[k]} was trained with "
                f"k={cp.k}, plan says {k}"
            )
        req = DeblurRequest(lr_image, cp, stride=stride, lam_infer=lam_infer,
                            fista_iters=fista_iters, fista_tol=fista_tol,
                            deterministic=deterministic)
        output = deblur(req)
        outputs[k] = output
        report = _score(output, gt)
        rows.append({"k": k, "mode": cp.config.mode, "report": report})
    scores = [getattr(row["report"], plan.selection_metric) for row in rows]
    best = max(range(len(rows)), key=lambda i: (scores[i], -rows[i]["k"]))
    return rows[best]["k"], rows, outputs


def cmd_crossval(args) -> int:
    paths = [Path(p) for p in args.ckpt]
    ks = []
    path_by_k = {}
    for p in paths:
        cp = load_checkpoint(p)
        if cp.k in path_by_k:
            raise ValueError(f"duplicate checkpoint for k={cp.k}")
        ks.append(cp.k)
        path_by_k[cp.k] = p
    plan = CrossValPlan(ks, args.metric, path_by_k)
    lr_img = load_image(args.in_path)
    gt = load_image(args.gt) if args.gt else None
    selected, rows, outputs = run_crossval(
        plan, lr_img, gt, stride=args.stride, lam_infer=args.lambda_infer,
        fista_iters=args.fista_iters, fista_tol=args.fista_tol,
        deterministic=not args.fast)
    print(CSV_HEADER)
    for row in rows:
        print(csv_row(str(args.in_path), row["k"], args.sigma, row["mode"],
                      row["report"]))
    print(f"selected_k={selected}")
    if args.out_img:
        save_image(outputs[selected], args.out_img)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbdl",
        description="Joint blur-operator and dictionary learning for deblurring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("blur-gen", help="synthesize a Gaussian-blurred dataset")
    p_gen.add_argument("--k", type=int, required=True, help="kernel side (odd)")
    p_gen.add_argument("--sigma", type=float, required=True)
    p_gen.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    p_gen.add_argument("--out", dest="out_dir", required=True, metavar="DIR")
    p_gen.set_defaults(func=cmd_blur_gen)

    p_tr = sub.add_parser("train", help="train a deblurring model")
    p_tr.add_argument("--mode", choices=["paired", "nc"], default=None)
    p_tr.add_argument("--bme", choices=["gr", "sr"], default=None)
    p_tr.add_argument("--k", type=int, default=None)
    p_tr.add_argument("--patch", type=int, default=None, help="HR patch side p")
    p_tr.add_argument("--atoms", type=int, default=None)
    p_tr.add_argument("--lambda", dest="lam", type=float, default=None)
    p_tr.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    p_tr.add_argument("--iters", type=int, default=None, help="outer iterations")
    p_tr.add_argument("--patches", type=int, default=None)
    p_tr.add_argument("--seed", type=int, default=None)
    p_tr.add_argument("--fista-iters", dest="fista_iters", type=int, default=None)
    p_tr.add_argument("--fista-tol", dest="fista_tol", type=float, default=None)
    p_tr.add_argument("--adam-steps", dest="adam_steps", type=int, default=None)
    p_tr.add_argument("--b-every", dest="b_every", type=int, default=None)
    p_tr.add_argument("--fast", action="store_true",
                      help="use fast (non-bit-reproducible) matrix products")
    p_tr.add_argument("--config", default=None, help="key=value config file")
    p_tr.add_argument("--hr-dir", dest="hr_dir", required=True)
    p_tr.add_argument("--lr-dir", dest="lr_dir", required=True)
    p_tr.add_argument("--out", required=True, help="checkpoint output path")
    p_tr.set_defaults(func=cmd_train)

    p_db = sub.add_parser("deblur", help="deblur one image with a checkpoint")
    p_db.add_argument("--ckpt", required=True)
    p_db.add_argument("--in", dest="in_path", required=True)
    p_db.add_argument("--out", dest="out_path", required=True)
    p_db.add_argument("--gt", default=None, help="ground truth for PSNR/SSIM")
    p_db.add_argument("--sigma", type=float, default=None,
                      help="stamp the blur sigma into the CSV row")
    p_db.add_argument("--stride", type=int, default=1)
    p_db.add_argument("--lambda-infer", dest="lambda_infer", type=float, default=None)
    p_db.add_argument("--fista-iters", dest="fista_iters", type=int, default=200)
    p_db.add_argument("--fista-tol", dest="fista_tol", type=float, default=1e-6)
    p_db.add_argument("--fast", action="store_true")
    p_db.set_defaults(func=cmd_deblur)

    p_cv = sub.add_parser("crossval",
                          help="pick the best kernel size among trained models")
    p_cv.add_argument("--ckpt", action="append", required=True,
                      help="checkpoint path (repeat per candidate k)")
    p_cv.add_argument("--in", dest="in_path", required=True)
    p_cv.add_argument("--metric", choices=list(SELECTION_METRICS), required=True)
    p_cv.add_argument("--gt", default=None)
    p_cv.add_argument("--sigma", type=float, default=None)
    p_cv.add_argument("--out-img", dest="out_img", default=None,
                      help="write the selected reconstruction here")
    p_cv.add_argument("--stride", type=int, default=1)
    p_cv.add_argument("--lambda-infer", dest="lambda_infer", type=float, default=None)
    p_cv.add_argument("--fista-iters", dest="fista_iters", type=int, default=200)
    p_cv.add_argument("--fista-tol", dest="fista_tol", type=float, default=1e-6)
    p_cv.add_argument("--fast", action="store_true")
    p_cv.set_defaults(func=cmd_crossval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ValueError, RuntimeError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
