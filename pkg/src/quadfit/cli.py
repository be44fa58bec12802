"""Command-line interface.

Subcommands compose the library: ``synth`` makes a corpus, ``fit`` /
``fit-batch`` optimize, ``em-refine`` reruns EM on saved shapes, ``eval``
scores fits, ``render`` draws overlays, ``check-grads`` compares analytic and
finite-difference gradients.  Every command writes its artifacts under
``--out`` and finishes with a manifest listing them.

Exit codes: 0 success, 1 validation/usage error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import dataio, emprior, metrics
from .autodiff import finite_diff_check
from .camera import Camera, project, save_mask_png
from .errors import NumericalError, QuadfitError, UserDataError
from .fitter import FitConfig, fit_batch_with_em, fit_single, init_params
from .losses import Annotation, LossWeights, Priors, total_energy
from .model import ParamState, TemplateModel, skin


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserDataError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="quadfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, annotations=False, config=False, fits=False):
        if model:
            p.add_argument("--model", required=True, help="model JSON file")
        if annotations:
            p.add_argument("--annotations", required=True,
                           help="annotation JSON file")
        if config:
            p.add_argument("--config", help="run configuration JSON")
        if fits:
            p.add_argument("--fits", required=True, help="fit reports JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--clusters", type=int, default=1,
                   help="number of shape clusters")
    p.add_argument("--spec", help="synth spec JSON (overrides --count/--clusters)")
    p.add_argument("--noise-px", type=float, default=0.0,
                   help="keypoint noise sigma in pixels")
    p.add_argument("--dropout", type=float, default=0.0,
                   help="visibility dropout probability")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64),
                   metavar=("W", "H"))

    p = sub.add_parser("fit", help="fit a single image")
    common(p, annotations=True, config=True)
    p.add_argument("--id", help="image id (default: first loaded)")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--clusters", type=int, default=None)

    p = sub.add_parser("fit-batch", help="fit a corpus on the shared schedule")
    common(p, annotations=True, config=True)
    p.add_argument("--em", action="store_true",
                   help="interleave EM updates of the mixture prior")
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")

    p = sub.add_parser("em-refine", help="run EM on shapes from saved fits")
    common(p, fits=True)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--rounds", type=int, default=200, help="maximum EM rounds")
    p.add_argument("--tol", type=float, default=1e-9,
                   help="stop when the log-likelihood gain drops below this")

    p = sub.add_parser("eval", help="score fits against annotations")
    common(p, annotations=True, fits=True)
    p.add_argument("--tau", type=float, default=None,
                   help="PCK threshold factor (default 0.15)")

    p = sub.add_parser("render", help="draw mask/keypoint/joint overlays")
    common(p, annotations=True, fits=True)
    p.add_argument("--id", action="append", dest="ids",
                   help="image id to render (repeatable; default: all)")

    p = sub.add_parser("check-grads", help="analytic vs finite-difference gradients")
    common(p)
    p.add_argument("--points", type=int, default=20,
                   help="number of random parameter points")
    p.add_argument("--threshold", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": _cmd_synth,
            "fit": _cmd_fit,
            "fit-batch": _cmd_fit_batch,
            "em-refine": _cmd_em_refine,
            "eval": _cmd_eval,
            "render": _cmd_render,
            "check-grads": _cmd_check_grads,
        }[args.command]
        return handler(args)
    except UserDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except QuadfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_config(args) -> FitConfig:
    config = FitConfig()
    if getattr(args, "config", None):
        config = dataio.load_run_config(args.config).fit
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "clusters", None) is not None:
        config = dataclasses.replace(config, clusters=args.clusters)
    config.validate()
    return config


def _stages(args) -> tuple[int, ...]:
    return {"1": (1,), "2": (2,), "both": (1, 2)}[getattr(args, "stage", "both")]


def _cmd_synth(args) -> int:
    out = _outdir(args)
    model, priors = dataio.load_model(args.model)
    seed = args.seed if args.seed is not None else 0
    if args.spec:
        spec = dataio.load_synth_spec(args.spec)
    else:
        spec = dataio.default_synth_spec(
            model, priors.shape, count=args.count, n_clusters=args.clusters,
            seed=seed, image_size=tuple(args.size), pixel_sigma=args.noise_px,
            visibility_dropout=args.dropout)
    anns, truths = dataio.synth_generate(model, priors, spec, seed)
    ann_path = os.path.join(out, "annotations.json")
    mask_dir = os.path.join(out, "masks")
    dataio.save_annotations(ann_path, anns, mask_dir)
    truth_path = os.path.join(out, "ground_truth.json")
    dataio.save_ground_truth(truth_path, truths)
    spec_path = os.path.join(out, "synth_spec.json")
    dataio.save_synth_spec(spec_path, spec)
    artifacts = [ann_path, truth_path, spec_path] + [
        os.path.join(mask_dir, f"{a.image_id}.png") for a in anns]
    dataio.save_manifest(out, "synth", artifacts)
    print(f"synth: wrote {len(anns)} images to {out}")
    return 0


def _pick_annotation(anns, image_id):
    if image_id is None:
        return anns[0]
    for ann in anns:
        if ann.image_id == image_id:
            return ann
    raise UserDataError(f"no annotation with id {image_id!r}")


def _cmd_fit(args) -> int:
    out = _outdir(args)
    model, priors = dataio.load_model(args.model)
    anns, summary = dataio.load_annotations(args.annotations)
    if not anns:
        raise UserDataError("no usable annotations "
                            f"(loaded {summary.loaded}, skipped {summary.skipped})")
    ann = _pick_annotation(anns, args.id)
    config = _load_config(args)
    report = fit_single(ann, model, priors, config=config, stages=_stages(args))
    fits_path = os.path.join(out, "fits.json")
    dataio.save_reports(fits_path, [report])
    dataio.save_manifest(out, "fit", [fits_path])
    print(f"fit: image {ann.image_id} best energy "
          f"{report.best_energy[-1]:.6f} after {report.iterations} iterations")
    return 0


def _cmd_fit_batch(args) -> int:
    out = _outdir(args)
    model, priors = dataio.load_model(args.model)
    anns, summary = dataio.load_annotations(args.annotations)
    if not anns:
        raise UserDataError("no usable annotations "
                            f"(loaded {summary.loaded}, skipped {summary.skipped})")
    config = _load_config(args)
    artifacts = []

    def checkpoint(mix, round_idx):
        path = os.path.join(out, f"mixture_round_{round_idx:03d}.json")
        dataio.save_mixture(path, mix)
        artifacts.append(path)

    reports, mix = fit_batch_with_em(
        anns, model, priors, config=config, use_em=args.em,
        stages=_stages(args), on_em=checkpoint)
    fits_path = os.path.join(out, "fits.json")
    dataio.save_reports(fits_path, reports)
    mix_path = os.path.join(out, "mixture.json")
    dataio.save_mixture(mix_path, mix)
    artifacts += [fits_path, mix_path]
    dataio.save_manifest(out, "fit-batch", artifacts)
    n_quar = sum(1 for r in reports if r.quarantined)
    print(f"fit-batch: {len(reports)} images fitted"
          + (f" ({n_quar} quarantined)" if n_quar else ""))
    return 0


def _cmd_em_refine(args) -> int:
    out = _outdir(args)
    model, priors = dataio.load_model(args.model)
    reports = dataio.load_reports(args.fits)
    live = [r for r in reports if not r.quarantined]
    if not live:
        raise UserDataError("no usable fits in the report file")
    betas = np.stack([np.asarray(r.params.shape, np.float64) for r in live])
    seed = args.seed if args.seed is not None else 0
    clusters = args.clusters if args.clusters is not None else 10
    mix = emprior.init_mixture(priors.shape, clusters, seed,
                               n_images=len(live))
    trajectory = [emprior.log_likelihood(mix, betas)]
    for _ in range(args.rounds):
        mix = emprior.m_step(emprior.e_step(mix, betas), betas)
        trajectory.append(emprior.log_likelihood(mix, betas))
        if trajectory[-1] - trajectory[-2] < args.tol:
            break
    mix_path = os.path.join(out, "mixture.json")
    dataio.save_mixture(mix_path, mix)
    ll_path = os.path.join(out, "em_log_likelihood.json")
    dataio.dump_json(ll_path, {"format_version": dataio.FORMAT_VERSION,
                               "log_likelihood": trajectory})
    dataio.save_manifest(out, "em-refine", [mix_path, ll_path])
    print(f"em-refine: {len(trajectory) - 1} rounds, final log-likelihood "
          f"{trajectory[-1]:.6f}")
    return 0


def _cmd_eval(args) -> int:
    out = _outdir(args)
    model, _ = dataio.load_model(args.model)
    anns, _ = dataio.load_annotations(args.annotations)
    reports = dataio.load_reports(args.fits)
    tau = args.tau if args.tau is not None else metrics.DEFAULT_TAU
    result = metrics.evaluate_corpus(reports, anns, model, tau=tau)
    results_path = os.path.join(out, "results.json")
    dataio.save_results(results_path, result)
    dataio.save_manifest(out, "eval", [results_path])
    print(result.table())
    return 0


def _overlay(model: TemplateModel, ann: Annotation, params: ParamState) -> np.ndarray:
    """RGB overlay: mask boundary red, keypoints green, model joints blue."""
    h, w = ann.height, ann.width
    img = np.zeros((h, w, 3), dtype=np.uint8)
    mask = np.asarray(ann.silhouette, dtype=bool)
    img[mask] = (70, 70, 70)
    interior = mask.copy()
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        interior &= np.roll(mask, shift, axis=axis)
    img[mask & ~interior] = (220, 40, 40)

    def splat(uv, color, size=1):
        c, r = int(round(uv[0])), int(round(uv[1]))
        img[max(r - size, 0):r + size + 1, max(c - size, 0):c + size + 1] = color

    for k, uv in enumerate(ann.keypoints):
        if ann.visibility[k]:
            splat(uv, (60, 220, 60))
    mesh = skin(model, params, with_transforms=False)
    cam = Camera(focal_length=params.focal_length, width=w, height=h,
                 translation=params.translation)
    joints_uv = np.asarray(project(np.asarray(mesh.joints), cam))
    for uv in joints_uv[np.asarray(model.keypoint_map)]:
        if 0 <= uv[0] < w and 0 <= uv[1] < h:
            splat(uv, (80, 120, 255))
    return img


def _cmd_render(args) -> int:
    from PIL import Image

    out = _outdir(args)
    model, _ = dataio.load_model(args.model)
    anns, _ = dataio.load_annotations(args.annotations)
    reports = dataio.load_reports(args.fits)
    by_id = {ann.image_id: ann for ann in anns}
    wanted = set(args.ids) if args.ids else None
    artifacts = []
    for report in reports:
        if wanted is not None and report.image_id not in wanted:
            continue
        ann = by_id.get(report.image_id)
        if ann is None:
            raise UserDataError(f"no annotation with id {report.image_id!r}")
        img = _overlay(model, ann, report.params)
        path = os.path.join(out, f"overlay_{report.image_id}.png")
        Image.fromarray(img, mode="RGB").save(path, format="PNG")
        artifacts.append(path)
    if not artifacts:
        raise UserDataError("nothing to render (no matching ids)")
    dataio.save_manifest(out, "render", artifacts)
    print(f"render: wrote {len(artifacts)} overlays to {out}")
    return 0


def _cmd_check_grads(args) -> int:
    out = _outdir(args)
    model, priors = dataio.load_model(args.model)
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng((seed, 0xFD))
    spec = dataio.default_synth_spec(model, priors.shape, count=1,
                                     n_clusters=1, seed=seed)
    anns, _ = dataio.synth_generate(model, priors, spec, seed)
    ann = anns[0]
    mix = emprior.init_mixture(priors.shape, 3, seed)
    run_priors = Priors(pose=priors.pose, shape=priors.shape, mixture=mix)
    weights = LossWeights()
    base = init_params(ann, model, priors,
                       FitConfig(init_warmup_iters=0, progress=False))

    def energy(p):
        return total_energy(p, model, ann, weights, run_priors, stage=2,
                            sharpness=1e-2)

    worst = {name: 0.0 for name in ("pose", "shape", "log_scale",
                                    "translation", "focal")}
    excluded = 0
    for _ in range(args.points):
        point = ParamState(
            pose=base.pose + rng.normal(0.0, 0.05, base.pose.size),
            shape=base.shape + rng.normal(0.0, 0.1, base.shape.size),
            log_scale=base.log_scale + rng.normal(0.0, 0.03, base.log_scale.size),
            translation=base.translation + rng.normal(0.0, 0.05, 3),
            focal_length=float(base.focal_length * rng.uniform(0.95, 1.05)),
        )
        report = finite_diff_check(energy, point, h=1e-5)
        excluded += len(report.excluded)
        for name, err in report.max_rel_error.items():
            worst[name] = max(worst[name], err)
    for name, err in worst.items():
        print(f"{name}: max relative error {err:.3e}")
    if excluded:
        print(f"(excluded {excluded} kinked coordinates)")
    report_path = os.path.join(out, "grad_check.json")
    dataio.dump_json(report_path, {
        "format_version": dataio.FORMAT_VERSION,
        "points": args.points, "threshold": args.threshold,
        "max_rel_error": worst, "excluded_coordinates": excluded})
    dataio.save_manifest(out, "check-grads", [report_path])
    ok = all(err < args.threshold for err in worst.values())
    print("check-grads:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
