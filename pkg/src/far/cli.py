"""Command-line front end: ``far build-basis | fit | frontalize | synth | eval``.

Exit codes: 0 success, 1 usage or unreadable input, 2 computation failure.
A basis file ``X.farb`` travels with its shape model in ``X.farb.shape.json``
unless ``--model`` points elsewhere.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import evalkit, io, solver, subspace, synth
from .shapewarp import build_shape_model, delaunay

SHAPE_SUFFIX = ".shape.json"
DEFAULTS = solver.SolverConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_frame(text):
    """``WxH`` -> ``(rows, cols)``."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--frame expects WxH, got {text!r}") from None
    if w < 3 or h < 3:
        raise argparse.ArgumentTypeError(f"--frame too small: {text!r}")
    return (h, w)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--lambda", dest="lam", type=float, default=DEFAULTS.lam)
    g.add_argument("--rho", type=float, default=DEFAULTS.rho)
    g.add_argument("--mu0", type=float, default=DEFAULTS.mu0)
    g.add_argument("--mu-max", type=float, default=DEFAULTS.mu_max)
    g.add_argument("--eps1", type=float, default=DEFAULTS.eps1)
    g.add_argument("--eps2", type=float, default=DEFAULTS.eps2)
    g.add_argument("--eps3", type=float, default=DEFAULTS.eps3)
    g.add_argument("--max-inner", type=_positive_int, default=DEFAULTS.max_inner)
    g.add_argument("--max-outer", type=_positive_int, default=DEFAULTS.max_outer)
    g.add_argument("--dp-multiplier", action="store_true", help="keep the a/mu term in the dp update")


def build_parser():
    p = _Parser(prog="far", description="Joint face alignment and low-rank frontal reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-basis", help="build shape model and appearance basis from training data")
    b.add_argument("--images", required=True, help="directory of PGM images")
    b.add_argument("--landmarks", required=True, help="directory of pts files with matching stems")
    b.add_argument("--frame", type=parse_frame, default=(40, 40), help="reference frame WxH")
    b.add_argument("--k", type=_positive_int, default=20, help="number of principal directions")
    b.add_argument("--n-shape", type=_positive_int, default=None, help="shape deformation modes")
    b.add_argument("--out", required=True, help="output .farb path")

    for name, what in (("fit", "fitted landmarks (.pts)"), ("frontalize", "frontal texture (.pgm)")):
        f = sub.add_parser(name, help=f"write {what}")
        f.add_argument("--image", required=True, help="PGM image or directory")
        f.add_argument("--init", required=True, help="initial pts file or directory")
        f.add_argument("--basis", required=True)
        f.add_argument("--model", help=f"shape model json (default: <basis>{SHAPE_SUFFIX})")
        f.add_argument("--out", required=True, help="output file or directory")
        f.add_argument("--diag", help="diagnostic trace CSV (file or directory)")
        _solver_flags(f)

    s = sub.add_parser("synth", help="write a synthetic model and instance with ground truth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--frame", type=parse_frame, default=(40, 40))
    s.add_argument("--k", type=_positive_int, default=20)
    s.add_argument("--n-train", type=_positive_int, default=60)
    s.add_argument("--translation", type=float, default=2.0, help="translation magnitude in px")
    s.add_argument("--rotation", type=float, default=0.0, help="degrees")
    s.add_argument("--scale", type=float, default=0.0, help="percent")
    s.add_argument("--sparsity", type=float, default=0.0)
    s.add_argument("--spike-mag", type=float, default=0.5)
    s.add_argument("--margin", type=int, default=6, help="image padding around the frame in px")

    e = sub.add_parser("eval", help="landmark errors / CED, RMSE, or the shear probe")
    e.add_argument("--pred", help="predicted pts file or directory")
    e.add_argument("--gt", help="ground truth: pts or JSON sidecar, file or directory")
    e.add_argument("--interior", help="interior indices, e.g. '9-31' or '1,2,5-7'")
    e.add_argument("--eye-corners", help="two indices 'i,j'")
    e.add_argument("--thresholds", default="0.01,0.02,0.03,0.04,0.05,0.06,0.08,0.1")
    e.add_argument("--ced", help="CED CSV output")
    e.add_argument("--rmse", nargs=2, metavar=("A", "B"), help="RMSE between two PGM images")
    e.add_argument("--texture", help="PGM texture for the shear probe")
    e.add_argument("--levels", default="-0.3,-0.25,-0.2,-0.15,-0.1,-0.05,0,0.05,0.1,0.15,0.2,0.25,0.3")
    e.add_argument("--probe", help="probe CSV output")
    return p


def solver_config(args):
    try:
        return solver.SolverConfig(
            lam=args.lam,
            rho=args.rho,
            mu0=args.mu0,
            mu_max=args.mu_max,
            eps1=args.eps1,
            eps2=args.eps2,
            eps3=args.eps3,
            max_inner=args.max_inner,
            max_outer=args.max_outer,
            dp_multiplier=args.dp_multiplier,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _index_list(text, flag):
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-"))
                out.extend(range(lo, hi + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"{flag}: cannot parse index list {text!r}") from None
    return out


def _float_list(text, flag):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: cannot parse number list {text!r}") from None


def _stems(directory, ext):
    if not os.path.isdir(directory):
        raise UsageError(f"not a directory: {directory}")
    return {os.path.splitext(n)[0]: os.path.join(directory, n) for n in sorted(os.listdir(directory)) if n.endswith(ext)}


def _pairs(image, init, out, out_ext, diag):
    """Expand file or directory arguments into (name, image, init, out, diag)."""
    if os.path.isdir(image):
        images = _stems(image, ".pgm")
        inits = _stems(init, ".pts")
        missing = sorted(set(images) - set(inits))
        if missing:
            print(f"no initial landmarks for {', '.join(missing)}; skipped", file=sys.stderr)
        os.makedirs(out, exist_ok=True)
        if diag:
            os.makedirs(diag, exist_ok=True)
        return [
            (
                stem,
                images[stem],
                inits[stem],
                os.path.join(out, stem + out_ext),
                os.path.join(diag, stem + ".csv") if diag else None,
            )
            for stem in images
            if stem in inits
        ]
    if os.path.isdir(init):
        raise UsageError("--init is a directory but --image is a single file")
    return [(os.path.basename(image), image, init, out, diag)]


def load_model_pair(basis_path, model_path=None):
    basis = subspace.load_basis(basis_path)
    model, tri = io.load_shape_model(model_path or basis_path + SHAPE_SUFFIX)
    return basis, model, tri


def cmd_build_basis(args):
    images = _stems(args.images, ".pgm")
    marks = _stems(args.landmarks, ".pts")
    common = [s for s in images if s in marks]
    if len(common) < 2:
        raise UsageError(f"need at least 2 image/landmark pairs with matching names, found {len(common)}")
    imgs = [io.read_image(images[s]) for s in common]
    shapes = [io.read_pts(marks[s]) for s in common]
    model = build_shape_model(shapes, n_s=args.n_shape, frame=args.frame)
    tri = delaunay(model.mean_shape)
    basis = subspace.build_basis(imgs, shapes, model, tri, args.k)
    subspace.save_basis(basis, args.out)
    io.save_shape_model(args.out + SHAPE_SUFFIX, model, tri)
    print(f"basis: {len(common)} pairs, k={basis.k}, {int(basis.mask.sum())} unmasked pixels -> {args.out}")
    return 0


def _run_batch(args, out_ext, job):
    cfg = solver_config(args)
    basis, model, tri = load_model_pair(args.basis, args.model)
    jobs = _pairs(args.image, args.init, args.out, out_ext, args.diag)
    failed = 0
    for name, image_path, init_path, out_path, diag_path in jobs:
        try:
            image = io.read_image(image_path)
            init = io.read_pts(init_path)
            result = job(image, init, model, tri, basis, cfg, out_path)
        except (io.FormatError, OSError) as exc:
            if len(jobs) == 1:
                raise
            print(f"{name}: failed: {exc}", file=sys.stderr)
            failed += 1
            continue
        except (ValueError, np.linalg.LinAlgError, solver.SolverDivergence) as exc:
            if len(jobs) == 1:
                raise _Computation(str(exc)) from exc
            print(f"{name}: failed: {exc}", file=sys.stderr)
            failed += 1
            continue
        if diag_path:
            io.atomic_write_text(diag_path, solver.format_trace_csv(result.trace))
        print(
            f"{name}: outer={result.n_outer} converged={result.converged_outer} "
            f"phi={result.objective_trace[-1]:.6g} -> {out_path}"
        )
    if failed:
        print(f"{failed} of {len(jobs)} entries failed", file=sys.stderr)
        return 2
    return 0


class _Computation(Exception):
    pass


def _fit_job(image, init, model, tri, basis, cfg, out_path):
    result = solver.fit(image, init, model, tri, basis, cfg)
    io.save_pts(result.shape, out_path)
    return result


def _frontalize_job(image, init, model, tri, basis, cfg, out_path):
    frontal, result = solver.frontalize(image, init, model, tri, basis, cfg)
    io.write_image(frontal, out_path)
    return result


def cmd_synth(args):
    if not 0 <= args.sparsity < 1:
        raise UsageError(f"--sparsity must be in [0, 1), got {args.sparsity}")
    os.makedirs(args.out, exist_ok=True)
    sm = synth.make_model(seed=args.seed, frame=args.frame, n_train=args.n_train, k=args.k)
    inst = synth.gen_instance(
        sm.basis,
        sm.model,
        sm.tri,
        seed=args.seed,
        translation_px=args.translation,
        rotation_deg=args.rotation,
        scale_pct=args.scale,
        sparsity=args.sparsity,
        spike_mag=args.spike_mag,
        margin=args.margin,
    )
    basis_path = os.path.join(args.out, "basis.farb")
    subspace.save_basis(sm.basis, basis_path)
    io.save_shape_model(basis_path + SHAPE_SUFFIX, sm.model, sm.tri)
    io.write_image(inst.image, os.path.join(args.out, "image.pgm"))
    io.write_image(inst.clean_image, os.path.join(args.out, "clean.pgm"))
    io.save_pts(inst.init_shape, os.path.join(args.out, "init.pts"))
    io.save_pts(inst.gt_shape, os.path.join(args.out, "gt.pts"))
    io.write_sidecar(
        os.path.join(args.out, "gt.json"),
        inst.gt_shape,
        inst.gt_params,
        inst.gt_error_support,
        inst.seed,
        gt_coeffs=inst.gt_coeffs,
        interior=list(synth.INTERIOR),
        eye_corners=list(synth.EYE_CORNERS),
    )
    print(f"synthetic instance (seed {args.seed}) -> {args.out}")
    return 0


def _read_gt(path):
    if path.endswith(".json"):
        payload = io.read_sidecar(path)
        return payload["gt_shape"], payload.get("interior"), payload.get("eye_corners")
    return io.read_pts(path), None, None


def cmd_eval(args):
    did = False
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt must be given together")
        did = True
        if os.path.isdir(args.pred):
            preds = _stems(args.pred, ".pts")
            gts = {**_stems(args.gt, ".pts"), **_stems(args.gt, ".json")}
            pairs = [(s, preds[s], gts[s]) for s in preds if s in gts]
            if not pairs:
                raise UsageError("no prediction/ground-truth pairs with matching names")
        else:
            pairs = [(os.path.basename(args.pred), args.pred, args.gt)]
        interior = _index_list(args.interior, "--interior") if args.interior else None
        eyes = _index_list(args.eye_corners, "--eye-corners") if args.eye_corners else None
        if eyes is not None and len(eyes) != 2:
            raise UsageError("--eye-corners needs exactly two indices")
        errors = []
        for name, pred_path, gt_path in pairs:
            gt, gt_interior, gt_eyes = _read_gt(gt_path)
            pred = io.read_pts(pred_path)
            err = evalkit.pt2pt_error(
                pred,
                gt,
                interior if interior is not None else gt_interior,
                eyes if eyes is not None else gt_eyes,
            )
            px = float(np.mean(np.linalg.norm(pred - gt, axis=1)))
            errors.append(err)
            print(f"{name}: pt2pt={err:.6f} mean_px={px:.6f}")
        thresholds = _float_list(args.thresholds, "--thresholds")
        curve = evalkit.ced(errors, thresholds)
        if args.ced:
            io.atomic_write_text(args.ced, evalkit.ced_csv(curve))
        if np.any(np.isclose(curve.thresholds, evalkit.BENCHMARK_THRESHOLD)):
            print(f"fraction below {evalkit.BENCHMARK_THRESHOLD}: {curve.at(evalkit.BENCHMARK_THRESHOLD):.4f}")
    if args.rmse:
        did = True
        a, b = (io.read_image(p) for p in args.rmse)
        print(f"rmse={evalkit.rmse(a, b):.6f}")
    if args.texture:
        did = True
        levels = _float_list(args.levels, "--levels")
        pairs = evalkit.nuclear_probe(io.read_image(args.texture), levels)
        for level, value in pairs:
            print(f"level={level:+.4f} nuclear_norm={value:.6f}")
        if args.probe:
            io.atomic_write_text(args.probe, evalkit.probe_csv(pairs))
    if not did:
        raise UsageError("eval needs --pred/--gt, --rmse or --texture")
    return 0


COMMANDS = {
    "build-basis": cmd_build_basis,
    "fit": lambda a: _run_batch(a, ".pts", _fit_job),
    "frontalize": lambda a: _run_batch(a, ".pgm", _frontalize_job),
    "synth": cmd_synth,
    "eval": cmd_eval,
}


def run(argv=None):
    """Execute one command line; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{exc}\n{parser.format_usage().strip()}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (io.FormatError, subspace.BasisFormatError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except _Computation as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return 2
    except (ValueError, np.linalg.LinAlgError, solver.SolverDivergence, ArithmeticError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
